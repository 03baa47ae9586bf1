use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use super::{DeviceError, DeviceState, Event, Indicator, IndicatorSlot, InputField, Principal, Screen, INDICATOR_KEY};
use crate::broker::ServiceTag;
use crate::pake::Pin;

/// How carefully the user inspects what an app shows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Alertness {
    AlwaysChecks,
    NeverChecks,
    /// Checks with this probability, drawn from the device RNG each time.
    Probabilistic(f64),
}

impl fmt::Display for Alertness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alertness::AlwaysChecks => f.write_str("always"),
            Alertness::NeverChecks => f.write_str("never"),
            Alertness::Probabilistic(p) => write!(f, "p={p}"),
        }
    }
}

impl FromStr for Alertness {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "always" => Ok(Alertness::AlwaysChecks),
            "never" => Ok(Alertness::NeverChecks),
            _ => {
                let p = s
                    .strip_prefix("p=")
                    .and_then(|p| p.parse::<f64>().ok())
                    .ok_or_else(|| format!("alertness must be always, never or p=<0..1>, got {s:?}"))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("probability {p} is outside [0, 1]"));
                }
                Ok(Alertness::Probabilistic(p))
            }
        }
    }
}

impl TryFrom<String> for Alertness {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Alertness> for String {
    fn from(a: Alertness) -> Self {
        a.to_string()
    }
}

/// Result of one look at a screen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Check {
    /// Whether the user actually compared anything.
    pub checked: bool,
    pub accepted: bool,
}

impl Check {
    pub fn detected(self) -> bool {
        self.checked && !self.accepted
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Credentials {
    pub username: String,
    pub password: String,
}

impl Credentials {
    pub fn to_bytes(&self) -> Vec<u8> {
        format!("{}\n{}", self.username, self.password).into_bytes()
    }
}

impl fmt::Debug for Credentials {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Credentials")
            .field("username", &self.username)
            .finish_non_exhaustive()
    }
}

/// Where a typed PIN went.
#[derive(Debug)]
pub enum TypedInto {
    Broker {
        tag: String,
        pin: Zeroizing<String>,
    },
    App(String),
    Nowhere,
}

#[derive(Debug, Clone)]
pub struct UserAgent {
    pub mailbox: Option<(Pin, ServiceTag)>,
    pub alertness: Alertness,
    pub chosen_indicator: Option<Indicator>,
    pub credentials: Credentials,
    /// Types the mailed PIN with the last digit off by one.
    pub mistype: bool,
}

impl UserAgent {
    pub fn new(alertness: Alertness) -> Self {
        Self {
            mailbox: None,
            alertness,
            chosen_indicator: None,
            credentials: Credentials {
                username: "johndoe".into(),
                password: "hunter2-correct-horse".into(),
            },
            mistype: false,
        }
    }

    pub fn read_mail(&mut self, pin: Pin, tag: ServiceTag) {
        self.mailbox = Some((pin, tag));
    }

    fn decides_to_check(&self, device: &mut DeviceState) -> bool {
        match self.alertness {
            Alertness::AlwaysChecks => true,
            Alertness::NeverChecks => false,
            Alertness::Probabilistic(p) => device.rng().gen_bool(p),
        }
    }

    /// Types the mailed tag and PIN into whatever has input focus.
    pub fn enter_pin(&self, device: &mut DeviceState) -> Result<TypedInto, DeviceError> {
        let (pin, tag) = self.mailbox.as_ref().ok_or(DeviceError::NoMail)?;
        let typed = if self.mistype {
            let index = pin.index();
            Pin::from_index(index - index % 10 + (index + 1) % 10)
        } else {
            pin.clone()
        };
        let Some(target) = device.input_target() else {
            return Ok(TypedInto::Nowhere);
        };
        device.log(Event::UserTyped {
            target: target.clone(),
            field: InputField::ServiceTagAndPin,
        });
        Ok(match target {
            Principal::Broker => TypedInto::Broker {
                tag: tag.to_string(),
                pin: Zeroizing::new(typed.expose().to_owned()),
            },
            Principal::App(handle) => {
                let app = device.app(&handle).map(|a| a.behavior);
                if app.is_some_and(|b| b.is_attacker()) {
                    let mut loot = tag.to_string().into_bytes();
                    loot.push(b'\n');
                    loot.extend_from_slice(typed.expose().as_bytes());
                    device.app_put(&handle, &handle, "captured_pin", loot)?;
                }
                TypedInto::App(handle)
            }
        })
    }

    /// Compares the PIN on screen with the mailed one, if the user bothers.
    pub fn verify_pin_display(&self, device: &mut DeviceState, shown: Option<&str>) -> Result<Check, DeviceError> {
        let (pin, _) = self.mailbox.as_ref().ok_or(DeviceError::NoMail)?;
        let checked = self.decides_to_check(device);
        let accepted = !checked || shown == Some(pin.expose());
        device.log(Event::UserChecked {
            what: "pin".into(),
            checked,
            accepted,
        });
        Ok(Check { checked, accepted })
    }

    /// Looks for the chosen indicator on a login screen.
    pub fn verify_indicator(&self, device: &mut DeviceState, screen: &Screen) -> Check {
        let checked = self.decides_to_check(device);
        let accepted = !checked
            || matches!((&screen.indicator, &self.chosen_indicator),
                (IndicatorSlot::Image(shown), Some(chosen)) if shown == chosen);
        device.log(Event::UserChecked {
            what: "indicator".into(),
            checked,
            accepted,
        });
        Check { checked, accepted }
    }

    /// Picks a gallery photo and hands it to the app that has input focus, which
    /// keeps it in its own storage.
    pub fn choose_indicator(&mut self, device: &mut DeviceState) -> Result<Option<String>, DeviceError> {
        let Some(Principal::App(handle)) = device.input_target() else {
            return Ok(None);
        };
        let indicator = device.gallery_pick(None);
        let encoded = serde_json::to_vec(&indicator).expect("indicator serializes");
        let key = match device.app(&handle).map(|a| a.behavior) {
            Some(b) if b.is_attacker() => "captured_indicator",
            _ => INDICATOR_KEY,
        };
        device.app_put(&handle, &handle, key, encoded)?;
        device.log(Event::UserChoseIndicator {
            target: handle.clone(),
            image_id: indicator.image_id.clone(),
        });
        self.chosen_indicator = Some(indicator);
        Ok(Some(handle))
    }

    /// Types the login credentials into whatever has input focus.
    pub fn enter_credentials(&self, device: &mut DeviceState) -> Result<Option<Principal>, DeviceError> {
        let Some(target) = device.input_target() else {
            return Ok(None);
        };
        device.log(Event::UserTyped {
            target: target.clone(),
            field: InputField::Credentials,
        });
        if let Principal::App(handle) = &target {
            if device.app(handle).is_some_and(|a| a.behavior.is_attacker()) {
                device.app_put(handle, handle, "captured_credentials", self.credentials.to_bytes())?;
            }
        }
        Ok(Some(target))
    }
}
