use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Indicator, InstalledApp, Phase, Principal, SlotSummary, Variant, INDICATOR_KEY, SETUP_PIN_KEY};
use crate::broker::SetupOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputField {
    ServiceTagAndPin,
    IndicatorPicker,
    Credentials,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IndicatorSlot {
    /// The screen has no indicator slot at all.
    None,
    /// A legit app withholding its indicator because it lost focus.
    Hidden,
    Image(Indicator),
    /// A login screen with an empty slot.
    Missing,
    /// A login screen claiming the indicator service is down.
    Maintenance,
}

impl IndicatorSlot {
    pub fn summary(&self) -> SlotSummary {
        match self {
            IndicatorSlot::None => SlotSummary::None,
            IndicatorSlot::Hidden => SlotSummary::Hidden,
            IndicatorSlot::Image(ind) => SlotSummary::Image(ind.image_id.clone()),
            IndicatorSlot::Missing => SlotSummary::Missing,
            IndicatorSlot::Maintenance => SlotSummary::Maintenance,
        }
    }
}

/// A rendered screen as structured fields. Two screens look the same to the user
/// iff these fields are equal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Screen {
    pub owner: Option<Principal>,
    pub title: String,
    pub focused: bool,
    pub indicator: IndicatorSlot,
    pub pin: Option<String>,
    pub inputs: Vec<InputField>,
    pub notice: Option<String>,
}

impl Screen {
    /// The launcher.
    pub(crate) fn home() -> Self {
        Self {
            owner: None,
            title: "Home".into(),
            focused: true,
            indicator: IndicatorSlot::None,
            pin: None,
            inputs: Vec::new(),
            notice: None,
        }
    }

    pub(crate) fn broker(notice: Option<SetupOutcome>) -> Self {
        Self {
            owner: Some(Principal::Broker),
            title: "Broker".into(),
            focused: true,
            indicator: IndicatorSlot::None,
            pin: None,
            inputs: if notice.is_none() {
                vec![InputField::ServiceTagAndPin]
            } else {
                Vec::new()
            },
            notice: notice.map(|o| format!("setup aborted: {}", o.as_str())),
        }
    }
}

/// Legit apps show their secrets only while they hold focus.
pub(crate) fn render_legit(app: &InstalledApp, storage: &BTreeMap<String, Vec<u8>>, focused: bool) -> Screen {
    let mut screen = Screen {
        owner: Some(Principal::App(app.package.handle.clone())),
        title: app.package.display_name.clone(),
        focused,
        indicator: IndicatorSlot::None,
        pin: None,
        inputs: Vec::new(),
        notice: None,
    };
    if let Some(stored) = storage.get(INDICATOR_KEY) {
        screen.inputs.push(InputField::Credentials);
        screen.indicator = match serde_json::from_slice::<Indicator>(stored) {
            Ok(ind) if focused => IndicatorSlot::Image(ind),
            Ok(_) => IndicatorSlot::Hidden,
            Err(_) => IndicatorSlot::Missing,
        };
    } else if let Some(pin) = storage.get(SETUP_PIN_KEY) {
        screen.inputs.push(InputField::IndicatorPicker);
        if focused {
            screen.pin = String::from_utf8(pin.clone()).ok();
        }
    } else {
        screen.notice = Some("not set up".into());
    }
    screen
}

/// Attackers copy the imitated app's look. None of them knows the PIN or the
/// indicator, so those slots are where they give themselves away.
pub(crate) fn render_attacker(app: &InstalledApp, imitated: Option<&InstalledApp>) -> Screen {
    let title = imitated
        .map(|a| a.package.display_name.clone())
        .unwrap_or_else(|| app.package.display_name.clone());
    let mut screen = Screen {
        owner: Some(Principal::App(app.package.handle.clone())),
        title,
        focused: true,
        indicator: IndicatorSlot::None,
        pin: None,
        inputs: Vec::new(),
        notice: None,
    };
    match app.plan.phase {
        Some(Phase::Setup) => screen.inputs.push(InputField::IndicatorPicker),
        Some(Phase::Login) => {
            screen.inputs.push(InputField::Credentials);
            screen.indicator = match (app.plan.variant, &app.plan.decoy) {
                (Some(Variant::RandomImage), Some(decoy)) => IndicatorSlot::Image(decoy.clone()),
                (Some(Variant::Maintenance), _) => {
                    screen.notice = Some("image service under maintenance".into());
                    IndicatorSlot::Maintenance
                }
                _ => IndicatorSlot::Missing,
            };
        }
        None => {}
    }
    screen
}
