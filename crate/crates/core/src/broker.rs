//! The trusted Broker: attests the installed app with its provider and, only if
//! the measurement matches, hands the PIN to that app.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::attest::open_measurement;
use crate::device::{DeviceState, Event, SETUP_PIN_KEY};
use crate::pake::{ParamsId, PakeRole, PakeSession, Pin};
use crate::wire::{AbortReason, Dialer, Transcript, Transport, UserId, WireError, WireMessage};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BrokerError {
    #[error("malformed service tag {0:?}")]
    MalformedTag(String),
    #[error("a PIN is exactly 5 decimal digits")]
    InvalidPin,
    #[error("the Broker only runs after the secure attention sequence")]
    NotInvokedViaSas,
}

/// `handle:user_id`, as mailed to the customer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ServiceTag {
    handle: String,
    user_id: UserId,
}

impl ServiceTag {
    pub fn new(handle: &str, user_id: UserId) -> Result<Self, BrokerError> {
        if handle.is_empty() || handle.contains(':') {
            return Err(BrokerError::MalformedTag(format!("{handle}:{user_id}")));
        }
        Ok(Self {
            handle: handle.to_owned(),
            user_id,
        })
    }

    pub fn handle(&self) -> &str {
        &self.handle
    }

    pub fn user_id(&self) -> &UserId {
        &self.user_id
    }
}

/// Splits on the first ':'. Whatever follows must be a valid user ID.
pub fn parse_service_tag(text: &str) -> Result<ServiceTag, BrokerError> {
    let malformed = || BrokerError::MalformedTag(text.to_owned());
    let (handle, user) = text.split_once(':').ok_or_else(malformed)?;
    let user_id = UserId::new(user).map_err(|_| malformed())?;
    ServiceTag::new(handle, user_id).map_err(|_| malformed())
}

impl FromStr for ServiceTag {
    type Err = BrokerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_service_tag(s)
    }
}

impl fmt::Display for ServiceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.handle, self.user_id)
    }
}

impl Serialize for ServiceTag {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ServiceTag {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_service_tag(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetupOutcome {
    Success,
    AbortPakeFailed,
    AbortAuthFailed,
    AbortMeasurementMismatch,
    AbortNoSuchApp,
    AbortTransport,
}

impl SetupOutcome {
    pub const ALL: [SetupOutcome; 6] = [
        SetupOutcome::Success,
        SetupOutcome::AbortPakeFailed,
        SetupOutcome::AbortAuthFailed,
        SetupOutcome::AbortMeasurementMismatch,
        SetupOutcome::AbortNoSuchApp,
        SetupOutcome::AbortTransport,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SetupOutcome::Success => "success",
            SetupOutcome::AbortPakeFailed => "abort_pake_failed",
            SetupOutcome::AbortAuthFailed => "abort_auth_failed",
            SetupOutcome::AbortMeasurementMismatch => "abort_measurement_mismatch",
            SetupOutcome::AbortNoSuchApp => "abort_no_such_app",
            SetupOutcome::AbortTransport => "abort_transport",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.as_str() == name)
    }
}

impl fmt::Display for SetupOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct SetupResult {
    pub outcome: SetupOutcome,
    pub transcript: Transcript,
}

/// Entry point for what the user typed into the Broker screen. Both inputs are
/// checked before anything goes on the network.
pub fn submit(
    device: &mut DeviceState,
    tag_text: &str,
    pin_text: &str,
    dialer: &dyn Dialer,
) -> Result<SetupResult, BrokerError> {
    let tag = parse_service_tag(tag_text)?;
    let pin = Pin::parse(pin_text).map_err(|_| BrokerError::InvalidPin)?;
    run_setup(device, &tag, pin, dialer)
}

/// Runs the whole setup exchange for `tag` and releases the PIN on success.
///
/// Must run inside the Broker session opened by the SAS. The PIN is consumed
/// and wiped on every path.
pub fn run_setup(
    device: &mut DeviceState,
    tag: &ServiceTag,
    pin: Pin,
    dialer: &dyn Dialer,
) -> Result<SetupResult, BrokerError> {
    if !device.broker().is_active() || !device.is_locked() {
        return Err(BrokerError::NotInvokedViaSas);
    }
    device.log(Event::BrokerStarted {
        handle: tag.handle.clone(),
    });
    let mut transcript = Transcript::new();
    let outcome = attest_and_release(device, tag, &pin, dialer, &mut transcript);
    drop(pin);

    if outcome == SetupOutcome::Success {
        device.broker_finish(outcome);
        device.request_foreground(&tag.handle);
        device.log(Event::AppLaunched {
            handle: tag.handle.clone(),
        });
    } else {
        device.broker_notice(outcome);
        device.broker_finish(outcome);
    }
    log::debug!("setup for {tag}: {outcome}");
    Ok(SetupResult { outcome, transcript })
}

fn attest_and_release(
    device: &mut DeviceState,
    tag: &ServiceTag,
    pin: &Pin,
    dialer: &dyn Dialer,
    transcript: &mut Transcript,
) -> SetupOutcome {
    let Some(url) = device.registry_url(&tag.handle).map(str::to_owned) else {
        return SetupOutcome::AbortNoSuchApp;
    };
    let mut transport = match dialer.dial(&url) {
        Ok(t) => t,
        Err(err) => {
            log::warn!("dialing {url}: {err}");
            return SetupOutcome::AbortTransport;
        }
    };
    let outcome = exchange(device, tag, pin, transport.as_mut());
    *transcript = transport.take_transcript();
    outcome
}

fn exchange(device: &mut DeviceState, tag: &ServiceTag, pin: &Pin, t: &mut dyn Transport) -> SetupOutcome {
    let mut session = PakeSession::new(
        PakeRole::Initiator,
        pin.clone(),
        tag.user_id.as_str(),
        ParamsId::Modp2048,
    );
    let Ok(commit) = session.start(device.rng()) else {
        return SetupOutcome::AbortPakeFailed;
    };
    if t.send(&WireMessage::m1(tag.user_id.clone(), commit)).is_err() {
        return SetupOutcome::AbortTransport;
    }

    let peer = match t.recv() {
        Ok(WireMessage::M2 { commit }) if commit.params_id() == session.params_id() => commit,
        other => return protocol_error(t, other),
    };
    if session.receive_commit(peer.value()).is_err() {
        let _ = t.send(&WireMessage::Abort {
            reason: AbortReason::Malformed,
        });
        return SetupOutcome::AbortTransport;
    }
    let confirm = session.make_confirmation().expect("keys derived");
    if t.send(&WireMessage::M3 { confirm }).is_err() {
        return SetupOutcome::AbortTransport;
    }

    match t.recv() {
        Ok(WireMessage::M4 { confirm }) => {
            if !session.verify_confirmation(&confirm) {
                let _ = t.send(&WireMessage::Abort {
                    reason: AbortReason::PakeConfirmFailed,
                });
                return SetupOutcome::AbortPakeFailed;
            }
        }
        Ok(WireMessage::Abort {
            reason: AbortReason::PakeConfirmFailed,
        }) => return SetupOutcome::AbortPakeFailed,
        other => return protocol_error(t, other),
    }

    let attestation = match t.recv() {
        Ok(WireMessage::M5 { attestation }) => attestation,
        other => return protocol_error(t, other),
    };
    let keys = session.keys().expect("confirmed session has keys");
    // Nothing goes back on the wire after M5; the outcome is local.
    let Ok(reference) = open_measurement(&attestation, keys) else {
        return SetupOutcome::AbortAuthFailed;
    };
    let Some(local) = device.installed_measurement(&tag.handle) else {
        return SetupOutcome::AbortNoSuchApp;
    };
    if local != reference {
        return SetupOutcome::AbortMeasurementMismatch;
    }
    match device.tcb_write(&tag.handle, SETUP_PIN_KEY, pin.expose().as_bytes().to_vec()) {
        Ok(()) => SetupOutcome::Success,
        Err(_) => SetupOutcome::AbortNoSuchApp,
    }
}

fn protocol_error(t: &mut dyn Transport, got: Result<WireMessage, WireError>) -> SetupOutcome {
    let reason = match got {
        Ok(WireMessage::Abort { .. }) | Err(WireError::TransportClosed) => None,
        Err(WireError::Timeout) => Some(AbortReason::Timeout),
        Ok(_) | Err(_) => Some(AbortReason::Malformed),
    };
    if let Some(reason) = reason {
        let _ = t.send(&WireMessage::Abort { reason });
    }
    SetupOutcome::AbortTransport
}

/// The launched app reads the PIN from its own folder and shows it.
///
/// Returns what the app renders, which is `None` unless setup succeeded for
/// this handle and the app holds focus.
pub fn launch_and_display(device: &mut DeviceState, handle: &str) -> Option<String> {
    device.app_get(handle, handle, SETUP_PIN_KEY).ok().flatten()?;
    device.render_app(handle).pin
}

#[cfg(test)]
mod tests;
