//! Protocol messages, their canonical JSON encoding, and the transports that
//! carry them.
//!
//! A frame is a 4-byte big-endian body length followed by the body. Bodies are
//! canonical JSON: keys sorted, no whitespace, octet strings as lowercase hex,
//! group elements as padded standard base64 of their fixed-width big-endian
//! bytes. The decoder only accepts bytes that re-encode to themselves.

mod transcript;
mod transport;

use std::fmt;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::attest::{AttestationMessage, Measurement, DIGEST_LEN, TAG_LEN};
use crate::pake::{GroupElement, ParamsId};

pub use transcript::{Direction, Side, Transcript, TranscriptEntry};
pub use transport::{
    inproc_pair, read_frame, write_frame, ChannelIo, Dialer, Endpoint, FrameIo, StreamIo,
    TcpDialer, Transport, DEFAULT_TIMEOUT, MAX_FRAME_LEN,
};

pub const MAX_USER_ID_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("transport closed")]
    TransportClosed,
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN}-byte cap")]
    FrameTooLarge(usize),
    #[error("timed out waiting for peer")]
    Timeout,
    #[error("transport I/O: {0}")]
    Io(String),
}

fn malformed(what: impl Into<String>) -> WireError {
    WireError::Malformed(what.into())
}

/// Customer identifier: 1 to 64 bytes of UTF-8 without ':'.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct UserId(String);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("user ID must be 1-{MAX_USER_ID_LEN} bytes without ':'")]
pub struct InvalidUserId;

impl UserId {
    pub fn new(id: &str) -> Result<Self, InvalidUserId> {
        if id.is_empty() || id.len() > MAX_USER_ID_LEN || id.contains(':') {
            return Err(InvalidUserId);
        }
        Ok(Self(id.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "UserId({:?})", self.0)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for UserId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        UserId::new(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    PakeConfirmFailed,
    AuthFailed,
    MeasurementMismatch,
    Malformed,
    Timeout,
}

impl AbortReason {
    const ALL: [AbortReason; 5] = [
        AbortReason::PakeConfirmFailed,
        AbortReason::AuthFailed,
        AbortReason::MeasurementMismatch,
        AbortReason::Malformed,
        AbortReason::Timeout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AbortReason::PakeConfirmFailed => "pake_confirm_failed",
            AbortReason::AuthFailed => "auth_failed",
            AbortReason::MeasurementMismatch => "measurement_mismatch",
            AbortReason::Malformed => "malformed",
            AbortReason::Timeout => "timeout",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == name)
    }
}

/// The five protocol messages plus an abort notice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireMessage {
    /// Broker commit; the only message carrying the user ID.
    M1 {
        user_id: UserId,
        commit: GroupElement,
        params_id: ParamsId,
    },
    /// Bank commit.
    M2 { commit: GroupElement },
    /// Broker key confirmation.
    M3 { confirm: [u8; 32] },
    /// Bank key confirmation.
    M4 { confirm: [u8; 32] },
    /// Reference measurement and its tag.
    M5 { attestation: AttestationMessage },
    Abort { reason: AbortReason },
}

impl WireMessage {
    pub fn m1(user_id: UserId, commit: GroupElement) -> Self {
        let params_id = commit.params_id();
        WireMessage::M1 {
            user_id,
            commit,
            params_id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::M1 { .. } => "m1",
            WireMessage::M2 { .. } => "m2",
            WireMessage::M3 { .. } => "m3",
            WireMessage::M4 { .. } => "m4",
            WireMessage::M5 { .. } => "m5",
            WireMessage::Abort { .. } => "abort",
        }
    }
}

fn string(s: impl Into<String>) -> Value {
    Value::String(s.into())
}

fn to_value(msg: &WireMessage) -> Value {
    let mut map = Map::new();
    map.insert("type".into(), string(msg.kind()));
    match msg {
        WireMessage::M1 {
            user_id,
            commit,
            params_id,
        } => {
            map.insert("user_id".into(), string(user_id.as_str()));
            map.insert("commit".into(), string(commit.to_base64()));
            map.insert("params_id".into(), string(params_id.as_str()));
        }
        WireMessage::M2 { commit } => {
            map.insert("commit".into(), string(commit.to_base64()));
        }
        WireMessage::M3 { confirm } | WireMessage::M4 { confirm } => {
            map.insert("confirm".into(), string(hex::encode(confirm)));
        }
        WireMessage::M5 { attestation } => {
            map.insert("digest".into(), string(attestation.measurement().to_hex()));
            map.insert("tag".into(), string(hex::encode(attestation.tag())));
        }
        WireMessage::Abort { reason } => {
            map.insert("reason".into(), string(reason.as_str()));
        }
    }
    Value::Object(map)
}

/// Canonical JSON body of `msg`.
pub fn encode(msg: &WireMessage) -> Vec<u8> {
    // serde_json's map is ordered by key, and the compact writer adds no whitespace.
    serde_json::to_vec(&to_value(msg)).expect("a JSON value always serializes")
}

struct Fields(Map<String, Value>);

impl Fields {
    fn expect_keys(&self, keys: &[&str]) -> Result<(), WireError> {
        if self.0.len() != keys.len() || keys.iter().any(|k| !self.0.contains_key(*k)) {
            let got: Vec<&str> = self.0.keys().map(String::as_str).collect();
            return Err(malformed(format!("expected fields {keys:?}, got {got:?}")));
        }
        Ok(())
    }

    fn str(&self, key: &str) -> Result<&str, WireError> {
        self.0
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| malformed(format!("field {key:?} must be a string")))
    }

    fn hex<const N: usize>(&self, key: &str) -> Result<[u8; N], WireError> {
        let text = self.str(key)?;
        if text.len() != 2 * N || text.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(malformed(format!("field {key:?} must be {} lowercase hex chars", 2 * N)));
        }
        let mut out = [0u8; N];
        hex::decode_to_slice(text, &mut out).map_err(|e| malformed(format!("{key}: {e}")))?;
        Ok(out)
    }

    fn element(&self, key: &str, params: Option<ParamsId>) -> Result<GroupElement, WireError> {
        let bytes = BASE64
            .decode(self.str(key)?)
            .map_err(|e| malformed(format!("{key}: {e}")))?;
        let params = match params {
            Some(id) => id,
            None => ParamsId::for_element_len(bytes.len())
                .ok_or_else(|| malformed(format!("{key}: no group with {}-byte elements", bytes.len())))?,
        };
        GroupElement::from_fixed_bytes(&bytes, params).map_err(|e| malformed(format!("{key}: {e}")))
    }
}

fn from_value(value: Value) -> Result<WireMessage, WireError> {
    let Value::Object(map) = value else {
        return Err(malformed("body is not a JSON object"));
    };
    let fields = Fields(map);
    let kind = fields.str("type")?.to_owned();
    let msg = match kind.as_str() {
        "m1" => {
            fields.expect_keys(&["commit", "params_id", "type", "user_id"])?;
            let params_id = ParamsId::from_name(fields.str("params_id")?)
                .ok_or_else(|| malformed("unknown params_id"))?;
            let user_id =
                UserId::new(fields.str("user_id")?).map_err(|e| malformed(e.to_string()))?;
            let commit = fields.element("commit", Some(params_id))?;
            WireMessage::M1 {
                user_id,
                commit,
                params_id,
            }
        }
        "m2" => {
            fields.expect_keys(&["commit", "type"])?;
            WireMessage::M2 {
                commit: fields.element("commit", None)?,
            }
        }
        "m3" | "m4" => {
            fields.expect_keys(&["confirm", "type"])?;
            let confirm = fields.hex::<32>("confirm")?;
            if kind == "m3" {
                WireMessage::M3 { confirm }
            } else {
                WireMessage::M4 { confirm }
            }
        }
        "m5" => {
            fields.expect_keys(&["digest", "tag", "type"])?;
            let digest = fields.hex::<DIGEST_LEN>("digest")?;
            let tag = fields.hex::<TAG_LEN>("tag")?;
            WireMessage::M5 {
                attestation: AttestationMessage::from_parts(Measurement::from_bytes(digest), tag),
            }
        }
        "abort" => {
            fields.expect_keys(&["reason", "type"])?;
            let reason = AbortReason::from_name(fields.str("reason")?)
                .ok_or_else(|| malformed("unknown abort reason"))?;
            WireMessage::Abort { reason }
        }
        other => return Err(malformed(format!("unknown message type {other:?}"))),
    };
    Ok(msg)
}

/// Strict inverse of [`encode`].
pub fn decode(bytes: &[u8]) -> Result<WireMessage, WireError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| malformed(e.to_string()))?;
    let msg = from_value(value)?;
    if encode(&msg) != bytes {
        return Err(malformed("not in canonical form"));
    }
    Ok(msg)
}

#[cfg(test)]
mod tests;
