//! Package measurement and the authenticated measurement message.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hmac_sha256, hmac_sha256_verify, sha256};
use crate::pake::SessionKeys;

pub const DIGEST_LEN: usize = 32;
pub const TAG_LEN: usize = 32;
/// Digest followed by tag.
pub const ATTESTATION_LEN: usize = DIGEST_LEN + TAG_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttestError {
    #[error("measurement tag does not verify")]
    AuthenticationFailure,
    #[error("attestation payload must be {ATTESTATION_LEN} bytes, got {0}")]
    BadLength(usize),
}

/// SHA-256 digest of an installation package.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Measurement([u8; DIGEST_LEN]);

impl Measurement {
    pub fn from_bytes(digest: [u8; DIGEST_LEN]) -> Self {
        Self(digest)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(text: &str) -> Option<Self> {
        let mut digest = [0u8; DIGEST_LEN];
        if text.len() != 2 * DIGEST_LEN || text.bytes().any(|b| b.is_ascii_uppercase()) {
            return None;
        }
        hex::decode_to_slice(text, &mut digest).ok()?;
        Some(Self(digest))
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", self.to_hex())
    }
}

impl Serialize for Measurement {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Measurement {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Measurement::from_hex(&text)
            .ok_or_else(|| serde::de::Error::custom("expected 64 lowercase hex characters"))
    }
}

/// Measures the exact package bytes. Configuration files ride inside the package
/// blob, so one digest covers them.
pub fn measure_package(package_bytes: &[u8]) -> Measurement {
    Measurement(sha256(&[package_bytes]))
}

/// The reference measurement together with its tag under the session MAC key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationMessage {
    measurement: Measurement,
    tag: [u8; TAG_LEN],
}

impl AttestationMessage {
    pub fn measurement(&self) -> &Measurement {
        &self.measurement
    }

    pub fn tag(&self) -> &[u8; TAG_LEN] {
        &self.tag
    }

    /// `digest || tag`, always 64 bytes.
    pub fn to_payload(&self) -> [u8; ATTESTATION_LEN] {
        let mut out = [0u8; ATTESTATION_LEN];
        out[..DIGEST_LEN].copy_from_slice(self.measurement.as_bytes());
        out[DIGEST_LEN..].copy_from_slice(&self.tag);
        out
    }

    pub fn from_payload(payload: &[u8]) -> Result<Self, AttestError> {
        if payload.len() != ATTESTATION_LEN {
            return Err(AttestError::BadLength(payload.len()));
        }
        let mut digest = [0u8; DIGEST_LEN];
        let mut tag = [0u8; TAG_LEN];
        digest.copy_from_slice(&payload[..DIGEST_LEN]);
        tag.copy_from_slice(&payload[DIGEST_LEN..]);
        Ok(Self::from_parts(Measurement(digest), tag))
    }

    pub fn from_parts(measurement: Measurement, tag: [u8; TAG_LEN]) -> Self {
        Self { measurement, tag }
    }
}

/// `tag = HMAC-SHA256(mac_key, digest)`. The MAC input is the bare digest; the
/// transcript is already bound into `mac_key`.
pub fn seal_measurement(measurement: &Measurement, keys: &SessionKeys) -> AttestationMessage {
    AttestationMessage {
        measurement: *measurement,
        tag: hmac_sha256(keys.mac_key(), &[measurement.as_bytes()]),
    }
}

pub fn open_measurement(
    msg: &AttestationMessage,
    keys: &SessionKeys,
) -> Result<Measurement, AttestError> {
    if hmac_sha256_verify(keys.mac_key(), &[msg.measurement.as_bytes()], &msg.tag) {
        Ok(msg.measurement)
    } else {
        Err(AttestError::AuthenticationFailure)
    }
}
