//! SPEKE over a safe-prime group.
//!
//! Both parties derive the generator from the PIN, `g = H(pin)^2 mod p`, exchange
//! ephemeral commits `g^a` and `g^b`, and confirm the resulting key with one MAC
//! each before anything else is trusted. The Broker is the initiator and confirms
//! first; the bank answers with its own confirmation.
//!
//! Message order for a full run:
//!
//! ```text
//! initiator                          responder
//!   start()            -- A -->        start(); receive_commit(A)
//!   receive_commit(B)  <-- B --
//!   make_confirmation  -- cI -->       verify_confirmation(cI)
//!   verify_confirmation(cR) <-- cR --  make_confirmation
//! ```

mod group;
mod pin;

use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use rand::{CryptoRng, RngCore};
use serde::Serialize;
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::crypto::{hmac_sha256, hmac_sha256_verify, sha256};

pub use group::{GroupElement, GroupParams, ParamsId};
pub use pin::{Pin, PIN_LENGTH};

const MAX_GENERATOR_ATTEMPTS: u8 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PakeError {
    #[error("invalid group parameters: {0}")]
    InvalidParams(&'static str),
    #[error("PIN must be exactly five decimal digits")]
    InvalidPin,
    #[error("degenerate group element")]
    DegenerateElement,
    #[error("group element out of range")]
    ElementOutOfRange,
    #[error("group element belongs to a different parameter set")]
    ParamsMismatch,
    #[error("ephemeral exponent outside [2, q - 1]")]
    InvalidExponent,
    #[error("operation not allowed in state {0:?}")]
    InvalidState(SessionState),
    #[error("no usable generator after {MAX_GENERATOR_ATTEMPTS} attempts")]
    GeneratorExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PakeRole {
    /// The on-device Broker.
    Initiator,
    /// The bank.
    Responder,
}

impl PakeRole {
    fn label(self) -> &'static [u8] {
        match self {
            PakeRole::Initiator => b"I",
            PakeRole::Responder => b"R",
        }
    }

    fn peer(self) -> Self {
        match self {
            PakeRole::Initiator => PakeRole::Responder,
            PakeRole::Responder => PakeRole::Initiator,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Fresh,
    SentCommit,
    Confirmed,
    Failed,
}

/// Keys derived from the shared secret and transcript.
///
/// Serializing only emits the transcript hash, which is computed from public data.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct SessionKeys {
    confirm_key: [u8; 32],
    mac_key: [u8; 16],
    transcript_hash: [u8; 32],
}

impl SessionKeys {
    pub fn confirm_key(&self) -> &[u8; 32] {
        &self.confirm_key
    }

    /// 128-bit HMAC-SHA256 key for the measurement message.
    pub fn mac_key(&self) -> &[u8; 16] {
        &self.mac_key
    }

    pub fn transcript_hash(&self) -> &[u8; 32] {
        &self.transcript_hash
    }
}

impl fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKeys")
            .field("transcript_hash", &hex::encode(self.transcript_hash))
            .finish_non_exhaustive()
    }
}

impl Serialize for SessionKeys {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("SessionKeys", 1)?;
        s.serialize_field("transcript_hash", &hex::encode(self.transcript_hash))?;
        s.end()
    }
}

/// SHA-256 of the PIN, read as a big-endian integer.
pub fn pin_hash(input: &[u8]) -> BigUint {
    BigUint::from_bytes_be(&sha256(&[input]))
}

/// Derives the PIN-dependent generator `(H(pin) mod p)^2 mod p`.
pub fn derive_generator(pin: &Pin, params: ParamsId) -> Result<GroupElement, PakeError> {
    derive_generator_with(pin, params, pin_hash)
}

/// [`derive_generator`] with the hash supplied by the caller.
///
/// Attempt 0 hashes the bare PIN digits; attempt `i > 0` appends the byte `i`.
pub fn derive_generator_with<H>(
    pin: &Pin,
    params: ParamsId,
    hash: H,
) -> Result<GroupElement, PakeError>
where
    H: Fn(&[u8]) -> BigUint,
{
    let group = params.params();
    let p = group.prime_modulus();
    let mut input = pin.as_bytes().to_vec();
    for attempt in 0..MAX_GENERATOR_ATTEMPTS {
        if attempt > 0 {
            input.truncate(PIN_LENGTH);
            input.push(attempt);
        }
        let base = hash(&input) % p;
        let candidate = group.pow(&base, &BigUint::from(2u32));
        if let Ok(element) = GroupElement::new(candidate, params) {
            input.zeroize();
            return Ok(element);
        }
    }
    input.zeroize();
    Err(PakeError::GeneratorExhausted)
}

fn put_field(buf: &mut Vec<u8>, field: &[u8]) {
    buf.extend_from_slice(&(field.len() as u32).to_be_bytes());
    buf.extend_from_slice(field);
}

/// Hash over the public session data. Commits are always ordered initiator first,
/// so both roles compute the same value.
pub fn transcript_hash(
    params: ParamsId,
    initiator_commit: &GroupElement,
    responder_commit: &GroupElement,
    initiator_user_id: &str,
) -> [u8; 32] {
    let mut buf = Vec::new();
    put_field(&mut buf, b"speke-transcript-v1");
    put_field(&mut buf, params.as_str().as_bytes());
    put_field(&mut buf, PakeRole::Initiator.label());
    put_field(&mut buf, &initiator_commit.to_fixed_bytes());
    put_field(&mut buf, PakeRole::Responder.label());
    put_field(&mut buf, &responder_commit.to_fixed_bytes());
    put_field(&mut buf, initiator_user_id.as_bytes());
    sha256(&[&buf])
}

/// Key schedule: `confirm = H("confirm" || S || th)`, `mac = H("mac" || S || th)[..16]`.
///
/// `shared_secret` is the fixed-width big-endian encoding of S.
pub fn derive_session_keys(shared_secret: &[u8], transcript_hash: &[u8; 32]) -> SessionKeys {
    let confirm_key = sha256(&[b"confirm", shared_secret, transcript_hash]);
    let mut mac_full = sha256(&[b"mac", shared_secret, transcript_hash]);
    let mut mac_key = [0u8; 16];
    mac_key.copy_from_slice(&mac_full[..16]);
    mac_full.zeroize();
    SessionKeys {
        confirm_key,
        mac_key,
        transcript_hash: *transcript_hash,
    }
}

/// One side of a SPEKE run. Single use; not meant to be shared between threads.
pub struct PakeSession {
    role: PakeRole,
    pin: Pin,
    user_id: String,
    params: ParamsId,
    exponent: Option<BigUint>,
    own_commit: Option<GroupElement>,
    state: SessionState,
    // Derived by `receive_commit`; published through `keys()` only once confirmed.
    keys: Option<SessionKeys>,
}

impl PakeSession {
    /// `user_id` is the initiator's user ID as sent in the first message; both
    /// sides bind it into the transcript.
    pub fn new(role: PakeRole, pin: Pin, user_id: &str, params: ParamsId) -> Self {
        Self {
            role,
            pin,
            user_id: user_id.to_owned(),
            params,
            exponent: None,
            own_commit: None,
            state: SessionState::Fresh,
            keys: None,
        }
    }

    pub fn role(&self) -> PakeRole {
        self.role
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn params_id(&self) -> ParamsId {
        self.params
    }

    /// Confirmed keys; `None` in every other state.
    pub fn keys(&self) -> Option<&SessionKeys> {
        match self.state {
            SessionState::Confirmed => self.keys.as_ref(),
            _ => None,
        }
    }

    /// Draws the ephemeral exponent uniformly from `[2, q - 1]` and returns the commit.
    pub fn start<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> Result<GroupElement, PakeError> {
        self.ensure_state(SessionState::Fresh)?;
        let q = self.params.params().subgroup_order();
        let exponent = rng.gen_biguint_range(&BigUint::from(2u32), q);
        self.start_with_exponent(exponent)
    }

    /// Deterministic variant of [`Self::start`] for known-answer tests.
    pub fn start_with_exponent(&mut self, exponent: BigUint) -> Result<GroupElement, PakeError> {
        self.ensure_state(SessionState::Fresh)?;
        let group = self.params.params();
        if exponent < BigUint::from(2u32) || exponent >= *group.subgroup_order() {
            return Err(PakeError::InvalidExponent);
        }
        let generator = derive_generator(&self.pin, self.params)?;
        let commit = GroupElement::new(group.pow(generator.value(), &exponent), self.params)?;
        self.exponent = Some(exponent);
        self.own_commit = Some(commit.clone());
        self.state = SessionState::SentCommit;
        Ok(commit)
    }

    /// Checks the peer commit, computes `S = peer^a` and derives the session keys.
    ///
    /// A degenerate commit fails the session before any exponentiation.
    pub fn receive_commit(&mut self, peer_commit: &BigUint) -> Result<SessionKeys, PakeError> {
        self.ensure_state(SessionState::SentCommit)?;
        if self.keys.is_some() {
            return Err(PakeError::InvalidState(self.state));
        }
        let peer = match GroupElement::new(peer_commit.clone(), self.params) {
            Ok(peer) => peer,
            Err(err) => {
                self.fail();
                return Err(err);
            }
        };
        let group = self.params.params();
        let exponent = self.exponent.as_ref().expect("set by start");
        let own = self.own_commit.as_ref().expect("set by start");
        let mut secret = group.to_fixed_bytes(&group.pow(peer.value(), exponent));

        let (initiator, responder) = match self.role {
            PakeRole::Initiator => (own, &peer),
            PakeRole::Responder => (&peer, own),
        };
        let th = transcript_hash(self.params, initiator, responder, &self.user_id);
        let keys = derive_session_keys(&secret, &th);
        secret.zeroize();
        self.keys = Some(keys.clone());
        Ok(keys)
    }

    /// `HMAC(confirm_key, own-label || transcript_hash)`.
    pub fn make_confirmation(&self) -> Result<[u8; 32], PakeError> {
        let keys = self.keys.as_ref().ok_or(PakeError::InvalidState(self.state))?;
        Ok(hmac_sha256(
            keys.confirm_key(),
            &[self.role.label(), keys.transcript_hash()],
        ))
    }

    /// Constant-time check of the peer's confirmation. Failure erases the keys.
    pub fn verify_confirmation(&mut self, peer_tag: &[u8]) -> bool {
        let ok = match (&self.keys, self.state) {
            (Some(keys), SessionState::SentCommit) => hmac_sha256_verify(
                keys.confirm_key(),
                &[self.role.peer().label(), keys.transcript_hash()],
                peer_tag,
            ),
            _ => false,
        };
        if ok {
            self.state = SessionState::Confirmed;
            self.exponent = None;
        } else {
            self.fail();
        }
        ok
    }

    fn fail(&mut self) {
        self.state = SessionState::Failed;
        self.keys = None;
        self.exponent = None;
    }

    fn ensure_state(&self, expected: SessionState) -> Result<(), PakeError> {
        if self.state == expected {
            Ok(())
        } else {
            Err(PakeError::InvalidState(self.state))
        }
    }
}

impl fmt::Debug for PakeSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PakeSession")
            .field("role", &self.role)
            .field("params", &self.params)
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

impl Serialize for PakeSession {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("PakeSession", 5)?;
        s.serialize_field("role", &self.role)?;
        s.serialize_field("params_id", &self.params)?;
        s.serialize_field("user_id", &self.user_id)?;
        s.serialize_field("state", &self.state)?;
        s.serialize_field("commit", &self.own_commit)?;
        s.end()
    }
}
