//! The bank: provisioning records and the responder side of the setup protocol.

mod server;
mod store;

use std::sync::{Arc, Mutex, PoisonError};
use std::thread::JoinHandle;
use std::time::Duration;

use rand::{CryptoRng, RngCore};
use serde::Serialize;
use thiserror::Error;

use crate::attest::seal_measurement;
use crate::pake::{ParamsId, PakeRole, PakeSession, Pin};
use crate::wire::{inproc_pair, AbortReason, Dialer, Transport, WireError, WireMessage};

pub use server::{serve, BankServer};
pub use store::{ProvisionRecord, ProvisionStore};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BankError {
    #[error("user {0} is already provisioned")]
    DuplicateUser(String),
    #[error("application handle must be nonempty and contain no ':'")]
    InvalidHandle,
    #[error("store line {line}: {reason}")]
    CorruptStore { line: usize, reason: String },
    #[error("store I/O: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionOutcome {
    Completed,
    ConfirmFailed,
    UnknownUser,
    Malformed,
}

/// Cryptographically secure RNG the bank can share between session threads.
pub trait SecureRng: RngCore + CryptoRng + Send {}

impl<T: RngCore + CryptoRng + Send> SecureRng for T {}

/// Shared bank state. Store writes go through one lock; PAKE state is per session.
pub struct BankService {
    store: Mutex<ProvisionStore>,
    rng: Mutex<Box<dyn SecureRng>>,
    accepted_params: Vec<ParamsId>,
    outcomes: Mutex<Vec<SessionOutcome>>,
}

impl BankService {
    pub fn new(store: ProvisionStore, rng: impl SecureRng + 'static) -> Self {
        Self {
            store: Mutex::new(store),
            rng: Mutex::new(Box::new(rng)),
            accepted_params: vec![ParamsId::Modp2048],
            outcomes: Mutex::new(Vec::new()),
        }
    }

    /// Replaces the parameter sets a Broker may select in its first message.
    pub fn with_accepted_params(mut self, params: &[ParamsId]) -> Self {
        self.accepted_params = params.to_vec();
        self
    }

    pub fn store(&self) -> std::sync::MutexGuard<'_, ProvisionStore> {
        self.store.lock().unwrap_or_else(PoisonError::into_inner)
    }

    /// Outcomes of every finished session, in completion order.
    pub fn outcomes(&self) -> Vec<SessionOutcome> {
        self.outcomes
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .clone()
    }

    fn rng(&self) -> std::sync::MutexGuard<'_, Box<dyn SecureRng>> {
        self.rng.lock().unwrap_or_else(PoisonError::into_inner)
    }

    /// Provisions through the service's own RNG.
    pub fn provision_user(
        &self,
        user_id: crate::wire::UserId,
        app_handle: &str,
        reference: crate::attest::Measurement,
    ) -> Result<(Pin, crate::broker::ServiceTag), BankError> {
        let mut rng = self.rng();
        self.store()
            .provision_user(user_id, app_handle, reference, &mut **rng)
    }

    /// Answers one Broker session.
    ///
    /// Unknown and already-consumed users get a decoy run keyed by a random PIN,
    /// so on the wire they look exactly like a wrong PIN.
    pub fn handle_session(&self, transport: &mut dyn Transport) -> SessionOutcome {
        let outcome = self.run_session(transport);
        log::info!("bank session finished: {outcome:?}");
        self.outcomes
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .push(outcome);
        outcome
    }

    fn run_session(&self, transport: &mut dyn Transport) -> SessionOutcome {
        let (user_id, commit, params_id) = match transport.recv() {
            Ok(WireMessage::M1 {
                user_id,
                commit,
                params_id,
            }) => (user_id, commit, params_id),
            Ok(_) | Err(_) => return abort(transport, AbortReason::Malformed),
        };
        if !self.accepted_params.contains(&params_id) {
            return abort(transport, AbortReason::Malformed);
        }

        let record = self
            .store()
            .get(&user_id)
            .map(|r| (r.pin.clone(), r.reference_measurement, r.consumed));
        let (pin, reference, decoy_outcome) = match record {
            Some((pin, reference, false)) => (pin, Some(reference), SessionOutcome::ConfirmFailed),
            Some((_, _, true)) => (Pin::random(&mut **self.rng()), None, SessionOutcome::ConfirmFailed),
            None => (Pin::random(&mut **self.rng()), None, SessionOutcome::UnknownUser),
        };

        let mut session = PakeSession::new(PakeRole::Responder, pin, user_id.as_str(), params_id);
        let own_commit = match session.start(&mut *self.rng()) {
            Ok(c) => c,
            Err(_) => return abort(transport, AbortReason::Malformed),
        };
        if session.receive_commit(commit.value()).is_err() {
            return abort(transport, AbortReason::Malformed);
        }
        if transport.send(&WireMessage::M2 { commit: own_commit }).is_err() {
            return SessionOutcome::Malformed;
        }

        let confirm = match transport.recv() {
            Ok(WireMessage::M3 { confirm }) => confirm,
            Err(WireError::Timeout) => return abort(transport, AbortReason::Timeout),
            Ok(_) | Err(_) => return abort(transport, AbortReason::Malformed),
        };
        let confirmed = session.verify_confirmation(&confirm);
        let Some(reference) = reference.filter(|_| confirmed) else {
            let _ = transport.send(&WireMessage::Abort {
                reason: AbortReason::PakeConfirmFailed,
            });
            return decoy_outcome;
        };

        // Consumed before anything depends on the key, so a concurrent session for
        // the same user cannot also complete.
        match self.store().consume(&user_id) {
            Ok(true) => {}
            Ok(false) => {
                let _ = transport.send(&WireMessage::Abort {
                    reason: AbortReason::PakeConfirmFailed,
                });
                return SessionOutcome::ConfirmFailed;
            }
            Err(err) => {
                log::error!("cannot persist consumed flag for {user_id}: {err}");
                let _ = transport.send(&WireMessage::Abort {
                    reason: AbortReason::PakeConfirmFailed,
                });
                return SessionOutcome::ConfirmFailed;
            }
        }

        let keys = session.keys().expect("confirmed session has keys");
        let my_confirm = session.make_confirmation().expect("confirmed session has keys");
        let attestation = seal_measurement(&reference, keys);
        if transport.send(&WireMessage::M4 { confirm: my_confirm }).is_err()
            || transport.send(&WireMessage::M5 { attestation }).is_err()
        {
            log::warn!("{user_id}: PIN consumed but the Broker went away before M5");
        }
        SessionOutcome::Completed
    }
}

fn abort(transport: &mut dyn Transport, reason: AbortReason) -> SessionOutcome {
    let _ = transport.send(&WireMessage::Abort { reason });
    SessionOutcome::Malformed
}

/// Dials an in-process bank: each dial runs `handle_session` on its own thread.
pub struct InProcDialer {
    bank: Arc<BankService>,
    url: String,
    timeout: Duration,
    sessions: Mutex<Vec<JoinHandle<SessionOutcome>>>,
}

impl InProcDialer {
    pub fn new(bank: Arc<BankService>, url: &str) -> Self {
        Self {
            bank,
            url: url.to_owned(),
            timeout: crate::wire::DEFAULT_TIMEOUT,
            sessions: Mutex::new(Vec::new()),
        }
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn bank(&self) -> &Arc<BankService> {
        &self.bank
    }

    /// Waits for every session dialed so far and returns their outcomes in order.
    pub fn take_outcomes(&self) -> Vec<SessionOutcome> {
        let handles = std::mem::take(&mut *self.sessions.lock().unwrap_or_else(PoisonError::into_inner));
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or(SessionOutcome::Malformed))
            .collect()
    }
}

impl Dialer for InProcDialer {
    fn dial(&self, url: &str) -> Result<Box<dyn Transport>, WireError> {
        if url != self.url {
            return Err(WireError::Io(format!("no route to {url}")));
        }
        let (broker, mut bank_end) = inproc_pair(self.timeout);
        let bank = Arc::clone(&self.bank);
        let handle = std::thread::spawn(move || bank.handle_session(&mut bank_end));
        self.sessions
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .push(handle);
        Ok(Box::new(broker))
    }
}

#[cfg(test)]
mod tests;
