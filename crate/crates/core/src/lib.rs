//! Attested PIN provisioning for personalized security indicators.
//!
//! A trusted Broker on the phone and the bank run a PIN-keyed SPEKE exchange,
//! the bank ships a MAC'd reference measurement of its app, and the Broker
//! releases the PIN into that app's private storage only if the installed
//! package matches. The [`device`] module simulates the phone, including the
//! phishing apps that try to get in the way.

mod crypto;
pub mod attest;
pub mod bank;
pub mod broker;
pub mod device;
pub mod pake;
pub mod scenario;
pub mod wire;

pub use pake::{Pin, ParamsId};
