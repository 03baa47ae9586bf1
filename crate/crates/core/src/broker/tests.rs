use std::cell::Cell;
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::bank::{BankService, InProcDialer, ProvisionStore};
use crate::device::{legit_package, Behavior, BANK_HANDLE, BANK_URL};
use crate::wire::{inproc_pair, Endpoint, ChannelIo};

#[test]
fn parses_service_tags() {
    let tag = parse_service_tag("bank:johndoe").unwrap();
    assert_eq!(tag.handle(), "bank");
    assert_eq!(tag.user_id().as_str(), "johndoe");
    assert_eq!(tag.to_string(), "bank:johndoe");
    for bad in ["bank:", ":johndoe", "bank", "a:b:c", ""] {
        assert!(matches!(parse_service_tag(bad), Err(BrokerError::MalformedTag(_))), "{bad}");
    }
}

proptest! {
    #[test]
    fn service_tag_parse_format_identity(handle in "[a-z0-9.-]{1,16}", user in "[a-zA-Z0-9_@.]{1,64}") {
        let text = format!("{handle}:{user}");
        let tag = parse_service_tag(&text).unwrap();
        prop_assert_eq!(tag.to_string(), text);
    }
}

struct Fixture {
    device: DeviceState,
    dialer: InProcDialer,
    pin: Pin,
    tag: ServiceTag,
}

fn fixture(seed: u64, installed: Option<Vec<u8>>) -> Fixture {
    let legit = legit_package();
    let bank = BankService::new(ProvisionStore::in_memory(), ChaCha20Rng::seed_from_u64(seed));
    let (pin, tag) = bank
        .provision_user(UserId::new("johndoe").unwrap(), BANK_HANDLE, legit.measurement())
        .unwrap();
    let mut device = DeviceState::new(seed);
    let mut package = legit;
    if let Some(bytes) = installed {
        package.package_bytes = bytes;
    }
    device.install(package, Behavior::Legit).unwrap();
    let dialer = InProcDialer::new(Arc::new(bank), BANK_URL);
    Fixture {
        device,
        dialer,
        pin,
        tag,
    }
}

fn other_pin(pin: &Pin) -> Pin {
    Pin::from_index((pin.index() + 1) % Pin::SPACE)
}

#[test]
fn refuses_to_run_without_sas() {
    let mut f = fixture(1, None);
    let err = run_setup(&mut f.device, &f.tag, f.pin.clone(), &f.dialer).unwrap_err();
    assert_eq!(err, BrokerError::NotInvokedViaSas);
}

#[test]
fn honest_run_succeeds_and_app_shows_pin() {
    let mut f = fixture(2, None);
    f.device.sas_trigger();
    let result = run_setup(&mut f.device, &f.tag, f.pin.clone(), &f.dialer).unwrap();
    assert_eq!(result.outcome, SetupOutcome::Success);
    assert_eq!(result.transcript.kinds(), ["m1", "m2", "m3", "m4", "m5"]);
    assert!(!f.device.is_locked());
    assert_eq!(f.device.foreground(), Some(&crate::device::Principal::App(BANK_HANDLE.into())));
    assert_eq!(launch_and_display(&mut f.device, BANK_HANDLE).as_deref(), Some(f.pin.expose()));
    assert_eq!(f.dialer.take_outcomes(), [crate::bank::SessionOutcome::Completed]);
}

#[test]
fn other_apps_cannot_read_the_released_pin() {
    let mut f = fixture(3, None);
    f.device
        .install(crate::device::attacker_package(Behavior::BackgroundAttacker, crate::device::Phase::Setup), Behavior::BackgroundAttacker)
        .unwrap();
    f.device.sas_trigger();
    run_setup(&mut f.device, &f.tag, f.pin.clone(), &f.dialer).unwrap();
    assert!(matches!(
        f.device.app_get("flashlight", BANK_HANDLE, SETUP_PIN_KEY),
        Err(crate::device::DeviceError::SandboxDenied { .. })
    ));
}

#[test]
fn wrong_pin_aborts_before_m5() {
    let mut f = fixture(4, None);
    f.device.sas_trigger();
    let result = run_setup(&mut f.device, &f.tag, other_pin(&f.pin), &f.dialer).unwrap();
    assert_eq!(result.outcome, SetupOutcome::AbortPakeFailed);
    assert_eq!(result.transcript.kinds(), ["m1", "m2", "m3", "abort"]);
    assert!(f.device.storage_snapshot(BANK_HANDLE).is_empty());
    assert_eq!(launch_and_display(&mut f.device, BANK_HANDLE), None);
    assert_eq!(f.device.broker().notice(), Some(SetupOutcome::AbortPakeFailed));
}

#[test]
fn unknown_handle_aborts_without_dialing() {
    let mut f = fixture(5, None);
    f.device.sas_trigger();
    let tag = parse_service_tag("elsewhere:johndoe").unwrap();
    let result = run_setup(&mut f.device, &tag, f.pin.clone(), &f.dialer).unwrap();
    assert_eq!(result.outcome, SetupOutcome::AbortNoSuchApp);
    assert!(result.transcript.is_empty());
    assert!(f.dialer.take_outcomes().is_empty());
}

struct CountingDialer(Cell<usize>);

impl Dialer for CountingDialer {
    fn dial(&self, _url: &str) -> Result<Box<dyn Transport>, WireError> {
        self.0.set(self.0.get() + 1);
        Err(WireError::TransportClosed)
    }
}

#[test]
fn input_syntax_is_checked_before_dialing() {
    let mut f = fixture(6, None);
    f.device.sas_trigger();
    let dialer = CountingDialer(Cell::new(0));
    assert_eq!(
        submit(&mut f.device, "bank:johndoe", "8054", &dialer).unwrap_err(),
        BrokerError::InvalidPin
    );
    assert!(submit(&mut f.device, "bank", "80547", &dialer).is_err());
    assert_eq!(dialer.0.get(), 0);
    let result = submit(&mut f.device, "bank:johndoe", "80547", &dialer).unwrap();
    assert_eq!(result.outcome, SetupOutcome::AbortTransport);
    assert_eq!(dialer.0.get(), 1);
}

/// A scripted bank on the far side of an in-process channel.
struct ScriptedDialer<F: Fn(&mut Endpoint<ChannelIo>) + Send + Sync + Clone + 'static> {
    script: F,
    timeout: Duration,
}

impl<F: Fn(&mut Endpoint<ChannelIo>) + Send + Sync + Clone + 'static> Dialer for ScriptedDialer<F> {
    fn dial(&self, _url: &str) -> Result<Box<dyn Transport>, WireError> {
        let (broker, mut bank) = inproc_pair(self.timeout);
        let script = self.script.clone();
        std::thread::spawn(move || script(&mut bank));
        Ok(Box::new(broker))
    }
}

#[test]
fn out_of_order_bank_message_aborts_as_malformed() {
    let mut f = fixture(7, None);
    f.device.sas_trigger();
    let dialer = ScriptedDialer {
        script: |bank: &mut Endpoint<ChannelIo>| {
            let _ = bank.recv();
            let _ = bank.send(&WireMessage::M4 { confirm: [0; 32] });
            let _ = bank.recv();
        },
        timeout: Duration::from_secs(5),
    };
    let result = run_setup(&mut f.device, &f.tag, f.pin.clone(), &dialer).unwrap();
    assert_eq!(result.outcome, SetupOutcome::AbortTransport);
    assert_eq!(result.transcript.kinds(), ["m1", "m4", "abort"]);
    assert!(result.transcript.conforms_for(crate::wire::Side::Broker));
}

#[test]
fn silent_bank_times_out() {
    let mut f = fixture(8, None);
    f.device.sas_trigger();
    let dialer = ScriptedDialer {
        script: |bank: &mut Endpoint<ChannelIo>| {
            let _ = bank.recv();
            std::thread::sleep(Duration::from_millis(300));
        },
        timeout: Duration::from_millis(50),
    };
    let result = run_setup(&mut f.device, &f.tag, f.pin.clone(), &dialer).unwrap();
    assert_eq!(result.outcome, SetupOutcome::AbortTransport);
    assert!(!f.device.is_locked());
}

#[test]
fn storage_write_happens_iff_digests_match() {
    let legit = legit_package().package_bytes;
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let mut cases = vec![None];
    for _ in 0..100 {
        let mut bytes = legit.clone();
        let i = rng.gen_range(0..bytes.len());
        bytes[i] ^= rng.gen_range(1..=255u8);
        cases.push(Some(bytes));
    }
    for (n, installed) in cases.into_iter().enumerate() {
        let mutated = installed.is_some();
        let mut f = fixture(n as u64, installed);
        f.device.sas_trigger();
        let result = run_setup(&mut f.device, &f.tag, f.pin.clone(), &f.dialer).unwrap();
        let written = f.device.storage_snapshot(BANK_HANDLE).contains_key(SETUP_PIN_KEY);
        assert_eq!(written, !mutated, "case {n}");
        let expected = if mutated {
            SetupOutcome::AbortMeasurementMismatch
        } else {
            SetupOutcome::Success
        };
        assert_eq!(result.outcome, expected, "case {n}");
    }
}

#[test]
fn broker_keeps_no_pin_after_it_returns() {
    for wrong in [false, true] {
        let mut f = fixture(10, None);
        let pin = f.pin.expose().to_owned();
        f.device.sas_trigger();
        let typed = if wrong { other_pin(&f.pin) } else { f.pin.clone() };
        let typed_text = typed.expose().to_owned();
        let result = run_setup(&mut f.device, &f.tag, typed, &f.dialer).unwrap();
        let retained = format!(
            "{}{}{:?}",
            serde_json::to_string(f.device.broker()).unwrap(),
            result.transcript.to_json_lines(),
            result
        );
        assert!(!retained.contains(&pin));
        assert!(!retained.contains(&typed_text));
    }
}
