use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::attest::{measure_package, open_measurement, Measurement};
use crate::pake::derive_generator;
use crate::wire::{Transcript, UserId};

fn bank_with(users: &[&str], seed: u64) -> (Arc<BankService>, Vec<Pin>) {
    let bank = BankService::new(ProvisionStore::in_memory(), ChaCha20Rng::seed_from_u64(seed));
    let pins = users
        .iter()
        .map(|u| {
            bank.provision_user(UserId::new(u).unwrap(), "bank", reference())
                .unwrap()
                .0
        })
        .collect();
    (Arc::new(bank), pins)
}

fn reference() -> Measurement {
    measure_package(b"legit bank app")
}

/// Drives the initiator side by hand and returns what it saw.
fn initiate(t: &mut dyn Transport, user: &str, pin: &Pin, seed: u64) -> (Transcript, Option<Measurement>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut session = PakeSession::new(PakeRole::Initiator, pin.clone(), user, ParamsId::Modp2048);
    let commit = session.start(&mut rng).unwrap();
    t.send(&WireMessage::m1(UserId::new(user).unwrap(), commit)).unwrap();
    let Ok(WireMessage::M2 { commit }) = t.recv() else {
        return (t.take_transcript(), None);
    };
    session.receive_commit(commit.value()).unwrap();
    t.send(&WireMessage::M3 {
        confirm: session.make_confirmation().unwrap(),
    })
    .unwrap();
    let Ok(WireMessage::M4 { confirm }) = t.recv() else {
        return (t.take_transcript(), None);
    };
    assert!(session.verify_confirmation(&confirm));
    let Ok(WireMessage::M5 { attestation }) = t.recv() else {
        return (t.take_transcript(), None);
    };
    let opened = open_measurement(&attestation, session.keys().unwrap()).ok();
    (t.take_transcript(), opened)
}

fn dial(dialer: &InProcDialer) -> Box<dyn Transport> {
    dialer.dial("bank.example").unwrap()
}

#[test]
fn honest_session_delivers_the_reference() {
    let (bank, pins) = bank_with(&["johndoe"], 1);
    let dialer = InProcDialer::new(bank.clone(), "bank.example");
    let (transcript, opened) = initiate(dial(&dialer).as_mut(), "johndoe", &pins[0], 2);
    assert_eq!(opened, Some(reference()));
    assert_eq!(transcript.kinds(), ["m1", "m2", "m3", "m4", "m5"]);
    assert_eq!(dialer.take_outcomes(), [SessionOutcome::Completed]);
    assert!(bank.store().get(&UserId::new("johndoe").unwrap()).unwrap().consumed);
}

#[test]
fn wrong_pin_fails_confirmation_without_m5() {
    let (bank, pins) = bank_with(&["johndoe"], 1);
    let dialer = InProcDialer::new(bank.clone(), "bank.example");
    let wrong = Pin::from_index((pins[0].index() + 1) % Pin::SPACE);
    let (transcript, opened) = initiate(dial(&dialer).as_mut(), "johndoe", &wrong, 3);
    assert_eq!(opened, None);
    assert_eq!(transcript.kinds(), ["m1", "m2", "m3", "abort"]);
    assert_eq!(dialer.take_outcomes(), [SessionOutcome::ConfirmFailed]);
    assert!(!bank.store().get(&UserId::new("johndoe").unwrap()).unwrap().consumed);
}

#[test]
fn pin_is_single_use() {
    let (bank, pins) = bank_with(&["johndoe"], 4);
    let dialer = InProcDialer::new(bank, "bank.example");
    assert!(initiate(dial(&dialer).as_mut(), "johndoe", &pins[0], 0).1.is_some());
    for seed in 1..=100 {
        let (transcript, opened) = initiate(dial(&dialer).as_mut(), "johndoe", &pins[0], seed);
        assert_eq!(opened, None);
        assert_eq!(transcript.kinds(), ["m1", "m2", "m3", "abort"]);
    }
    let outcomes = dialer.take_outcomes();
    assert_eq!(outcomes[0], SessionOutcome::Completed);
    assert!(outcomes[1..].iter().all(|o| *o == SessionOutcome::ConfirmFailed));
}

fn shape(transcript: &Transcript) -> Vec<(&'static str, usize)> {
    transcript
        .entries()
        .iter()
        .map(|e| (e.message.kind(), e.encoded_length))
        .collect()
}

#[test]
fn unknown_user_looks_like_a_wrong_pin() {
    let (bank, pins) = bank_with(&["johndoe", "janedoe"], 5);
    let dialer = InProcDialer::new(bank, "bank.example");
    let wrong = Pin::from_index((pins[0].index() + 7) % Pin::SPACE);
    // Same length user IDs so the M1 bodies are the same length too.
    let (wrong_pin, _) = initiate(dial(&dialer).as_mut(), "johndoe", &wrong, 6);
    let (unknown, _) = initiate(dial(&dialer).as_mut(), "maryroe", &wrong, 6);
    assert_eq!(shape(&wrong_pin), shape(&unknown));
    assert_eq!(
        dialer.take_outcomes(),
        [SessionOutcome::ConfirmFailed, SessionOutcome::UnknownUser]
    );
    let _ = pins;
}

#[test]
fn wire_never_carries_pin_digest_or_generator() {
    let (bank, pins) = bank_with(&["johndoe"], 7);
    let dialer = InProcDialer::new(bank, "bank.example");
    let (transcript, _) = initiate(dial(&dialer).as_mut(), "johndoe", &pins[0], 8);
    let wire: Vec<u8> = transcript
        .entries()
        .iter()
        .flat_map(|e| crate::wire::encode(&e.message))
        .collect();
    let wire = String::from_utf8(wire).unwrap();
    let digest = crate::crypto::sha256(&[pins[0].as_bytes()]);
    let generator = derive_generator(&pins[0], ParamsId::Modp2048).unwrap();
    assert!(!wire.contains(&format!("\"{}\"", pins[0].expose())));
    assert!(!wire.contains(&hex::encode(digest)));
    assert!(!wire.contains(&generator.to_base64()));
    assert!(!wire.contains(&hex::encode(generator.to_fixed_bytes())));
}

#[test]
fn non_m1_opening_is_rejected() {
    let (bank, _) = bank_with(&["johndoe"], 9);
    let dialer = InProcDialer::new(bank, "bank.example");
    let mut t = dial(&dialer);
    t.send(&WireMessage::M3 { confirm: [1; 32] }).unwrap();
    assert_eq!(
        t.recv().unwrap(),
        WireMessage::Abort {
            reason: AbortReason::Malformed
        }
    );
    assert_eq!(dialer.take_outcomes(), [SessionOutcome::Malformed]);
}

#[test]
fn unsupported_params_are_rejected() {
    let (bank, pins) = bank_with(&["johndoe"], 10);
    let dialer = InProcDialer::new(bank, "bank.example");
    let mut t = dial(&dialer);
    let mut session = PakeSession::new(PakeRole::Initiator, pins[0].clone(), "johndoe", ParamsId::Toy23);
    let commit = session.start(&mut ChaCha20Rng::seed_from_u64(1)).unwrap();
    t.send(&WireMessage::m1(UserId::new("johndoe").unwrap(), commit)).unwrap();
    assert!(matches!(t.recv().unwrap(), WireMessage::Abort { .. }));
    assert_eq!(dialer.take_outcomes(), [SessionOutcome::Malformed]);
}

#[test]
fn seeded_provisioning_is_reproducible() {
    let (_, a) = bank_with(&["johndoe", "janedoe"], 42);
    let (_, b) = bank_with(&["johndoe", "janedoe"], 42);
    assert_eq!(a, b);
}

#[test]
fn dialer_only_knows_its_url() {
    let (bank, _) = bank_with(&[], 1);
    let dialer = InProcDialer::new(bank, "bank.example");
    assert!(dialer.dial("evil.example").is_err());
}
