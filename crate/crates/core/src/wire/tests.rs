use std::collections::HashSet;
use std::io::Cursor;
use std::net::TcpListener;
use std::time::Duration;

use num_bigint::{BigUint, RandBigInt};
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::attest::{measure_package, AttestationMessage};

fn toy(v: u32) -> GroupElement {
    GroupElement::new(BigUint::from(v), ParamsId::Toy23).unwrap()
}

fn random_element(rng: &mut ChaCha20Rng, params: ParamsId) -> GroupElement {
    let p = params.params().prime_modulus();
    let v = rng.gen_biguint_range(&BigUint::from(2u32), &(p - 1u32));
    GroupElement::new(v, params).unwrap()
}

fn random_message(rng: &mut ChaCha20Rng) -> WireMessage {
    let params = if rng.gen_bool(0.5) {
        ParamsId::Modp2048
    } else {
        ParamsId::Toy23
    };
    let mut bytes32 = [0u8; 32];
    rng.fill_bytes(&mut bytes32);
    match rng.gen_range(0..6) {
        0 => {
            const ALPHABET: &[char] = &['a', 'Z', '0', '-', '.', '_', ' ', '"', '\\', 'é', '銀'];
            let mut id = String::new();
            for _ in 0..rng.gen_range(1..=20) {
                id.push(ALPHABET[rng.gen_range(0..ALPHABET.len())]);
            }
            WireMessage::m1(UserId::new(&id).unwrap(), random_element(rng, params))
        }
        1 => WireMessage::M2 {
            commit: random_element(rng, params),
        },
        2 => WireMessage::M3 { confirm: bytes32 },
        3 => WireMessage::M4 { confirm: bytes32 },
        4 => {
            let mut tag = [0u8; 32];
            rng.fill_bytes(&mut tag);
            WireMessage::M5 {
                attestation: AttestationMessage::from_parts(measure_package(&bytes32), tag),
            }
        }
        _ => WireMessage::Abort {
            reason: AbortReason::ALL[rng.gen_range(0..AbortReason::ALL.len())],
        },
    }
}

#[test]
fn m3_with_zero_confirm_is_canonical() {
    let body = encode(&WireMessage::M3 { confirm: [0; 32] });
    let expected = format!("{{\"confirm\":\"{}\",\"type\":\"m3\"}}", "0".repeat(64));
    assert_eq!(String::from_utf8(body).unwrap(), expected);
}

#[test]
fn m1_field_layout() {
    let msg = WireMessage::m1(UserId::new("johndoe").unwrap(), toy(8));
    assert_eq!(
        String::from_utf8(encode(&msg)).unwrap(),
        r#"{"commit":"CA==","params_id":"toy23","type":"m1","user_id":"johndoe"}"#
    );
    assert_eq!(
        String::from_utf8(encode(&WireMessage::Abort {
            reason: AbortReason::PakeConfirmFailed
        }))
        .unwrap(),
        r#"{"reason":"pake_confirm_failed","type":"abort"}"#
    );
}

#[test]
fn encoding_is_injective_and_round_trips() {
    let mut rng = ChaCha20Rng::seed_from_u64(1000);
    let corpus: Vec<WireMessage> = (0..1000).map(|_| random_message(&mut rng)).collect();
    let mut seen = std::collections::HashMap::new();
    for msg in &corpus {
        let body = encode(msg);
        assert_eq!(&decode(&body).unwrap(), msg);
        if let Some(previous) = seen.insert(body, msg.clone()) {
            assert_eq!(&previous, msg, "two distinct messages share an encoding");
        }
    }
    let distinct: HashSet<String> = corpus.iter().map(|m| format!("{m:?}")).collect();
    assert_eq!(seen.len(), distinct.len());
}

#[test]
fn truncated_input_rejected() {
    let body = encode(&WireMessage::M3 { confirm: [7; 32] });
    for cut in 0..body.len() {
        assert!(matches!(decode(&body[..cut]), Err(WireError::Malformed(_))), "cut {cut}");
    }
}

#[test]
fn degenerate_commit_rejected_at_decode() {
    for body in [
        r#"{"commit":"AQ==","type":"m2"}"#,
        r#"{"commit":"AA==","type":"m2"}"#,
        r#"{"commit":"Fg==","type":"m2"}"#,
    ] {
        assert!(matches!(decode(body.as_bytes()), Err(WireError::Malformed(_))), "{body}");
    }
    let mut one = vec![0u8; 256];
    one[255] = 1;
    let body = format!(
        r#"{{"commit":"{}","type":"m2"}}"#,
        base64::engine::general_purpose::STANDARD.encode(&one)
    );
    assert!(matches!(decode(body.as_bytes()), Err(WireError::Malformed(_))));
    assert!(decode(br#"{"commit":"CA==","type":"m2"}"#).is_ok());
}

#[test]
fn non_canonical_forms_rejected() {
    let zeros = "0".repeat(64);
    let cases = [
        format!(r#"{{"type":"m3","confirm":"{zeros}"}}"#),
        format!(r#"{{"confirm": "{zeros}","type":"m3"}}"#),
        format!(r#"{{"confirm":"{zeros}","type":"m3","x":1}}"#),
        format!(r#"{{"confirm":"{zeros}","confirm":"{zeros}","type":"m3"}}"#),
        format!(r#"{{"confirm":"{}","type":"m3"}}"#, "A".repeat(64)),
        format!(r#"{{"confirm":"{}","type":"m3"}}"#, "0".repeat(62)),
        format!(r#"{{"confirm":"{zeros}","type":"m9"}}"#),
        format!(r#"{{"confirm":"{zeros}"}}"#),
        r#"{"commit":"CA==","params_id":"modp2048","type":"m1","user_id":"johndoe"}"#.into(),
        r#"{"commit":"CA==","params_id":"toy23","type":"m1","user_id":"a:b"}"#.into(),
        r#"{"commit":"CA==","params_id":"toy23","type":"m1","user_id":""}"#.into(),
        r#"{"commit":"CA","type":"m2"}"#.into(),
        r#"{"reason":"bored","type":"abort"}"#.into(),
        r#"["m3"]"#.into(),
        format!(r#"{{"confirm":"{zeros}","type":"m3"}} "#),
    ];
    for body in &cases {
        assert!(matches!(decode(body.as_bytes()), Err(WireError::Malformed(_))), "{body}");
    }
}

#[test]
fn user_id_rules() {
    assert!(UserId::new("johndoe").is_ok());
    assert!(UserId::new(&"x".repeat(64)).is_ok());
    assert!(UserId::new(&"x".repeat(65)).is_err());
    assert!(UserId::new("").is_err());
    assert!(UserId::new("b:c").is_err());
}

#[test]
fn inproc_loopback() {
    let (mut broker, mut bank) = inproc_pair(Duration::from_secs(5));
    let msg = WireMessage::m1(UserId::new("johndoe").unwrap(), toy(8));
    broker.send(&msg).unwrap();
    assert_eq!(bank.recv().unwrap(), msg);
    let reply = WireMessage::M2 { commit: toy(16) };
    bank.send(&reply).unwrap();
    assert_eq!(broker.recv().unwrap(), reply);

    let t = broker.transcript();
    assert_eq!(t.kinds(), ["m1", "m2"]);
    assert_eq!(t.entries()[0].direction, Direction::BrokerToBank);
    assert_eq!(t.entries()[1].direction, Direction::BankToBroker);
    assert_eq!(t.total_bytes(), encode(&msg).len() + encode(&reply).len());
    assert_eq!(bank.transcript().entries(), t.entries());
}

#[test]
fn oversized_frame_rejected() {
    let mut declared = (1u32 << 20).to_be_bytes().to_vec();
    declared.extend_from_slice(b"{}");
    assert_eq!(
        read_frame(&mut Cursor::new(declared.clone())),
        Err(WireError::FrameTooLarge(1 << 20))
    );

    let (mut broker, mut bank) = inproc_pair(Duration::from_secs(5));
    broker.io_mut().send_raw(declared).unwrap();
    assert_eq!(bank.recv(), Err(WireError::FrameTooLarge(1 << 20)));
    assert!(bank.transcript().is_empty());

    assert_eq!(
        write_frame(&mut Vec::new(), &vec![0u8; MAX_FRAME_LEN + 1]),
        Err(WireError::FrameTooLarge(MAX_FRAME_LEN + 1))
    );
}

#[test]
fn closed_and_silent_peers() {
    let (mut broker, bank) = inproc_pair(Duration::from_millis(50));
    assert_eq!(broker.recv(), Err(WireError::Timeout));
    drop(bank);
    assert_eq!(broker.recv(), Err(WireError::TransportClosed));
    assert_eq!(
        read_frame(&mut Cursor::new(vec![0, 0, 0, 9, b'{'])),
        Err(WireError::TransportClosed)
    );
}

#[test]
fn tcp_matches_inproc() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let messages = vec![
        WireMessage::m1(UserId::new("johndoe").unwrap(), toy(8)),
        WireMessage::M3 { confirm: [3; 32] },
    ];
    let server = {
        let expected = messages.clone();
        std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut bank = Endpoint::tcp(stream, Side::Bank, Duration::from_secs(5)).unwrap();
            for m in &expected {
                assert_eq!(&bank.recv().unwrap(), m);
            }
            bank.take_transcript()
        })
    };
    let mut tcp = TcpDialer::new()
        .route("bank.example", addr)
        .dial("bank.example")
        .unwrap();
    let (mut inproc, mut sink) = inproc_pair(Duration::from_secs(5));
    for m in &messages {
        tcp.send(m).unwrap();
        inproc.send(m).unwrap();
        sink.recv().unwrap();
    }
    let bank_view = server.join().unwrap();
    assert_eq!(tcp.transcript(), inproc.transcript());
    assert_eq!(bank_view.total_bytes(), tcp.transcript().total_bytes());
    assert_eq!(tcp.transcript().to_json_lines(), inproc.transcript().to_json_lines());
}

#[test]
fn trace_validity() {
    let m = |dir, msg| (dir, msg);
    let b2k = Direction::BrokerToBank;
    let k2b = Direction::BankToBroker;
    let confirm = [1u8; 32];
    let m5 = WireMessage::M5 {
        attestation: AttestationMessage::from_parts(measure_package(b""), [0; 32]),
    };
    let abort = WireMessage::Abort {
        reason: AbortReason::PakeConfirmFailed,
    };
    let honest = vec![
        m(b2k, WireMessage::m1(UserId::new("u").unwrap(), toy(8))),
        m(k2b, WireMessage::M2 { commit: toy(16) }),
        m(b2k, WireMessage::M3 { confirm }),
        m(k2b, WireMessage::M4 { confirm }),
        m(k2b, m5.clone()),
    ];
    let build = |entries: &[(Direction, WireMessage)]| {
        let mut t = Transcript::new();
        for (dir, msg) in entries {
            t.record(*dir, msg.clone(), encode(msg).len());
        }
        t
    };
    assert!(build(&honest).is_valid_trace());
    assert!(build(&honest).conforms_for(Side::Broker));
    assert!(build(&honest).conforms_for(Side::Bank));
    let mut aborted = honest[..3].to_vec();
    aborted.push(m(k2b, abort.clone()));
    assert!(build(&aborted).is_valid_trace());

    let mut after_abort = aborted.clone();
    after_abort.push(m(k2b, m5.clone()));
    assert!(!build(&after_abort).is_valid_trace());
    assert!(!build(&after_abort).conforms_for(Side::Bank));

    let swapped = vec![honest[1].clone(), honest[0].clone()];
    assert!(!build(&swapped).is_valid_trace());
    // The bank answering an out-of-order M3 with an Abort is still conforming for it.
    let injected = vec![m(b2k, WireMessage::M3 { confirm }), m(k2b, abort)];
    assert!(!build(&injected).is_valid_trace());
    assert!(build(&injected).conforms_for(Side::Bank));
}

proptest! {
    #[test]
    fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let msg = random_message(&mut rng);
        prop_assert_eq!(decode(&encode(&msg)).unwrap(), msg);
    }
}
