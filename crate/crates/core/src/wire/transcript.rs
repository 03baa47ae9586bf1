use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{encode, WireMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Broker,
    Bank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    BrokerToBank,
    BankToBroker,
}

impl Side {
    pub fn outbound(self) -> Direction {
        match self {
            Side::Broker => Direction::BrokerToBank,
            Side::Bank => Direction::BankToBroker,
        }
    }

    pub fn inbound(self) -> Direction {
        match self {
            Side::Broker => Direction::BankToBroker,
            Side::Bank => Direction::BrokerToBank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub message: WireMessage,
    /// Length of the canonical JSON body, framing excluded.
    pub encoded_length: usize,
}

const HONEST_ORDER: [(Direction, &str); 5] = [
    (Direction::BrokerToBank, "m1"),
    (Direction::BankToBroker, "m2"),
    (Direction::BrokerToBank, "m3"),
    (Direction::BankToBroker, "m4"),
    (Direction::BankToBroker, "m5"),
];

/// Append-only record of every message one endpoint sent or received.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn record(&mut self, direction: Direction, message: WireMessage, encoded_length: usize) {
        debug_assert_eq!(encode(&message).len(), encoded_length);
        self.entries.push(TranscriptEntry {
            direction,
            message,
            encoded_length,
        });
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.encoded_length).sum()
    }

    pub fn kinds(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.message.kind()).collect()
    }

    /// Exactly M1..M5 in order, or a prefix of that followed by one Abort.
    pub fn is_valid_trace(&self) -> bool {
        for (i, entry) in self.entries.iter().enumerate() {
            if matches!(entry.message, WireMessage::Abort { .. }) {
                return i + 1 == self.entries.len();
            }
            match HONEST_ORDER.get(i) {
                Some(&(dir, kind)) if dir == entry.direction && kind == entry.message.kind() => {}
                _ => return false,
            }
        }
        true
    }

    /// Whether `side`'s own messages are consistent with the protocol, whatever the
    /// peer sent: each outbound message is the next honest step or an Abort, and
    /// nothing follows an Abort.
    pub fn conforms_for(&self, side: Side) -> bool {
        let mine: Vec<&TranscriptEntry> = self
            .entries
            .iter()
            .filter(|e| e.direction == side.outbound())
            .collect();
        let expected: Vec<&str> = HONEST_ORDER
            .iter()
            .filter(|(dir, _)| *dir == side.outbound())
            .map(|(_, kind)| *kind)
            .collect();
        for (i, entry) in mine.iter().enumerate() {
            if matches!(entry.message, WireMessage::Abort { .. }) {
                return i + 1 == mine.len();
            }
            if expected.get(i) != Some(&entry.message.kind()) {
                return false;
            }
        }
        true
    }

    /// One JSON object per line: direction, body length, and the message itself.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            let message: Value =
                serde_json::from_slice(&encode(&entry.message)).expect("canonical JSON");
            let line = serde_json::json!({
                "direction": entry.direction,
                "encoded_length": entry.encoded_length,
                "message": message,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}
