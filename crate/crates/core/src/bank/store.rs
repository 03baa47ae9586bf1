//! Persistent provisioning records, one JSON object per line.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BankError;
use crate::attest::Measurement;
use crate::broker::ServiceTag;
use crate::pake::Pin;
use crate::wire::UserId;

mod pin_digits {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::pake::Pin;

    pub fn serialize<S: Serializer>(pin: &Pin, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(pin.expose())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Pin, D::Error> {
        let digits = String::deserialize(deserializer)?;
        Pin::parse(&digits).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvisionRecord {
    pub user_id: UserId,
    #[serde(with = "pin_digits")]
    pub pin: Pin,
    pub app_handle: String,
    pub reference_measurement: Measurement,
    /// Set once a session completes; the PIN never keys another session.
    pub consumed: bool,
}

/// Records keyed by user ID. With a backing file, every mutation rewrites the
/// file through a temporary sibling and an atomic rename, so a crash leaves
/// either the old or the new record set on disk.
#[derive(Debug, Default)]
pub struct ProvisionStore {
    path: Option<PathBuf>,
    records: BTreeMap<UserId, ProvisionRecord>,
}

impl ProvisionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path`, or starts empty if it does not exist yet. Any malformed or
    /// duplicate line is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BankError> {
        let path = path.as_ref().to_path_buf();
        let mut records = BTreeMap::new();
        match fs::read_to_string(&path) {
            Ok(text) => {
                for (index, line) in text.lines().enumerate() {
                    let line_no = index + 1;
                    let corrupt = |reason: String| BankError::CorruptStore { line: line_no, reason };
                    let record: ProvisionRecord =
                        serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
                    validate_handle(&record.app_handle).map_err(|e| corrupt(e.to_string()))?;
                    if records.contains_key(&record.user_id) {
                        return Err(corrupt(format!("duplicate user {}", record.user_id)));
                    }
                    records.insert(record.user_id.clone(), record);
                }
            }
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => {}
            Err(err) => return Err(BankError::Io(err.to_string())),
        }
        Ok(Self {
            path: Some(path),
            records,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, user_id: &UserId) -> Option<&ProvisionRecord> {
        self.records.get(user_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &ProvisionRecord> {
        self.records.values()
    }

    /// Creates the record and returns what the bank mails to the customer.
    pub fn provision_user<R: Rng + ?Sized>(
        &mut self,
        user_id: UserId,
        app_handle: &str,
        reference_measurement: Measurement,
        rng: &mut R,
    ) -> Result<(Pin, ServiceTag), BankError> {
        validate_handle(app_handle)?;
        if self.records.contains_key(&user_id) {
            return Err(BankError::DuplicateUser(user_id.to_string()));
        }
        let pin = Pin::random(rng);
        let tag = ServiceTag::new(app_handle, user_id.clone()).map_err(|_| BankError::InvalidHandle)?;
        self.records.insert(
            user_id.clone(),
            ProvisionRecord {
                user_id: user_id.clone(),
                pin: pin.clone(),
                app_handle: app_handle.to_owned(),
                reference_measurement,
                consumed: false,
            },
        );
        if let Err(err) = self.persist() {
            self.records.remove(&user_id);
            return Err(err);
        }
        Ok((pin, tag))
    }

    /// Marks the record used. Returns `false` if it was already consumed or is unknown.
    pub fn consume(&mut self, user_id: &UserId) -> Result<bool, BankError> {
        let Some(record) = self.records.get_mut(user_id) else {
            return Ok(false);
        };
        if record.consumed {
            return Ok(false);
        }
        record.consumed = true;
        if let Err(err) = self.persist() {
            if let Some(record) = self.records.get_mut(user_id) {
                record.consumed = false;
            }
            return Err(err);
        }
        Ok(true)
    }

    /// The store's file contents, one record per line in user ID order.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for record in self.records.values() {
            out.push_str(&serde_json::to_string(record).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    fn persist(&self) -> Result<(), BankError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let io = |e: std::io::Error| BankError::Io(format!("{}: {e}", path.display()));
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        {
            let mut file = File::create(&tmp).map_err(io)?;
            file.write_all(self.to_json_lines().as_bytes()).map_err(io)?;
            file.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            // Directory fsync makes the rename durable; not every platform allows it.
            if let Ok(dir) = File::open(dir) {
                let _ = dir.sync_all();
            }
        }
        Ok(())
    }
}

fn validate_handle(handle: &str) -> Result<(), BankError> {
    if handle.is_empty() || handle.contains(':') {
        return Err(BankError::InvalidHandle);
    }
    Ok(())
}
