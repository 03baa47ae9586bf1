use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    AppPackage, Behavior, Check, DeviceError, DeviceState, Event, Principal, SecureApk, TypedInto,
    UserAgent, Alertness, INDICATOR_KEY,
};
use crate::attest::{AttestationMessage, ATTESTATION_LEN};
use crate::bank::{BankError, BankServer, BankService, InProcDialer, ProvisionStore, SessionOutcome};
use crate::broker::{self, BrokerError, SetupOutcome};
use crate::pake::Pin;
use crate::wire::{encode, Dialer, TcpDialer, Transcript, Transport, UserId, WireError, WireMessage};

pub const BANK_HANDLE: &str = "bank";
pub const BANK_URL: &str = "bank.example";
pub const BANK_DISPLAY_NAME: &str = "MyBank";
pub const USER_ID: &str = "johndoe";

const LEGIT_PACKAGE_LEN: usize = 264 * 1024;
const BANK_SEED_MIX: u64 = 0x6261_6e6b_5f72_6e67;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Setup,
    Login,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Setup => "setup",
            Phase::Login => "login",
        }
    }
}

/// How a phishing login screen fills the indicator slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    MissingImage,
    RandomImage,
    Maintenance,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::MissingImage, Variant::RandomImage, Variant::Maintenance];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MissingImage => "missing-image",
            Variant::RandomImage => "random-image",
            Variant::Maintenance => "maintenance",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    /// Variants that make sense for `behavior` in `phase`. A floating overlay sits
    /// on the real app's screen, and setup screens have no indicator slot.
    pub fn applicable(behavior: Behavior, phase: Phase) -> Vec<Option<Variant>> {
        match (phase, behavior) {
            (Phase::Setup, _) | (Phase::Login, Behavior::FloatingAttacker) => vec![None],
            (Phase::Login, _) => Self::ALL.into_iter().map(Some).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoginOutcome {
    CredentialsEntered,
    Detected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankLink {
    InProc,
    /// Runs a bank server on this address and dials it over TCP.
    Tcp(SocketAddr),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub alertness: Alertness,
    pub link: BankLink,
}

impl SimConfig {
    pub fn new(seed: u64, alertness: Alertness) -> Self {
        Self {
            seed,
            alertness,
            link: BankLink::InProc,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("bank link: {0}")]
    Io(String),
}

#[derive(Debug, Clone)]
pub struct SetupRun {
    /// `None` if the typed PIN never reached the Broker.
    pub outcome: Option<SetupOutcome>,
    pub pin_check: Option<Check>,
    /// App that received the user's indicator choice.
    pub indicator_target: Option<String>,
    pub transcript: Transcript,
}

impl SetupRun {
    pub fn completed(&self) -> bool {
        self.indicator_target.as_deref() == Some(BANK_HANDLE)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LoginRun {
    pub outcome: LoginOutcome,
    pub check: Check,
    pub target: Option<Principal>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub behavior: Behavior,
    pub phase: Phase,
    pub variant: Option<Variant>,
    pub attacker: String,
    pub setup: Option<SetupOutcome>,
    pub login: Option<LoginOutcome>,
    /// The user's look at the PIN screen or login screen, whichever applied.
    pub check: Option<Check>,
    /// The user saw either a Broker abort notice or a screen that failed the check.
    pub detected: bool,
    /// Everything in the attacker's storage when the run ended.
    #[serde(serialize_with = "hex_map")]
    pub captured: BTreeMap<String, Vec<u8>>,
    pub leaked_pin: bool,
    pub leaked_indicator: bool,
}

fn hex_map<S: serde::Serializer>(map: &BTreeMap<String, Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut out = s.serialize_map(Some(map.len()))?;
    for (k, v) in map {
        out.serialize_entry(k, &hex::encode(v))?;
    }
    out.end()
}

impl AttackReport {
    pub fn captured(&self, key: &str) -> bool {
        self.captured.contains_key(key)
    }

    /// Checks the run against what the protocol promises for this attack, given
    /// how the user actually behaved.
    pub fn expectation(&self) -> Result<(), String> {
        if self.leaked_pin || self.captured("captured_pin") {
            return Err("attacker obtained the PIN".into());
        }
        let checked = self.check.is_some_and(|c| c.checked);
        match self.phase {
            Phase::Setup if self.behavior == Behavior::SimilarityAttacker => {
                expect(self.setup == Some(SetupOutcome::AbortMeasurementMismatch), || {
                    format!("expected abort_measurement_mismatch, got {:?}", self.setup)
                })?;
                expect(!self.leaked_indicator, || "indicator leaked".into())
            }
            Phase::Setup => {
                expect(self.setup == Some(SetupOutcome::Success), || {
                    format!("expected the Broker to succeed, got {:?}", self.setup)
                })?;
                if checked {
                    expect(self.detected && !self.leaked_indicator, || {
                        "user checked the PIN screen but the attack went unnoticed".into()
                    })
                } else {
                    expect(self.leaked_indicator, || {
                        "inattentive user should have handed over the indicator".into()
                    })
                }
            }
            Phase::Login => {
                expect(!self.leaked_indicator, || "indicator leaked".into())?;
                if checked {
                    expect(
                        self.login == Some(LoginOutcome::Detected) && !self.captured("captured_credentials"),
                        || format!("checking user should detect the attack, got {:?}", self.login),
                    )
                } else {
                    expect(
                        self.login == Some(LoginOutcome::CredentialsEntered)
                            && self.captured("captured_credentials"),
                        || "inattentive user should have typed credentials into the attacker".into(),
                    )
                }
            }
        }
    }
}

fn expect(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// The bank's app: a fixed 264 KiB package with its configuration inside.
pub fn legit_package() -> AppPackage {
    static BYTES: OnceLock<Vec<u8>> = OnceLock::new();
    let bytes = BYTES.get_or_init(|| {
        let mut bytes = br#"{"config":{"server":"bank.example","indicator":true}}"#.to_vec();
        let mut body = vec![0u8; LEGIT_PACKAGE_LEN - bytes.len()];
        ChaCha20Rng::seed_from_u64(0x006c_6567_6974).fill_bytes(&mut body);
        bytes.extend_from_slice(&body);
        bytes
    });
    AppPackage {
        handle: BANK_HANDLE.into(),
        display_name: BANK_DISPLAY_NAME.into(),
        package_bytes: bytes.clone(),
        secureapk: Some(SecureApk {
            url: BANK_URL.into(),
            handle: BANK_HANDLE.into(),
        }),
    }
}

/// The attacker's package for `behavior`. A setup-phase similarity attacker takes
/// the bank's handle and manifest entry outright.
pub fn attacker_package(behavior: Behavior, phase: Phase) -> AppPackage {
    let (handle, display_name) = match (behavior, phase) {
        (Behavior::SimilarityAttacker, Phase::Setup) => (BANK_HANDLE, BANK_DISPLAY_NAME),
        (Behavior::SimilarityAttacker, Phase::Login) => ("mybank-secure", BANK_DISPLAY_NAME),
        (Behavior::ForwardingAttacker, _) => ("shopper", "Shopper"),
        (Behavior::BackgroundAttacker, _) => ("flashlight", "Flashlight"),
        (Behavior::NotificationAttacker, _) => ("weather", "Weather"),
        (Behavior::FloatingAttacker, _) => ("themes", "Keyboard Themes"),
        (Behavior::Legit, _) => ("legit-other", "Other"),
    };
    let mut package_bytes = vec![0u8; 16 * 1024];
    ChaCha20Rng::seed_from_u64(behavior as u64 + 1).fill_bytes(&mut package_bytes);
    AppPackage {
        handle: handle.into(),
        display_name: display_name.into(),
        package_bytes,
        secureapk: (handle == BANK_HANDLE).then(|| SecureApk {
            url: BANK_URL.into(),
            handle: BANK_HANDLE.into(),
        }),
    }
}

#[derive(Debug, Clone, Copy)]
enum Trigger {
    BeforeSas,
    DuringLock,
    AfterLaunch,
}

enum Link {
    InProc(InProcDialer),
    Tcp { server: BankServer, dialer: TcpDialer },
}

impl Link {
    fn dialer(&self) -> &dyn Dialer {
        match self {
            Link::InProc(d) => d,
            Link::Tcp { dialer, .. } => dialer,
        }
    }
}

/// One phone, one customer and one bank, with scripted attacker moves.
pub struct Simulation {
    pub device: DeviceState,
    pub user: UserAgent,
    bank: Arc<BankService>,
    link: Option<Link>,
    tamper_bit: Option<usize>,
    transcripts: Vec<Transcript>,
    sessions: usize,
}

impl Simulation {
    pub fn new(config: &SimConfig) -> Result<Self, SimError> {
        let mut device = DeviceState::new(config.seed);
        let bank_rng = ChaCha20Rng::seed_from_u64(config.seed ^ BANK_SEED_MIX);
        let bank = Arc::new(BankService::new(ProvisionStore::in_memory(), bank_rng));
        let legit = legit_package();
        let user_id = UserId::new(USER_ID).expect("valid user id");
        let (pin, tag) = bank.provision_user(user_id, BANK_HANDLE, legit.measurement())?;
        device.install(legit, Behavior::Legit)?;
        let mut user = UserAgent::new(config.alertness);
        user.read_mail(pin, tag);
        device.log(Event::MailDelivered);

        let link = match config.link {
            BankLink::InProc => Link::InProc(InProcDialer::new(Arc::clone(&bank), BANK_URL)),
            BankLink::Tcp(addr) => {
                let listener = std::net::TcpListener::bind(addr).map_err(|e| SimError::Io(format!("bind {addr}: {e}")))?;
                let local = listener.local_addr().map_err(|e| SimError::Io(e.to_string()))?;
                let server = BankServer::spawn(Arc::clone(&bank), listener, 2)
                    .map_err(|e| SimError::Io(e.to_string()))?;
                Link::Tcp {
                    server,
                    dialer: TcpDialer::new().route(BANK_URL, local),
                }
            }
        };
        Ok(Self {
            device,
            user,
            bank,
            link: Some(link),
            tamper_bit: None,
            transcripts: Vec::new(),
            sessions: 0,
        })
    }

    pub fn bank(&self) -> &Arc<BankService> {
        &self.bank
    }

    /// Flips this bit of every M5 payload on its way to the Broker.
    pub fn tamper_m5_bit(&mut self, bit: Option<usize>) {
        self.tamper_bit = bit;
    }

    /// Transcripts of every session the Broker dialed, in order.
    pub fn transcripts(&self) -> &[Transcript] {
        &self.transcripts
    }

    pub fn mailed_pin(&self) -> Option<&Pin> {
        self.user.mailbox.as_ref().map(|(pin, _)| pin)
    }

    /// Bank-side outcomes, once every dialed session has finished.
    pub fn bank_outcomes(&self) -> Vec<SessionOutcome> {
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            let outcomes = self.bank.outcomes();
            if outcomes.len() >= self.sessions || Instant::now() > deadline {
                return outcomes;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    /// Installs an attacker primed for `phase`. Returns its handle.
    pub fn install_attacker(&mut self, behavior: Behavior, phase: Phase, variant: Option<Variant>) -> Result<String, SimError> {
        let package = attacker_package(behavior, phase);
        let handle = package.handle.clone();
        self.device.install(package, behavior)?;
        if let Some(plan) = self.device.plan_mut(&handle) {
            plan.phase = Some(phase);
            plan.variant = variant;
            plan.target = Some(BANK_HANDLE.into());
        }
        self.device.tick();
        Ok(handle)
    }

    fn active_attackers(&self, phase: Phase) -> Vec<(String, Behavior)> {
        self.device
            .apps()
            .filter(|app| app.behavior.is_attacker() && app.plan.phase == Some(phase))
            .map(|app| (app.package.handle.clone(), app.behavior))
            .collect()
    }

    /// Attackers know what is in front at all times and act on it.
    fn setup_moves(&mut self, trigger: Trigger) {
        for (handle, behavior) in self.active_attackers(Phase::Setup) {
            match behavior {
                Behavior::BackgroundAttacker => {
                    self.device.request_foreground(&handle);
                }
                Behavior::NotificationAttacker => {
                    self.device.log(Event::NotificationPosted { owner: handle.clone() });
                    if !self.device.is_locked() {
                        self.device.log(Event::NotificationTapped { owner: handle.clone() });
                    }
                    self.device.request_foreground(&handle);
                }
                Behavior::ForwardingAttacker => {
                    if !matches!(trigger, Trigger::DuringLock) {
                        self.device.log(Event::Forwarded { owner: handle.clone() });
                    }
                    self.device.request_foreground(&handle);
                }
                Behavior::FloatingAttacker => {
                    self.device.draw_overlay(&handle);
                }
                Behavior::SimilarityAttacker | Behavior::Legit => {}
            }
            self.device.tick();
        }
    }

    /// The user's full setup: SAS, PIN entry, Broker run, PIN check and
    /// indicator choice.
    pub fn run_setup(&mut self) -> Result<SetupRun, SimError> {
        self.device.tick();
        self.setup_moves(Trigger::BeforeSas);
        self.device.sas_trigger();
        self.device.tick();
        self.setup_moves(Trigger::DuringLock);

        let mut run = SetupRun {
            outcome: None,
            pin_check: None,
            indicator_target: None,
            transcript: Transcript::new(),
        };
        let TypedInto::Broker { tag, pin } = self.user.enter_pin(&mut self.device)? else {
            return Ok(run);
        };
        let handle = broker::parse_service_tag(&tag)?.handle().to_owned();
        let link = self.link.take().expect("link present");
        let result = match self.tamper_bit {
            Some(bit) => broker::submit(&mut self.device, &tag, &pin, &TamperingDialer::new(link.dialer(), bit)),
            None => broker::submit(&mut self.device, &tag, &pin, link.dialer()),
        };
        self.link = Some(link);
        drop(pin);
        let result = result?;
        if !result.transcript.is_empty() {
            self.sessions += 1;
        }
        self.transcripts.push(result.transcript.clone());
        run.outcome = Some(result.outcome);
        run.transcript = result.transcript;
        self.device.tick();

        if result.outcome != SetupOutcome::Success {
            self.device.dismiss_broker();
            self.device.tick();
            return Ok(run);
        }
        broker::launch_and_display(&mut self.device, &handle);
        self.device.tick();
        self.setup_moves(Trigger::AfterLaunch);

        let screen = self.device.visible_screen();
        let check = self.user.verify_pin_display(&mut self.device, screen.pin.as_deref())?;
        run.pin_check = Some(check);
        if check.accepted {
            run.indicator_target = self.user.choose_indicator(&mut self.device)?;
        } else {
            self.device.log(Event::UserAborted);
        }
        self.device.tick();
        self.device.go_home();
        self.device.tick();
        Ok(run)
    }

    /// The user opens the bank app and decides whether to log in.
    pub fn run_login(&mut self) -> Result<LoginRun, SimError> {
        if !self.device.storage_snapshot(BANK_HANDLE).contains_key(INDICATOR_KEY) {
            return Err(DeviceError::SetupIncomplete(BANK_HANDLE.into()).into());
        }
        self.device.go_home();
        self.device.tick();
        let attacker = self.active_attackers(Phase::Login).into_iter().next();
        if let Some((handle, _)) = &attacker {
            let chosen = self.user.chosen_indicator.as_ref().map(|i| i.image_id.clone());
            let decoy = self.device.gallery_pick(chosen.as_deref());
            if let Some(plan) = self.device.plan_mut(handle) {
                plan.decoy = Some(decoy);
            }
        }
        match &attacker {
            Some((handle, Behavior::SimilarityAttacker)) => {
                self.device.log(Event::LoginStarted { handle: handle.clone() });
                self.device.request_foreground(handle);
            }
            Some((handle, Behavior::ForwardingAttacker)) => {
                self.device.log(Event::LoginStarted { handle: handle.clone() });
                self.device.request_foreground(handle);
                self.device.log(Event::Forwarded { owner: handle.clone() });
            }
            _ => {
                self.device.log(Event::LoginStarted {
                    handle: BANK_HANDLE.into(),
                });
                self.device.request_foreground(BANK_HANDLE);
                self.device.tick();
                match &attacker {
                    Some((handle, Behavior::BackgroundAttacker)) => {
                        self.device.request_foreground(handle);
                    }
                    Some((handle, Behavior::NotificationAttacker)) => {
                        self.device.log(Event::NotificationPosted { owner: handle.clone() });
                        self.device.log(Event::NotificationTapped { owner: handle.clone() });
                        self.device.request_foreground(handle);
                    }
                    Some((handle, Behavior::FloatingAttacker)) => {
                        self.device.draw_overlay(handle);
                    }
                    _ => {}
                }
            }
        }
        self.device.tick();

        let screen = self.device.visible_screen();
        let check = self.user.verify_indicator(&mut self.device, &screen);
        let (outcome, target) = if check.accepted {
            (LoginOutcome::CredentialsEntered, self.user.enter_credentials(&mut self.device)?)
        } else {
            (LoginOutcome::Detected, None)
        };
        self.device.tick();
        self.device.go_home();
        self.device.tick();
        Ok(LoginRun {
            outcome,
            check,
            target,
        })
    }

    /// Runs one attack end to end. Login-phase attackers arrive after an
    /// undisturbed setup.
    pub fn run_attack(&mut self, behavior: Behavior, phase: Phase, variant: Option<Variant>) -> Result<AttackReport, SimError> {
        let mut report = AttackReport {
            behavior,
            phase,
            variant,
            attacker: String::new(),
            setup: None,
            login: None,
            check: None,
            detected: false,
            captured: BTreeMap::new(),
            leaked_pin: false,
            leaked_indicator: false,
        };
        match phase {
            Phase::Setup => {
                report.attacker = self.install_attacker(behavior, phase, variant)?;
                let run = self.run_setup()?;
                report.setup = run.outcome;
                report.check = run.pin_check;
                report.detected = run.outcome.is_some_and(|o| o != SetupOutcome::Success)
                    || run.pin_check.is_some_and(Check::detected);
            }
            Phase::Login => {
                let run = self.run_setup()?;
                report.setup = run.outcome;
                if !run.completed() {
                    return Err(DeviceError::SetupIncomplete(BANK_HANDLE.into()).into());
                }
                report.attacker = self.install_attacker(behavior, phase, variant)?;
                let login = self.run_login()?;
                report.login = Some(login.outcome);
                report.check = Some(login.check);
                report.detected = login.check.detected();
            }
        }
        report.captured = self.device.storage_snapshot(&report.attacker);
        let pin = self.mailed_pin().map(|p| p.expose().as_bytes().to_vec());
        let blob = self.user.chosen_indicator.as_ref().map(|i| i.blob.clone());
        let haystack: Vec<&[u8]> = report.captured.values().map(Vec::as_slice).collect();
        report.leaked_pin = pin.is_some_and(|p| contains_any(&haystack, &p));
        report.leaked_indicator = blob.is_some_and(|b| {
            contains_any(&haystack, &b) || contains_any(&haystack, hex::encode(&b).as_bytes())
        });
        Ok(report)
    }

    /// Stops the TCP bank server, if any.
    pub fn shutdown(mut self) {
        if let Some(Link::Tcp { server, .. }) = self.link.take() {
            server.shutdown();
        }
    }
}

fn contains_any(haystack: &[&[u8]], needle: &[u8]) -> bool {
    haystack
        .iter()
        .any(|h| h.windows(needle.len()).any(|w| w == needle))
}

/// Wraps a dialer so that one bit of each M5 payload is flipped in transit.
pub struct TamperingDialer<'a> {
    inner: &'a dyn Dialer,
    bit: usize,
}

impl<'a> TamperingDialer<'a> {
    /// `bit` counts from the most significant bit of the 64-byte payload.
    pub fn new(inner: &'a dyn Dialer, bit: usize) -> Self {
        Self { inner, bit: bit % (ATTESTATION_LEN * 8) }
    }
}

impl Dialer for TamperingDialer<'_> {
    fn dial(&self, url: &str) -> Result<Box<dyn Transport>, WireError> {
        Ok(Box::new(Tampering {
            inner: self.inner.dial(url)?,
            bit: self.bit,
            transcript: Transcript::new(),
        }))
    }
}

struct Tampering {
    inner: Box<dyn Transport>,
    bit: usize,
    transcript: Transcript,
}

impl Transport for Tampering {
    fn send(&mut self, msg: &WireMessage) -> Result<(), WireError> {
        self.inner.send(msg)?;
        self.transcript
            .record(crate::wire::Direction::BrokerToBank, msg.clone(), encode(msg).len());
        Ok(())
    }

    fn recv(&mut self) -> Result<WireMessage, WireError> {
        let mut msg = self.inner.recv()?;
        if let WireMessage::M5 { attestation } = &msg {
            let mut payload = attestation.to_payload();
            payload[self.bit / 8] ^= 0x80 >> (self.bit % 8);
            let attestation = AttestationMessage::from_payload(&payload).expect("fixed length");
            msg = WireMessage::M5 { attestation };
        }
        self.transcript
            .record(crate::wire::Direction::BankToBroker, msg.clone(), encode(&msg).len());
        Ok(msg)
    }

    fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    fn take_transcript(&mut self) -> Transcript {
        std::mem::take(&mut self.transcript)
    }
}
