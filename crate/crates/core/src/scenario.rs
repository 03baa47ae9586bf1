//! Named end-to-end runs with built-in expectations.

use std::fmt;
use std::fs;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bank::SessionOutcome;
use crate::broker::SetupOutcome;
use crate::device::{
    Alertness, AppPackage, AttackReport, BankLink, Behavior, LoginOutcome, Phase, SimConfig, SimError, Simulation,
    Variant, BANK_HANDLE, SETUP_PIN_KEY,
};
use crate::wire::Transcript;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Honest,
    WrongPin,
    Attack(Behavior, Phase, Option<Variant>),
    ReplayPin,
    TamperedM5,
}

#[derive(Debug, Clone, Copy)]
pub struct Scenario {
    pub name: &'static str,
    pub description: &'static str,
    kind: Kind,
}

const fn attack(name: &'static str, description: &'static str, b: Behavior, p: Phase, v: Option<Variant>) -> Scenario {
    Scenario {
        name,
        description,
        kind: Kind::Attack(b, p, v),
    }
}

pub const SCENARIOS: [Scenario; 12] = [
    Scenario {
        name: "honest-setup",
        description: "legit app, correct PIN: the Broker releases the PIN",
        kind: Kind::Honest,
    },
    Scenario {
        name: "wrong-pin",
        description: "user mistypes the PIN: key confirmation fails",
        kind: Kind::WrongPin,
    },
    attack(
        "similarity-setup",
        "lookalike installed under the bank's handle: measurement mismatch",
        Behavior::SimilarityAttacker,
        Phase::Setup,
        None,
    ),
    attack(
        "background-setup",
        "attacker grabs the foreground around setup: denied under lock, then caught by the PIN check",
        Behavior::BackgroundAttacker,
        Phase::Setup,
        None,
    ),
    attack(
        "floating-login",
        "transparent overlay on the login screen: the app hides its indicator",
        Behavior::FloatingAttacker,
        Phase::Login,
        None,
    ),
    attack(
        "missing-image-login",
        "phishing login screen without the indicator",
        Behavior::BackgroundAttacker,
        Phase::Login,
        Some(Variant::MissingImage),
    ),
    attack(
        "random-image-login",
        "phishing login screen showing some other gallery photo",
        Behavior::BackgroundAttacker,
        Phase::Login,
        Some(Variant::RandomImage),
    ),
    attack(
        "maintenance-login",
        "phishing login screen claiming the indicator is under maintenance",
        Behavior::BackgroundAttacker,
        Phase::Login,
        Some(Variant::Maintenance),
    ),
    attack(
        "forwarding-login",
        "another app forwards the user to a phishing login screen",
        Behavior::ForwardingAttacker,
        Phase::Login,
        Some(Variant::MissingImage),
    ),
    attack(
        "notification-login",
        "a notification opens a phishing login screen",
        Behavior::NotificationAttacker,
        Phase::Login,
        Some(Variant::MissingImage),
    ),
    Scenario {
        name: "replay-pin",
        description: "the PIN is used again after a completed setup",
        kind: Kind::ReplayPin,
    },
    Scenario {
        name: "tampered-m5",
        description: "one bit of the sealed measurement is flipped in transit",
        kind: Kind::TamperedM5,
    },
];

pub fn find(name: &str) -> Option<&'static Scenario> {
    SCENARIOS.iter().find(|s| s.name == name)
}

pub fn names() -> Vec<&'static str> {
    SCENARIOS.iter().map(|s| s.name).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportChoice {
    #[default]
    InProc,
    Tcp(SocketAddr),
}

impl FromStr for TransportChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "inproc" {
            return Ok(TransportChoice::InProc);
        }
        let addr = s
            .strip_prefix("tcp:")
            .ok_or_else(|| format!("transport must be inproc or tcp:HOST:PORT, got {s:?}"))?;
        addr.to_socket_addrs()
            .ok()
            .and_then(|mut a| a.next())
            .map(TransportChoice::Tcp)
            .ok_or_else(|| format!("cannot resolve {addr:?}"))
    }
}

impl fmt::Display for TransportChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportChoice::InProc => f.write_str("inproc"),
            TransportChoice::Tcp(addr) => write!(f, "tcp:{addr}"),
        }
    }
}

impl<'de> Deserialize<'de> for TransportChoice {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// An app installed next to the bank's before anything runs.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraApp {
    pub package: AppPackage,
    pub behavior: Behavior,
}

/// A scenario definition file. Every field but `scenario` is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub scenario: Option<String>,
    pub seed: Option<u64>,
    pub transport: Option<TransportChoice>,
    pub alertness: Option<Alertness>,
    pub attacker: Option<Behavior>,
    pub variant: Option<Variant>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub apps: Vec<ExtraApp>,
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario: String,
    pub seed: u64,
    pub transport: TransportChoice,
    pub alertness: Alertness,
    pub attacker: Option<Behavior>,
    pub variant: Option<Variant>,
    pub apps: Vec<ExtraApp>,
}

impl ScenarioConfig {
    pub fn new(scenario: &str, seed: u64) -> Self {
        Self {
            scenario: scenario.to_owned(),
            seed,
            transport: TransportChoice::InProc,
            alertness: Alertness::AlwaysChecks,
            attacker: None,
            variant: None,
            apps: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario {name:?}; valid names: {}", names().join(", "))]
    UnknownScenario { name: String },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("writing outputs: {0}")]
    Output(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub alertness: Alertness,
    pub attacker: Option<Behavior>,
    pub variant: Option<Variant>,
    pub setup_outcomes: Vec<Option<SetupOutcome>>,
    pub login: Option<LoginOutcome>,
    pub bank_outcomes: Vec<SessionOutcome>,
    /// Canonical body bytes per Broker session.
    pub session_bytes: Vec<usize>,
    pub detected: Option<bool>,
    pub captured: Vec<String>,
    pub passed: bool,
    pub failures: Vec<String>,
    #[serde(skip)]
    pub transcripts: Vec<Transcript>,
    #[serde(skip)]
    pub events: String,
}

impl ScenarioReport {
    pub fn summary_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// All sessions' transcripts, each line tagged with its session index.
    pub fn transcript_json_lines(&self) -> String {
        let mut out = String::new();
        for (i, transcript) in self.transcripts.iter().enumerate() {
            for line in transcript.to_json_lines().lines() {
                let mut value: Value = serde_json::from_str(line).expect("transcript line is JSON");
                value["session"] = json!(i);
                out.push_str(&value.to_string());
                out.push('\n');
            }
        }
        out
    }

    /// Writes `transcript.jsonl`, `events.jsonl` and `summary.json` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<(), ScenarioError> {
        let io = |e: std::io::Error| ScenarioError::Output(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join("transcript.jsonl"), self.transcript_json_lines()).map_err(io)?;
        fs::write(dir.join("events.jsonl"), &self.events).map_err(io)?;
        fs::write(dir.join("summary.json"), self.summary_json()).map_err(io)?;
        Ok(())
    }
}

fn resolve(config: &ScenarioConfig) -> Result<Kind, ScenarioError> {
    let scenario = find(&config.scenario).ok_or_else(|| ScenarioError::UnknownScenario {
        name: config.scenario.clone(),
    })?;
    let Kind::Attack(behavior, phase, variant) = scenario.kind else {
        if config.attacker.is_some() || config.variant.is_some() {
            return Err(ScenarioError::Config(format!(
                "scenario {} takes no attacker or variant",
                scenario.name
            )));
        }
        return Ok(scenario.kind);
    };
    let behavior = config.attacker.unwrap_or(behavior);
    if !behavior.is_attacker() {
        return Err(ScenarioError::Config("attacker must be one of the five attack behaviors".into()));
    }
    let applicable = Variant::applicable(behavior, phase);
    let variant = match config.variant {
        Some(v) if applicable.contains(&Some(v)) => Some(v),
        Some(v) => {
            return Err(ScenarioError::Config(format!(
                "variant {} does not apply to {} in the {} phase",
                v.name(),
                behavior.name(),
                phase.name()
            )))
        }
        None if applicable.contains(&variant) => variant,
        None => applicable[0],
    };
    Ok(Kind::Attack(behavior, phase, variant))
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioReport, ScenarioError> {
    let kind = resolve(config)?;
    let link = match config.transport {
        TransportChoice::InProc => BankLink::InProc,
        TransportChoice::Tcp(addr) => BankLink::Tcp(addr),
    };
    let mut sim = Simulation::new(&SimConfig {
        seed: config.seed,
        alertness: config.alertness,
        link,
    })?;
    for extra in &config.apps {
        if extra.package.handle == BANK_HANDLE {
            return Err(ScenarioError::Config("extra apps may not replace the bank app".into()));
        }
        sim.device
            .install(extra.package.clone(), extra.behavior)
            .map_err(|e| ScenarioError::Config(e.to_string()))?;
    }

    let mut report = ScenarioReport {
        scenario: config.scenario.clone(),
        seed: config.seed,
        alertness: config.alertness,
        attacker: None,
        variant: None,
        setup_outcomes: Vec::new(),
        login: None,
        bank_outcomes: Vec::new(),
        session_bytes: Vec::new(),
        detected: None,
        captured: Vec::new(),
        passed: false,
        failures: Vec::new(),
        transcripts: Vec::new(),
        events: String::new(),
    };
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_owned());
        }
    };
    let released = |sim: &Simulation| sim.device.storage_snapshot(BANK_HANDLE).contains_key(SETUP_PIN_KEY);

    match kind {
        Kind::Honest => {
            let run = sim.run_setup()?;
            report.setup_outcomes.push(run.outcome);
            check(run.outcome == Some(SetupOutcome::Success), "expected success");
            check(run.transcript.kinds() == ["m1", "m2", "m3", "m4", "m5"], "expected M1..M5");
            check(run.completed(), "expected the indicator to reach the bank app");
        }
        Kind::WrongPin => {
            sim.user.mistype = true;
            let run = sim.run_setup()?;
            report.setup_outcomes.push(run.outcome);
            check(run.outcome == Some(SetupOutcome::AbortPakeFailed), "expected abort_pake_failed");
            check(!run.transcript.kinds().contains(&"m5"), "no M5 after a failed confirmation");
            check(!released(&sim), "PIN must not be released");
        }
        Kind::ReplayPin => {
            let first = sim.run_setup()?;
            let second = sim.run_setup()?;
            report.setup_outcomes.extend([first.outcome, second.outcome]);
            check(first.outcome == Some(SetupOutcome::Success), "first run should succeed");
            check(
                second.outcome == Some(SetupOutcome::AbortPakeFailed),
                "replayed PIN should fail confirmation",
            );
        }
        Kind::TamperedM5 => {
            sim.tamper_m5_bit(Some((config.seed % 512) as usize));
            let run = sim.run_setup()?;
            report.setup_outcomes.push(run.outcome);
            check(run.outcome == Some(SetupOutcome::AbortAuthFailed), "expected abort_auth_failed");
            check(!released(&sim), "PIN must not be released");
        }
        Kind::Attack(behavior, phase, variant) => {
            report.attacker = Some(behavior);
            report.variant = variant;
            let attack: AttackReport = sim.run_attack(behavior, phase, variant)?;
            report.setup_outcomes.push(attack.setup);
            report.login = attack.login;
            report.detected = Some(attack.detected);
            report.captured = attack.captured.keys().cloned().collect();
            if let Err(why) = attack.expectation() {
                check(false, &why);
            }
        }
    }
    check(sim.device.audit_sandbox().is_ok(), "sandbox audit failed");
    check(sim.device.audit_foreground_lock().is_ok(), "foreground lock audit failed");
    for t in sim.transcripts() {
        check(t.is_valid_trace(), "transcript violates message order");
    }

    report.bank_outcomes = sim.bank_outcomes();
    let expected_bank: &[SessionOutcome] = match kind {
        Kind::Honest | Kind::TamperedM5 => &[SessionOutcome::Completed],
        Kind::WrongPin => &[SessionOutcome::ConfirmFailed],
        Kind::ReplayPin => &[SessionOutcome::Completed, SessionOutcome::ConfirmFailed],
        Kind::Attack(..) => &[],
    };
    if !expected_bank.is_empty() {
        check(report.bank_outcomes == expected_bank, "unexpected bank-side outcomes");
    }
    report.failures = failures;
    report.passed = report.failures.is_empty();
    report.transcripts = sim.transcripts().to_vec();
    report.session_bytes = report.transcripts.iter().map(Transcript::total_bytes).collect();
    report.events = sim.device.events_json_lines();
    sim.shutdown();
    Ok(report)
}
