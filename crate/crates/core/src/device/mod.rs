//! Simulated phone: installed apps, sandboxed storage, a foreground manager with
//! the secure attention sequence and foreground lock, and the user.
//!
//! Everything is single-threaded and tick-driven. The only randomness is the
//! device's seeded generator, so a seed fixes the whole event log.

mod screen;
mod sim;
mod user;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attest::{measure_package, Measurement};
use crate::broker::SetupOutcome;

pub use screen::{IndicatorSlot, InputField, Screen};
pub use sim::{
    attacker_package, legit_package, AttackReport, BankLink, LoginOutcome, LoginRun, Phase, SetupRun,
    SimConfig, SimError, Simulation, TamperingDialer, Variant, BANK_DISPLAY_NAME, BANK_HANDLE, BANK_URL,
    USER_ID,
};
pub use user::{Alertness, Check, Credentials, TypedInto, UserAgent};

/// Storage key the Broker writes the released PIN under.
pub const SETUP_PIN_KEY: &str = "setup_pin";
/// Storage key a legit app keeps the user's indicator under.
pub const INDICATOR_KEY: &str = "indicator";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("{actor} may not access storage of {owner}")]
    SandboxDenied { actor: String, owner: String },
    #[error("no app installed with handle {0}")]
    NoSuchApp(String),
    #[error("app handle must be nonempty and contain no ':'")]
    InvalidHandle,
    #[error("manifest handle {manifest} does not match package handle {package}")]
    ManifestMismatch { package: String, manifest: String },
    #[error("the user has no mail")]
    NoMail,
    #[error("setup has not completed for {0}")]
    SetupIncomplete(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Behavior {
    #[serde(rename = "legit")]
    Legit,
    #[serde(rename = "similarity")]
    SimilarityAttacker,
    #[serde(rename = "forwarding")]
    ForwardingAttacker,
    #[serde(rename = "background")]
    BackgroundAttacker,
    #[serde(rename = "notification")]
    NotificationAttacker,
    #[serde(rename = "floating")]
    FloatingAttacker,
}

impl Behavior {
    pub const ATTACKERS: [Behavior; 5] = [
        Behavior::SimilarityAttacker,
        Behavior::ForwardingAttacker,
        Behavior::BackgroundAttacker,
        Behavior::NotificationAttacker,
        Behavior::FloatingAttacker,
    ];

    pub fn is_attacker(self) -> bool {
        self != Behavior::Legit
    }

    /// Short names used on the command line.
    pub fn name(self) -> &'static str {
        match self {
            Behavior::Legit => "legit",
            Behavior::SimilarityAttacker => "similarity",
            Behavior::ForwardingAttacker => "forwarding",
            Behavior::BackgroundAttacker => "background",
            Behavior::NotificationAttacker => "notification",
            Behavior::FloatingAttacker => "floating",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Behavior::Legit]
            .into_iter()
            .chain(Self::ATTACKERS)
            .find(|b| b.name() == name)
    }
}

/// The manifest's `<secureapk>` entry: where the provider is reached, and under which handle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecureApk {
    pub url: String,
    pub handle: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppPackage {
    pub handle: String,
    pub display_name: String,
    #[serde(with = "hex::serde")]
    pub package_bytes: Vec<u8>,
    #[serde(default)]
    pub secureapk: Option<SecureApk>,
}

impl AppPackage {
    pub fn measurement(&self) -> Measurement {
        measure_package(&self.package_bytes)
    }
}

/// A user-chosen image. Only its id ever goes into logs.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Indicator {
    pub image_id: String,
    #[serde(with = "hex::serde")]
    pub blob: Vec<u8>,
}

impl std::fmt::Debug for Indicator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Indicator")
            .field("image_id", &self.image_id)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct InstalledApp {
    pub package: AppPackage,
    pub behavior: Behavior,
    storage: BTreeMap<String, Vec<u8>>,
    plan: AttackPlan,
}

impl InstalledApp {
    pub fn measurement(&self) -> Measurement {
        self.package.measurement()
    }
}

/// What an attacker app shows once it has the screen.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub(crate) struct AttackPlan {
    pub phase: Option<Phase>,
    pub variant: Option<Variant>,
    /// Handle of the legit app this attacker imitates.
    pub target: Option<String>,
    /// Gallery photo shown by the random-image variant.
    pub decoy: Option<Indicator>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Principal {
    Broker,
    App(String),
}

impl std::fmt::Display for Principal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Principal::Broker => f.write_str("broker"),
            Principal::App(handle) => f.write_str(handle),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageOp {
    Read,
    Write,
}

/// Rendered indicator slot as it appears in the log: ids only, never blobs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotSummary {
    None,
    Hidden,
    Image(String),
    Missing,
    Maintenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Installed {
        handle: String,
        behavior: Behavior,
        measurement: Measurement,
        registered_url: Option<String>,
        replaced: bool,
    },
    SasTriggered,
    LockAcquired,
    LockReleased,
    ForegroundChanged { principal: Principal },
    ForegroundDenied { principal: Principal },
    OverlayDrawn { owner: String },
    OverlayDenied { owner: String },
    OverlayRemoved { owner: String },
    NotificationPosted { owner: String },
    NotificationTapped { owner: String },
    Forwarded { owner: String },
    StorageAccess {
        actor: Principal,
        owner: String,
        key: String,
        op: StorageOp,
        granted: bool,
    },
    Rendered {
        handle: String,
        focused: bool,
        indicator: SlotSummary,
        pin_shown: bool,
    },
    BrokerStarted { handle: String },
    BrokerFinished { outcome: SetupOutcome },
    AppLaunched { handle: String },
    MailDelivered,
    UserTyped { target: Principal, field: InputField },
    UserChecked { what: String, checked: bool, accepted: bool },
    UserChoseIndicator { target: String, image_id: String },
    UserAborted,
    LoginStarted { handle: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub tick: u64,
    #[serde(flatten)]
    pub event: Event,
}

/// The Broker's own notice screen. Only the Broker can put text here.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BrokerState {
    active: bool,
    notice: Option<SetupOutcome>,
}

impl BrokerState {
    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn notice(&self) -> Option<SetupOutcome> {
        self.notice
    }
}

const GALLERY_SIZE: usize = 8;

pub struct DeviceState {
    apps: BTreeMap<String, InstalledApp>,
    foreground: Vec<Principal>,
    foreground_locked: bool,
    overlay: Option<String>,
    registry: BTreeMap<String, String>,
    gallery: Vec<Indicator>,
    broker: BrokerState,
    events: Vec<LogEntry>,
    tick: u64,
    rng: ChaCha20Rng,
}

impl DeviceState {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let gallery = (0..GALLERY_SIZE)
            .map(|i| Indicator {
                image_id: format!("photo-{i}"),
                blob: (0..48).map(|_| rng.gen()).collect(),
            })
            .collect();
        Self {
            apps: BTreeMap::new(),
            foreground: Vec::new(),
            foreground_locked: false,
            overlay: None,
            registry: BTreeMap::new(),
            gallery,
            broker: BrokerState::default(),
            events: Vec::new(),
            tick: 0,
            rng,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn events(&self) -> &[LogEntry] {
        &self.events
    }

    pub fn events_json_lines(&self) -> String {
        let mut out = String::new();
        for entry in &self.events {
            out.push_str(&serde_json::to_string(entry).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    pub(crate) fn log(&mut self, event: Event) {
        self.events.push(LogEntry {
            tick: self.tick,
            event,
        });
    }

    /// Advances the clock and records how every legit app currently renders.
    pub fn tick(&mut self) {
        self.tick += 1;
        let legit: Vec<String> = self
            .apps
            .iter()
            .filter(|(_, app)| app.behavior == Behavior::Legit)
            .map(|(h, _)| h.clone())
            .collect();
        for handle in legit {
            let screen = self.render_app(&handle);
            self.log(Event::Rendered {
                handle,
                focused: screen.focused,
                indicator: screen.indicator.summary(),
                pin_shown: screen.pin.is_some(),
            });
        }
    }

    pub fn current_tick(&self) -> u64 {
        self.tick
    }

    pub fn gallery(&self) -> &[Indicator] {
        &self.gallery
    }

    /// Installs or replaces an app. Attackers start dormant.
    pub fn install(&mut self, package: AppPackage, behavior: Behavior) -> Result<(), DeviceError> {
        if package.handle.is_empty() || package.handle.contains(':') {
            return Err(DeviceError::InvalidHandle);
        }
        if let Some(apk) = &package.secureapk {
            if apk.handle != package.handle {
                return Err(DeviceError::ManifestMismatch {
                    package: package.handle.clone(),
                    manifest: apk.handle.clone(),
                });
            }
        }
        let handle = package.handle.clone();
        let replaced = self.apps.remove(&handle).is_some();
        self.registry.remove(&handle);
        let registered_url = package.secureapk.as_ref().map(|apk| apk.url.clone());
        if let Some(url) = &registered_url {
            self.registry.insert(handle.clone(), url.clone());
        }
        let measurement = package.measurement();
        self.apps.insert(
            handle.clone(),
            InstalledApp {
                package,
                behavior,
                storage: BTreeMap::new(),
                plan: AttackPlan::default(),
            },
        );
        self.log(Event::Installed {
            handle,
            behavior,
            measurement,
            registered_url,
            replaced,
        });
        Ok(())
    }

    pub fn app(&self, handle: &str) -> Option<&InstalledApp> {
        self.apps.get(handle)
    }

    pub fn apps(&self) -> impl Iterator<Item = &InstalledApp> {
        self.apps.values()
    }

    pub(crate) fn plan_mut(&mut self, handle: &str) -> Option<&mut AttackPlan> {
        self.apps.get_mut(handle).map(|app| &mut app.plan)
    }

    pub fn registry_url(&self, handle: &str) -> Option<&str> {
        self.registry.get(handle).map(String::as_str)
    }

    /// Measures whatever package is installed under `handle` right now.
    pub fn installed_measurement(&self, handle: &str) -> Option<Measurement> {
        self.apps.get(handle).map(InstalledApp::measurement)
    }

    pub fn foreground(&self) -> Option<&Principal> {
        self.foreground.last()
    }

    pub fn is_locked(&self) -> bool {
        self.foreground_locked
    }

    pub fn overlay(&self) -> Option<&str> {
        self.overlay.as_deref()
    }

    pub fn broker(&self) -> &BrokerState {
        &self.broker
    }

    /// Double home press. Always brings up the Broker and locks the foreground.
    pub fn sas_trigger(&mut self) {
        self.log(Event::SasTriggered);
        if let Some(owner) = self.overlay.take() {
            self.log(Event::OverlayRemoved { owner });
        }
        self.foreground.retain(|p| *p != Principal::Broker);
        self.foreground.push(Principal::Broker);
        self.log(Event::ForegroundChanged {
            principal: Principal::Broker,
        });
        self.foreground_locked = true;
        self.log(Event::LockAcquired);
        self.broker = BrokerState {
            active: true,
            notice: None,
        };
    }

    /// An app asks to become the foreground app. Denied while the lock holds.
    pub fn request_foreground(&mut self, handle: &str) -> bool {
        let principal = Principal::App(handle.to_owned());
        if self.foreground_locked || !self.apps.contains_key(handle) {
            self.log(Event::ForegroundDenied { principal });
            return false;
        }
        self.foreground.retain(|p| *p != principal);
        self.foreground.push(principal.clone());
        self.log(Event::ForegroundChanged { principal });
        true
    }

    /// Draws a transparent input overlay on top of whatever is in front.
    pub fn draw_overlay(&mut self, handle: &str) -> bool {
        let owner = handle.to_owned();
        if self.foreground_locked || !self.apps.contains_key(handle) {
            self.log(Event::OverlayDenied { owner });
            return false;
        }
        self.overlay = Some(owner.clone());
        self.log(Event::OverlayDrawn { owner });
        true
    }

    pub fn remove_overlay(&mut self) {
        if let Some(owner) = self.overlay.take() {
            self.log(Event::OverlayRemoved { owner });
        }
    }

    /// Storage access executed as `actor`. Only the owner gets through.
    pub fn app_get(&mut self, actor: &str, owner: &str, key: &str) -> Result<Option<Vec<u8>>, DeviceError> {
        self.access(Principal::App(actor.to_owned()), owner, key, StorageOp::Read)?;
        Ok(self.apps[owner].storage.get(key).cloned())
    }

    pub fn app_put(&mut self, actor: &str, owner: &str, key: &str, value: Vec<u8>) -> Result<(), DeviceError> {
        self.access(Principal::App(actor.to_owned()), owner, key, StorageOp::Write)?;
        self.apps
            .get_mut(owner)
            .expect("access checked the owner")
            .storage
            .insert(key.to_owned(), value);
        Ok(())
    }

    /// The Broker's trusted write into an app folder.
    pub(crate) fn tcb_write(&mut self, owner: &str, key: &str, value: Vec<u8>) -> Result<(), DeviceError> {
        self.access(Principal::Broker, owner, key, StorageOp::Write)?;
        self.apps
            .get_mut(owner)
            .expect("access checked the owner")
            .storage
            .insert(key.to_owned(), value);
        Ok(())
    }

    fn access(&mut self, actor: Principal, owner: &str, key: &str, op: StorageOp) -> Result<(), DeviceError> {
        if !self.apps.contains_key(owner) {
            return Err(DeviceError::NoSuchApp(owner.to_owned()));
        }
        let granted = match &actor {
            Principal::App(handle) => handle == owner,
            Principal::Broker => op == StorageOp::Write && self.broker.active,
        };
        self.log(Event::StorageAccess {
            actor: actor.clone(),
            owner: owner.to_owned(),
            key: key.to_owned(),
            op,
            granted,
        });
        if granted {
            Ok(())
        } else {
            Err(DeviceError::SandboxDenied {
                actor: actor.to_string(),
                owner: owner.to_owned(),
            })
        }
    }

    /// Everything an app holds in its own folder. For reports and tests.
    pub fn storage_snapshot(&self, handle: &str) -> BTreeMap<String, Vec<u8>> {
        self.apps
            .get(handle)
            .map(|app| app.storage.clone())
            .unwrap_or_default()
    }

    pub(crate) fn broker_notice(&mut self, outcome: SetupOutcome) {
        self.broker.notice = Some(outcome);
    }

    /// Ends the Broker session: drop the lock and leave the foreground.
    pub(crate) fn broker_finish(&mut self, outcome: SetupOutcome) {
        self.broker.active = false;
        self.log(Event::BrokerFinished { outcome });
        if self.foreground_locked {
            self.foreground_locked = false;
            self.log(Event::LockReleased);
        }
        if outcome == SetupOutcome::Success {
            self.foreground.retain(|p| *p != Principal::Broker);
        }
    }

    /// Leaves the Broker's abort notice. The user dismisses it afterwards.
    pub fn dismiss_broker(&mut self) {
        self.broker.notice = None;
        if self.foreground.last() == Some(&Principal::Broker) && !self.broker.active {
            self.foreground.pop();
            let principal = self.foreground.last().cloned();
            if let Some(principal) = principal {
                self.log(Event::ForegroundChanged { principal });
            }
        }
    }

    /// Where typed input lands: an overlay wins over the app beneath it.
    pub fn input_target(&self) -> Option<Principal> {
        match &self.overlay {
            Some(owner) => Some(Principal::App(owner.clone())),
            None => self.foreground.last().cloned(),
        }
    }

    /// What the user sees right now.
    pub fn visible_screen(&self) -> Screen {
        match self.foreground.last() {
            None => Screen::home(),
            Some(Principal::Broker) => Screen::broker(self.broker.notice),
            Some(Principal::App(handle)) => self.render_app(handle),
        }
    }

    /// Renders an app's current screen without side effects.
    pub fn render_app(&self, handle: &str) -> Screen {
        let Some(app) = self.apps.get(handle) else {
            return Screen::home();
        };
        let on_top = self.foreground.last() == Some(&Principal::App(handle.to_owned()));
        let focused = on_top && self.overlay.is_none();
        match app.behavior {
            Behavior::Legit => screen::render_legit(app, &app.storage, focused),
            _ => screen::render_attacker(app, self.imitated(app)),
        }
    }

    fn imitated(&self, app: &InstalledApp) -> Option<&InstalledApp> {
        app.plan.target.as_deref().and_then(|h| self.apps.get(h))
    }

    /// Clears the screen back to the launcher.
    pub fn go_home(&mut self) {
        self.remove_overlay();
        self.foreground.clear();
    }

    pub(crate) fn gallery_pick(&mut self, exclude: Option<&str>) -> Indicator {
        let candidates: Vec<usize> = (0..self.gallery.len())
            .filter(|&i| Some(self.gallery[i].image_id.as_str()) != exclude)
            .collect();
        let i = candidates[self.rng.gen_range(0..candidates.len())];
        self.gallery[i].clone()
    }

    /// Checks the sandbox audit rule: every granted access was by the owner, or a
    /// Broker write.
    pub fn audit_sandbox(&self) -> Result<(), String> {
        for entry in &self.events {
            if let Event::StorageAccess {
                actor,
                owner,
                op,
                granted: true,
                ..
            } = &entry.event
            {
                let ok = match actor {
                    Principal::App(handle) => handle == owner,
                    Principal::Broker => *op == StorageOp::Write,
                };
                if !ok {
                    return Err(format!("tick {}: {actor} reached storage of {owner}", entry.tick));
                }
            }
        }
        Ok(())
    }

    /// Checks that nothing but the Broker took the foreground between the SAS and
    /// the end of the Broker session.
    pub fn audit_foreground_lock(&self) -> Result<(), String> {
        let mut locked = false;
        for entry in &self.events {
            match &entry.event {
                Event::LockAcquired => locked = true,
                Event::LockReleased => locked = false,
                Event::ForegroundChanged { principal } if locked && *principal != Principal::Broker => {
                    return Err(format!("tick {}: {principal} took the foreground under lock", entry.tick));
                }
                Event::OverlayDrawn { owner } if locked => {
                    return Err(format!("tick {}: {owner} drew an overlay under lock", entry.tick));
                }
                _ => {}
            }
        }
        Ok(())
    }
}
