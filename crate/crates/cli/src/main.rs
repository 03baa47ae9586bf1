use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use indicator_core::attest::measure_package;
use indicator_core::bank::{serve, BankError, BankService, ProvisionStore};
use indicator_core::broker::{self, parse_service_tag};
use indicator_core::device::{Alertness, AppPackage, Behavior, DeviceState, SecureApk, Variant};
use indicator_core::scenario::{self, ScenarioConfig, ScenarioError, ScenarioFile, TransportChoice, SCENARIOS};
use indicator_core::wire::{TcpDialer, UserId};
use rand::rngs::OsRng;
use rand::RngCore;

/// Attested PIN provisioning for personalized security indicators.
///
/// Every flag can also be set through an environment variable with the
/// INDICATOR_ prefix, shown next to each flag.
#[derive(Parser)]
#[command(name = "indicator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the bank service on a provisioning store.
    Serve {
        /// Line-delimited JSON provisioning store.
        #[arg(long, env = "INDICATOR_STORE")]
        store: PathBuf,
        /// Address to listen on.
        #[arg(long, env = "INDICATOR_LISTEN", default_value = "127.0.0.1:7878")]
        listen: String,
        /// Sessions served at once; more connections wait in the backlog.
        #[arg(long, env = "INDICATOR_CONCURRENCY", default_value_t = 4)]
        concurrency: usize,
    },
    /// Create a user record and print the PIN and service tag to mail out.
    Provision {
        #[arg(long, env = "INDICATOR_STORE")]
        store: PathBuf,
        #[arg(long, env = "INDICATOR_USER")]
        user: String,
        /// Application handle, as in the app's manifest.
        #[arg(long, env = "INDICATOR_HANDLE")]
        handle: String,
        /// The app package; its SHA-256 becomes the reference measurement.
        #[arg(long, env = "INDICATOR_PACKAGE")]
        package: PathBuf,
    },
    /// Run a built-in end-to-end scenario and check its expectation.
    ///
    /// Exit status is 0 if the expectation holds, 1 if not, 2 on a
    /// configuration error.
    Scenario(ScenarioArgs),
    /// Run the Broker side of setup against a bank service over TCP.
    Setup {
        /// Bank address, host:port.
        #[arg(long, env = "INDICATOR_CONNECT")]
        connect: String,
        /// Service tag from the mail, handle:user.
        #[arg(long, env = "INDICATOR_TAG")]
        tag: String,
        #[arg(long, env = "INDICATOR_PIN")]
        pin: String,
        /// Package installed on the simulated device under the tag's handle.
        #[arg(long, env = "INDICATOR_PACKAGE")]
        package: PathBuf,
        /// Device RNG seed. Random if omitted.
        #[arg(long, env = "INDICATOR_SEED")]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario name; see --list.
    name: Option<String>,
    /// List scenarios and exit.
    #[arg(long)]
    list: bool,
    /// Scenario definition file (JSON). Flags override its fields.
    #[arg(long, env = "INDICATOR_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "INDICATOR_SEED")]
    seed: Option<u64>,
    /// inproc, or tcp:HOST:PORT to run a bank server there and dial it.
    #[arg(long, env = "INDICATOR_TRANSPORT")]
    transport: Option<TransportChoice>,
    /// always, never, or p=<probability>.
    #[arg(long, env = "INDICATOR_ALERTNESS")]
    alertness: Option<Alertness>,
    /// similarity, forwarding, background, notification or floating.
    #[arg(long, env = "INDICATOR_ATTACKER", value_parser = parse_behavior)]
    attacker: Option<Behavior>,
    /// missing-image, random-image or maintenance.
    #[arg(long, env = "INDICATOR_VARIANT", value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Directory for transcript.jsonl, events.jsonl and summary.json.
    #[arg(long, env = "INDICATOR_OUT")]
    out: Option<PathBuf>,
}

fn parse_behavior(s: &str) -> Result<Behavior, String> {
    Behavior::from_name(s).ok_or_else(|| format!("unknown attacker {s:?}"))
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::from_name(s).ok_or_else(|| format!("unknown variant {s:?}"))
}

const DEFAULT_SEED: u64 = 7;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Serve {
            store,
            listen,
            concurrency,
        } => cmd_serve(&store, &listen, concurrency),
        Command::Provision {
            store,
            user,
            handle,
            package,
        } => cmd_provision(&store, &user, &handle, &package),
        Command::Scenario(args) => cmd_scenario(args),
        Command::Setup {
            connect,
            tag,
            pin,
            package,
            seed,
        } => cmd_setup(&connect, &tag, &pin, &package, seed),
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn cmd_serve(store_path: &Path, listen: &str, concurrency: usize) -> ExitCode {
    let store = match ProvisionStore::open(store_path) {
        Ok(store) => store,
        Err(err) => return fail(2, err),
    };
    log::info!("{}: {} records", store_path.display(), store.len());
    let listener = match TcpListener::bind(listen) {
        Ok(l) => l,
        Err(err) => return fail(2, format!("bind {listen}: {err}")),
    };
    if let Ok(addr) = listener.local_addr() {
        println!("listening on {addr}");
        let _ = std::io::stdout().flush();
    }
    let bank = Arc::new(BankService::new(store, OsRng));
    match serve(bank, listener, concurrency) {
        Ok(never) => match never {},
        Err(err) => fail(2, err),
    }
}

fn cmd_provision(store_path: &Path, user: &str, handle: &str, package: &Path) -> ExitCode {
    let user_id = match UserId::new(user) {
        Ok(u) => u,
        Err(err) => return fail(2, err),
    };
    let bytes = match std::fs::read(package) {
        Ok(b) => b,
        Err(err) => return fail(2, format!("{}: {err}", package.display())),
    };
    let mut store = match ProvisionStore::open(store_path) {
        Ok(store) => store,
        Err(err) => return fail(2, err),
    };
    match store.provision_user(user_id, handle, measure_package(&bytes), &mut OsRng) {
        Ok((pin, tag)) => {
            println!("pin: {}", pin.expose());
            println!("service tag: {tag}");
            ExitCode::SUCCESS
        }
        Err(err @ BankError::DuplicateUser(_)) => fail(1, err),
        Err(err) => fail(2, err),
    }
}

fn scenario_config(args: ScenarioArgs) -> Result<(ScenarioConfig, Option<PathBuf>), ScenarioError> {
    let file = match &args.config {
        Some(path) => ScenarioFile::load(path)?,
        None => ScenarioFile::default(),
    };
    let name = args
        .name
        .or(file.scenario)
        .ok_or_else(|| ScenarioError::Config("no scenario named; try --list".into()))?;
    let mut config = ScenarioConfig::new(&name, args.seed.or(file.seed).unwrap_or(DEFAULT_SEED));
    config.transport = args.transport.or(file.transport).unwrap_or_default();
    config.alertness = args.alertness.or(file.alertness).unwrap_or(Alertness::AlwaysChecks);
    config.attacker = args.attacker.or(file.attacker);
    config.variant = args.variant.or(file.variant);
    config.apps = file.apps;
    Ok((config, args.out.or(file.out)))
}

fn cmd_scenario(args: ScenarioArgs) -> ExitCode {
    if args.list {
        for s in SCENARIOS {
            println!("{:<22}{}", s.name, s.description);
        }
        return ExitCode::SUCCESS;
    }
    let (config, out) = match scenario_config(args) {
        Ok(c) => c,
        Err(err) => return fail(2, err),
    };
    let report = match scenario::run_scenario(&config) {
        Ok(r) => r,
        Err(err) => return fail(2, err),
    };
    if let Some(dir) = &out {
        if let Err(err) = report.write_outputs(dir) {
            return fail(2, err);
        }
    }
    let outcomes: Vec<String> = report
        .setup_outcomes
        .iter()
        .map(|o| o.map_or("none".to_owned(), |o| o.to_string()))
        .collect();
    println!(
        "{} seed {}: {} (setup: {}; bytes: {:?})",
        report.scenario,
        report.seed,
        if report.passed { "PASS" } else { "FAIL" },
        outcomes.join(", "),
        report.session_bytes
    );
    for failure in &report.failures {
        println!("  {failure}");
    }
    if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_setup(connect: &str, tag_text: &str, pin: &str, package: &Path, seed: Option<u64>) -> ExitCode {
    let tag = match parse_service_tag(tag_text) {
        Ok(t) => t,
        Err(err) => return fail(2, err),
    };
    let bytes = match std::fs::read(package) {
        Ok(b) => b,
        Err(err) => return fail(2, format!("{}: {err}", package.display())),
    };
    let mut device = DeviceState::new(seed.unwrap_or_else(|| OsRng.next_u64()));
    let app = AppPackage {
        handle: tag.handle().to_owned(),
        display_name: tag.handle().to_owned(),
        package_bytes: bytes,
        secureapk: Some(SecureApk {
            url: connect.to_owned(),
            handle: tag.handle().to_owned(),
        }),
    };
    if let Err(err) = device.install(app, Behavior::Legit) {
        return fail(2, err);
    }
    device.sas_trigger();
    let result = match broker::submit(&mut device, tag_text, pin, &TcpDialer::new()) {
        Ok(r) => r,
        Err(err) => return fail(2, err),
    };
    println!("outcome: {}", result.outcome);
    println!("messages: {}", result.transcript.kinds().join(" "));
    if result.outcome == broker::SetupOutcome::Success {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
