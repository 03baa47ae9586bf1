use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use sha2::{Digest, Sha256};

fn indicator() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_indicator"));
    cmd.env("RUST_LOG", "info");
    cmd
}

fn run(args: &[&str]) -> Output {
    indicator().args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(store: &Path) -> Server {
    let mut child = indicator()
        .args(["serve", "--listen", "127.0.0.1:0", "--store"])
        .arg(store)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_owned();
    Server { child, addr }
}

fn write_package(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("bank.apk");
    let bytes: Vec<u8> = (0..10_000u32).map(|i| (i * 31 % 251) as u8).collect();
    std::fs::write(&path, bytes).unwrap();
    path
}

fn provision(store: &Path, package: &Path) -> (Output, Option<String>) {
    let out = indicator()
        .args(["provision", "--user", "johndoe", "--handle", "bank", "--store"])
        .arg(store)
        .arg("--package")
        .arg(package)
        .output()
        .unwrap();
    let pin = stdout(&out)
        .lines()
        .find_map(|l| l.strip_prefix("pin: ").map(str::to_owned));
    (out, pin)
}

fn setup(server: &Server, pin: &str, package: &Path) -> Output {
    indicator()
        .args(["setup", "--tag", "bank:johndoe", "--seed", "3", "--connect", &server.addr, "--pin", pin])
        .arg("--package")
        .arg(package)
        .output()
        .unwrap()
}

#[test]
fn provision_prints_pin_and_tag_and_stores_the_package_digest() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.jsonl");
    let package = write_package(dir.path());
    let (out, pin) = provision(&store, &package);
    assert!(out.status.success(), "{}", stderr(&out));
    let pin = pin.unwrap();
    assert_eq!(pin.len(), 5);
    assert!(pin.bytes().all(|b| b.is_ascii_digit()));
    assert!(stdout(&out).contains("service tag: bank:johndoe"));

    let text = std::fs::read_to_string(&store).unwrap();
    let record: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let expected = hex::encode(Sha256::digest(std::fs::read(&package).unwrap()));
    assert_eq!(record["reference_measurement"], expected.as_str());
    assert_eq!(record["consumed"], false);

    let (again, _) = provision(&store, &package);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("johndoe"));
}

#[test]
fn serve_reports_an_empty_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.jsonl");
    let mut child = indicator()
        .args(["serve", "--listen", "127.0.0.1:0", "--store"])
        .arg(&store)
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(line.contains("0 records"), "{line}");
}

#[test]
fn serve_refuses_a_corrupt_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.jsonl");
    let package = write_package(dir.path());
    provision(&store, &package);
    let mut text = std::fs::read_to_string(&store).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&store, text).unwrap();
    let out = indicator()
        .args(["serve", "--listen", "127.0.0.1:0", "--store"])
        .arg(&store)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn pin_is_single_use_across_a_killed_server() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.jsonl");
    let package = write_package(dir.path());
    let (_, pin) = provision(&store, &package);
    let pin = pin.unwrap();

    let server = serve(&store);
    let first = setup(&server, &pin, &package);
    assert!(first.status.success(), "{}{}", stdout(&first), stderr(&first));
    assert!(stdout(&first).contains("outcome: success"));
    assert!(stdout(&first).contains("messages: m1 m2 m3 m4 m5"));
    drop(server);

    let text = std::fs::read_to_string(&store).unwrap();
    let record: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(record["consumed"], true);

    let server = serve(&store);
    let second = setup(&server, &pin, &package);
    assert_eq!(second.status.code(), Some(1));
    assert!(stdout(&second).contains("outcome: abort_pake_failed"));
    assert!(stdout(&second).contains("messages: m1 m2 m3 abort"));
}

#[test]
fn setup_rejects_bad_syntax_before_connecting() {
    let dir = tempfile::tempdir().unwrap();
    let package = write_package(dir.path());
    for (tag, pin) in [("bank", "12345"), ("bank:johndoe", "1234"), ("bank:johndoe", "12a45")] {
        let out = indicator()
            .args(["setup", "--connect", "127.0.0.1:9", "--tag", tag, "--pin", pin])
            .arg("--package")
            .arg(&package)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(2), "{tag} {pin}");
    }
}

#[test]
fn scenario_exit_codes() {
    let ok = run(&["scenario", "honest-setup", "--seed", "4"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).starts_with("honest-setup seed 4: PASS"));

    let unknown = run(&["scenario", "no-such-thing"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(stderr(&unknown).contains("honest-setup"));

    let bad_variant = run(&["scenario", "floating-login", "--variant", "sparkly"]);
    assert_eq!(bad_variant.status.code(), Some(2));

    let list = run(&["scenario", "--list"]);
    assert!(list.status.success());
    assert_eq!(stdout(&list).lines().count(), 12);
}

#[test]
fn scenario_outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let status = indicator()
            .args(["scenario", "random-image-login", "--seed", "17", "--out"])
            .arg(out)
            .output()
            .unwrap()
            .status;
        assert!(status.success());
    }
    for file in ["transcript.jsonl", "events.jsonl", "summary.json"] {
        let left = std::fs::read(a.join(file)).unwrap();
        assert!(!left.is_empty(), "{file}");
        assert_eq!(left, std::fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn scenario_config_file_and_env() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(&config, r#"{"scenario": "wrong-pin", "seed": 12}"#).unwrap();
    let out = run(&["scenario", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("wrong-pin seed 12: PASS"));

    let out = indicator()
        .args(["scenario", "--config", config.to_str().unwrap()])
        .env("INDICATOR_SEED", "13")
        .output()
        .unwrap();
    assert!(stdout(&out).starts_with("wrong-pin seed 13: PASS"));

    std::fs::write(&config, r#"{"scenario": "wrong-pin", "colour": "red"}"#).unwrap();
    assert_eq!(run(&["scenario", "--config", config.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn help_lists_environment_variables() {
    for sub in ["serve", "provision", "scenario", "setup"] {
        let out = run(&[sub, "--help"]);
        assert!(stdout(&out).contains("INDICATOR_"), "{sub}");
    }
}
