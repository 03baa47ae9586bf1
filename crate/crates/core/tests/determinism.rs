use indicator_core::scenario::{names, run_scenario, ScenarioConfig, ScenarioReport, TransportChoice};

fn outputs(report: &ScenarioReport) -> (String, String, String) {
    (report.summary_json(), report.transcript_json_lines(), report.events.clone())
}

fn run(name: &str, seed: u64, transport: TransportChoice) -> ScenarioReport {
    let mut config = ScenarioConfig::new(name, seed);
    config.transport = transport;
    run_scenario(&config).unwrap()
}

fn local_tcp() -> TransportChoice {
    TransportChoice::Tcp("127.0.0.1:0".parse().unwrap())
}

#[test]
fn same_seed_same_outputs_for_every_scenario() {
    for name in names() {
        let first = run(name, 5, TransportChoice::InProc);
        let second = run(name, 5, TransportChoice::InProc);
        assert!(first.passed, "{name}: {:?}", first.failures);
        assert_eq!(outputs(&first), outputs(&second), "{name}");
    }
}

#[test]
fn tcp_and_inproc_agree() {
    for name in ["honest-setup", "wrong-pin", "floating-login", "replay-pin"] {
        let inproc = run(name, 9, TransportChoice::InProc);
        let tcp = run(name, 9, local_tcp());
        assert!(tcp.passed, "{name}: {:?}", tcp.failures);
        assert_eq!(outputs(&inproc), outputs(&tcp), "{name}");
    }
}

#[test]
fn different_seeds_change_the_transcript() {
    let a = run("honest-setup", 1, TransportChoice::InProc);
    let b = run("honest-setup", 2, TransportChoice::InProc);
    assert_ne!(a.transcript_json_lines(), b.transcript_json_lines());
}
