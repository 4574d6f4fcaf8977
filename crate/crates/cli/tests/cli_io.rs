//! End-to-end behavior of the command-line pipeline: artifact emission,
//! validation failures and their exit codes, and format handling.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use adrsim_cli::output::OutputFormat;
use adrsim_cli::{run, Cli, Command, RunError};

fn cli(command: Command, out: &Path, seed: u64) -> Cli {
    Cli {
        command,
        config: None,
        seed,
        out: out.to_path_buf(),
        format: OutputFormat::Csv,
    }
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

/// Small scenario so pipeline tests stay fast.
const SMALL_CONFIG: &str = r#"{
    "customers": {"count": 8},
    "events": {"count": 8},
    "attack": {"horizon": 12, "max_iters": 400}
}"#;

#[test]
fn synth_emits_existing_artifacts_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let report = run(&cli(Command::Synth, dir.path(), 3)).unwrap();
    assert_eq!(report.subcommand, "synth");
    assert!(!report.artifacts.is_empty());
    for artifact in &report.artifacts {
        assert!(Path::new(artifact).exists(), "missing artifact {artifact}");
    }
    assert!(dir.path().join("report.json").exists());
    assert_eq!(report.config.customers.count, 50);
    assert_eq!(report.input_hash.len(), 64);
}

#[test]
fn incentive_on_explicit_instance_matches_frozen_values() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"incentive": {"betas": [[1.0, 0.0], [1.0, 0.0]], "kappa": 1.0, "gamma": 0.0, "commitment_kw": 10.0}}"#,
    );
    let mut cli = cli(Command::Incentive { history: None }, dir.path(), 1);
    cli.config = Some(config);
    let report = run(&cli).unwrap();
    let text = fs::read_to_string(dir.path().join("incentive.json")).unwrap();
    assert!(text.contains("3.33333333"), "broadcast value missing: {text}");
    assert_eq!(report.summary["lambda_hat"], 1.66666667);
}

#[test]
fn value_events_covers_every_event_with_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"customers": {"count": 3}, "events": {"count": 5}, "valuation": {"customer": 1}}"#,
    );
    let mut cli = cli(
        Command::ValueEvents {
            history: None,
            m_permutations: Some(5000),
        },
        dir.path(),
        9,
    );
    cli.config = Some(config);
    let report = run(&cli).unwrap();
    assert_eq!(report.summary["permutations"], 5000);
    let values = fs::read_to_string(dir.path().join("event_values_customer_1.csv")).unwrap();
    assert_eq!(values.lines().count(), 6, "header plus five events");
    let convergence =
        fs::read_to_string(dir.path().join("value_convergence_customer_1.csv")).unwrap();
    assert!(convergence.lines().count() > 1);
}

#[test]
fn learn_round_trips_through_a_saved_history() {
    let dir = tempfile::tempdir().unwrap();
    let synth_report = run(&cli(Command::Synth, dir.path(), 11)).unwrap();
    let history = dir.path().join("history.csv");
    assert!(synth_report.artifacts.iter().any(|a| a.ends_with("history.csv")));

    let out2 = tempfile::tempdir().unwrap();
    let report = run(&cli(
        Command::Learn {
            history: Some(history),
        },
        out2.path(),
        11,
    ))
    .unwrap();
    assert_eq!(report.summary["customers"], 50);
    assert_eq!(report.summary["events"], 20);
    assert!(out2.path().join("estimates.csv").exists());
}

#[test]
fn malformed_history_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let history = dir.path().join("history.csv");
    fs::write(
        &history,
        "event_index,lambda_usd_per_kwh,customer_id,curtailment_kw\n0,1.5,0,-4.0\n",
    )
    .unwrap();
    let err = run(&cli(
        Command::Learn {
            history: Some(history),
        },
        dir.path(),
        1,
    ))
    .unwrap_err();
    assert!(matches!(err, RunError::Validation(_)));
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("line"), "should name the line: {err}");
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"customers": {"count": "many"}}"#);
    let mut cli = cli(Command::Synth, dir.path(), 1);
    cli.config = Some(config);
    let err = run(&cli).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"customer": {"count": 5}}"#);
    let mut cli = cli(Command::Synth, dir.path(), 1);
    cli.config = Some(config);
    assert_eq!(run(&cli).unwrap_err().exit_code(), 2);
}

#[test]
fn unwritable_output_directory_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "file").unwrap();
    let err = run(&cli(Command::Synth, &blocker.join("out"), 1)).unwrap_err();
    assert!(matches!(err, RunError::Runtime(_)));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn infeasible_scenario_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"customers": {"beta1_range": [2.0, 80.0]}}"#);
    let mut cli = cli(Command::Synth, dir.path(), 1);
    cli.config = Some(config);
    assert_eq!(run(&cli).unwrap_err().exit_code(), 2);
}

#[test]
fn json_format_emits_json_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut cli = cli(Command::Learn { history: None }, dir.path(), 5);
    cli.format = OutputFormat::Json;
    let config = write_config(
        dir.path(),
        r#"{"customers": {"count": 4}, "events": {"count": 6}}"#,
    );
    cli.config = Some(config);
    run(&cli).unwrap();
    let text = fs::read_to_string(dir.path().join("estimates.json")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["columns"][0], "customer_id");
    assert_eq!(doc["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn small_replication_chain_completes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{
            "customers": {"count": 6},
            "events": {"count": 8},
            "attack": {"horizon": 10, "max_iters": 200},
            "valuation": {"m_permutations": 500}
        }"#,
    );
    let mut cli = cli(Command::ReplicateCaseStudy, dir.path(), 17);
    cli.config = Some(config);
    let report = run(&cli).unwrap();
    for artifact in &report.artifacts {
        assert!(Path::new(artifact).exists(), "missing {artifact}");
    }
    for name in [
        "history.csv",
        "scenario.json",
        "estimates.csv",
        "loss_curve.csv",
        "customer_values.csv",
        "attack_trace.csv",
        "attack_plan.json",
        "monetary.json",
        "demand_profile.csv",
        "relay_trips.json",
    ] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    // No duplicate artifact entries after the chained stages.
    let unique: BTreeSet<&String> = report.artifacts.iter().collect();
    assert_eq!(unique.len(), report.artifacts.len());
}

#[test]
fn attack_flags_override_the_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    let mut cli = cli(
        Command::Attack {
            horizon: Some(9),
            compromised_frac: Some(0.5),
        },
        dir.path(),
        23,
    );
    cli.config = Some(config);
    let report = run(&cli).unwrap();
    assert_eq!(report.config.attack.horizon, 9);
    assert_eq!(report.config.attack.compromised_frac, 0.5);
    assert_eq!(report.summary["plan"]["horizon_len"], 9);
    assert_eq!(report.summary["plan"]["compromised"].as_array().unwrap().len(), 4);
}
