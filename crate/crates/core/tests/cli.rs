mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use simlink::evaluator::parse_report_csv;

const TINY: &str = r#"
seed = 3

[system]
subcarriers = 2
users = 1
user_positions = [[3.0, 0.0, 6.0]]
bits_per_user = [4]

[sim]
layers_tx = 1
layers_rx = 1
units_tx = [3, 3]
units_rx = [3, 3]
antennas_tx = [2, 2]
antennas_rx = [2, 2]

[dpsim]
layers_tx = 1
layers_rx = 1
units_tx = [3, 3]
units_rx = [3, 3]
antennas_tx = [2, 1]
antennas_rx = [2, 1]

[training.pretrain]
epochs = 6
batch_size = 16
checkpoint_every = 3

[training.finetune]
epochs = 4
batch_size = 16

[evaluation]
test_scale = 2000
monte_carlo = 2
powers_dbm = [0.0, 30.0]
chunk = 500

[sweep]
variable = "power_dbm"
modes = ["single", "dual"]
"#;

fn simlink(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_simlink")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).trim().to_string(),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

fn ok(args: &[&str]) -> PathBuf {
    let (code, stdout, stderr) = simlink(args);
    assert_eq!(code, 0, "{args:?}: {stderr}");
    PathBuf::from(stdout)
}

fn setup() -> (tempfile::TempDir, String, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("runs");
    (dir, cfg.display().to_string(), out.display().to_string())
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn train_writes_metrics_checkpoints_and_config() {
    let (_d, cfg, out) = setup();
    let run = ok(&["train", "--config", &cfg, "--out", &out]);
    for f in ["config.toml", "metrics.csv", "checkpoint.json", "checkpoints/epoch-000003.json", "checkpoints/epoch-000006.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let csv = String::from_utf8(read(&run.join("metrics.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(run.file_name().unwrap().to_string_lossy().starts_with("train-"));
}

#[test]
fn every_command_is_deterministic() {
    let (_d, cfg, out) = setup();
    let a = ok(&["train", "--config", &cfg, "--out", &out]);
    let b = ok(&["train", "--config", &cfg, "--out", &out]);
    assert_ne!(a, b);
    assert_eq!(read(&a.join("metrics.csv")), read(&b.join("metrics.csv")));
    assert_eq!(read(&a.join("checkpoint.json")), read(&b.join("checkpoint.json")));

    let ck = a.join("checkpoint.json").display().to_string();
    let f1 = ok(&["finetune", "--config", &cfg, "--out", &out, "--checkpoint", &ck, "--replica", "1"]);
    let f2 = ok(&["finetune", "--config", &cfg, "--out", &out, "--checkpoint", &ck, "--replica", "1"]);
    assert_eq!(read(&f1.join("metrics.csv")), read(&f2.join("metrics.csv")));
    assert_eq!(read(&f1.join("channel.json")), read(&f2.join("channel.json")));

    let e1 = ok(&["evaluate", "--config", &cfg, "--out", &out, "--checkpoint", &ck]);
    let e2 = ok(&["evaluate", "--config", &cfg, "--out", &out, "--checkpoint", &ck]);
    assert_eq!(read(&e1.join("report.csv")), read(&e2.join("report.csv")));

    let x1 = ok(&["export", "--config", &cfg, "--out", &out, "--checkpoint", &ck]);
    let x2 = ok(&["export", "--config", &cfg, "--out", &out, "--checkpoint", &ck]);
    for f in ["bundles/bs.bundle", "bundles/ue-0.bundle", "phase-maps/tx.phasemap", "phase-maps/rx-0.phasemap"] {
        assert_eq!(read(&x1.join(f)), read(&x2.join(f)), "{f}");
    }

    // A different seed changes the result.
    let c = ok(&["train", "--config", &cfg, "--out", &out, "--seed", "99"]);
    assert_ne!(read(&a.join("metrics.csv")), read(&c.join("metrics.csv")));
}

#[test]
fn sweep_and_plot_are_byte_stable() {
    let (_d, cfg, out) = setup();
    let s1 = ok(&["sweep", "--config", &cfg, "--out", &out]);
    let s2 = ok(&["sweep", "--config", &cfg, "--out", &out]);
    assert_eq!(read(&s1.join("report.csv")), read(&s2.join("report.csv")));
    let rows = parse_report_csv(&String::from_utf8(read(&s1.join("report.csv"))).unwrap(), "report").unwrap();
    assert_eq!(rows.len(), 4);

    let report = s1.join("report.csv").display().to_string();
    let p1 = ok(&["plot", "--report", &report, "--out", &out]);
    let p2 = ok(&["plot", "--report", &report, "--out", &out]);
    let svg = read(&p1.join("figure.svg"));
    assert_eq!(svg, read(&p2.join("figure.svg")));
    let svg = String::from_utf8(svg).unwrap();
    assert_eq!(svg.matches("class=\"marker\"").count(), 4);
    assert_eq!(svg.matches("class=\"legend\"").count(), 2);
}

#[test]
fn untrained_model_guesses() {
    let (_d, cfg, out) = setup();
    let run = ok(&[
        "evaluate",
        "--config",
        &cfg,
        "--out",
        &out,
        "--set",
        "training.finetune.epochs=0",
        "--set",
        "evaluation.test_scale=20000",
        "--set",
        "evaluation.monte_carlo=2",
    ]);
    let rows = parse_report_csv(&String::from_utf8(read(&run.join("report.csv"))).unwrap(), "report").unwrap();
    for r in rows {
        assert!(r.bits >= 100_000);
        assert!((r.aggregate_ber - 0.5).abs() <= 0.05, "untrained BER {}", r.aggregate_ber);
    }
}

#[test]
fn exit_codes_distinguish_failures() {
    let (_d, cfg, out) = setup();
    assert_eq!(simlink(&["frobnicate"]).0, 2);
    assert_eq!(simlink(&["train"]).0, 2);
    assert_eq!(simlink(&["train", "--config", "/nonexistent.toml", "--out", &out]).0, 3);
    assert!(!Path::new(&out).exists(), "no run directory for a missing config");
    assert_eq!(simlink(&["train", "--config", &cfg, "--out", &out, "--set", "bogus.key=1"]).0, 3);
    assert_eq!(simlink(&["train", "--config", &cfg, "--out", &out, "--set", "system.users=2"]).0, 4);
    let (code, _, err) = simlink(&["export", "--config", &cfg, "--out", &out, "--checkpoint", "/nonexistent.json"]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("/nonexistent.json"));
}
