use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "synth.nx=10",
    "synth.ny=10",
    "synth.nz=8",
    "synth.cloud_base=2",
    "synth.max_depth=5",
    "synth.cloud_threshold=0.5",
    "synth.n_timesteps=5",
    "synth.dt=3600",
    "synth.onset_times=3600,7200,10800",
    "train.epochs=1",
    "train.hidden=8",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dropletscope"))
}

fn stage(dir: &Path, name: &str, extra: &[&str]) -> Output {
    let mut cmd = bin();
    cmd.arg("--deterministic").arg(name).arg("--dir").arg(dir);
    for kv in TINY {
        cmd.arg("--set").arg(kv);
    }
    cmd.args(extra).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["gen", "train", "embed", "calibrate", "render", "trace", "compose", "onset"] {
        let out = bin().arg(sub).arg("--help").output().unwrap();
        assert_eq!(code(&out), 0, "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--dir"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stage(tmp.path(), "gen", &["--set", "synth.bogus=1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key synth.bogus"));

    let out = stage(tmp.path(), "gen", &["--set", "train.input_transform=log"]);
    assert_eq!(code(&out), 2);

    let out = stage(tmp.path(), "embed", &[]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = bin().arg("--threads").arg("0").arg("gen").output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn stale_and_corrupt_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&stage(dir, "gen", &[])), 0);
    assert_eq!(code(&stage(dir, "train", &["--epochs", "1"])), 0);
    assert!(dir.join("train/loss.csv").is_file());

    // regenerate with another seed: the trained model no longer matches its data
    assert_eq!(code(&stage(dir, "gen", &["--set", "synth.seed=5"])), 0);
    let out = stage(dir, "embed", &["--set", "synth.seed=5"]);
    assert_eq!(code(&out), 2);

    // a snapshot edited after gen fails the digest check
    assert_eq!(code(&stage(dir, "train", &["--set", "synth.seed=5"])), 0);
    let snap = std::fs::read_dir(dir.join("data/a1"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "dsd"))
        .unwrap();
    let bytes = std::fs::read(&snap).unwrap();
    std::fs::write(&snap, &bytes[..bytes.len() / 2]).unwrap();
    let out = stage(dir, "train", &["--set", "synth.seed=5"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stale input"));
}

#[test]
fn malformed_waypoints_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for name in ["gen", "train", "embed", "calibrate"] {
        assert_eq!(code(&stage(dir, name, &[])), 0, "{name}");
    }
    let wp = dir.join("wp.txt");
    std::fs::write(&wp, "0 0 0\n1 nope 0\n").unwrap();
    let out = stage(dir, "trace", &["--waypoints", wp.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("waypoint line 2"));
}

#[test]
fn config_file_then_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.cfg");
    std::fs::write(&cfg, "# tiny run\nsynth.seed = 3\ntrain.epochs = 4\n").unwrap();
    let dir = tmp.path().join("exp");
    let mut cmd = bin();
    cmd.arg("gen").arg("--dir").arg(&dir).arg("--config").arg(&cfg);
    for kv in TINY {
        cmd.arg("--set").arg(kv);
    }
    let out = cmd.output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = std::fs::read_to_string(dir.join("data/config.resolved.txt")).unwrap();
    assert!(resolved.lines().any(|l| l.replace(' ', "") == "synth.seed=3"), "{resolved}");
    assert!(resolved.lines().any(|l| l.replace(' ', "") == "train.epochs=1"), "{resolved}");
}
