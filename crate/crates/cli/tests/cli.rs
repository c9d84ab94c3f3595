use std::process::Command;

const CONFIG: &str = r#"
name = "cli"
estimators = ["qnomp", "omp_finegrid"]
snr_grid_db = [10.0]
trials = 2
bandwidth_factors = [0, 1]
seed = 2

[channel]
m = 8
n = 8
delta_f = 240e3

[scenario]
kind = "multipath"
c1 = 2.0
c2 = 1.0
n_paths = 2
"#;

fn qnomp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qnomp"))
}

#[test]
fn run_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    let out = dir.path().join("out.csv");
    std::fs::write(&cfg, CONFIG).unwrap();
    let status = qnomp().arg("run").arg(&cfg).arg("--out").arg(&out).output().unwrap().status;
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(lines[0].starts_with("estimator,scenario,snr_db"));
    assert!(lines[1].starts_with("qnomp,cli,"));
}

#[test]
fn overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    let out = dir.path().join("o.csv");
    std::fs::write(&cfg, CONFIG).unwrap();
    let status = qnomp()
        .args(["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--trials", "1", "--seed", "9", "--estimators", "nomp"])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.starts_with("nomp,") && r.ends_with(",1,0")));
}

#[test]
fn bad_configs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, format!("{CONFIG}\nunknown_key = true\n")).unwrap();
    let out = qnomp().arg("run").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));

    std::fs::write(&cfg, CONFIG).unwrap();
    let out = qnomp().args(["run", cfg.to_str().unwrap(), "--estimators", "nope"]).output().unwrap();
    assert!(!out.status.success());

    let out = qnomp().args(["run", "/nonexistent.toml"]).output().unwrap();
    assert!(!out.status.success());
    assert!(!qnomp().output().unwrap().status.success());
}
