use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_walksearch"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn code(args: &[&str]) -> i32 {
    bin().args(args).output().unwrap().status.code().unwrap()
}

#[test]
fn trajectory_output_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "t.toml", "n = 5\nstrategy = \"bounded\"\nxi = 5.0\nsteps = 60\nrecord_dy = true\n");
    let run = |out: &str| {
        let out = dir.path().join(out);
        let st = bin()
            .args(["trajectory", "--config", cfg.to_str().unwrap(), "--index", "7", "--out", out.to_str().unwrap()])
            .status()
            .unwrap();
        assert!(st.success());
        fs::read(out.join("trajectory.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    let (header, rows) = read_csv(&dir.path().join("a/trajectory.csv"));
    assert_eq!(header.len(), 4 + 5 + 2);
    assert_eq!(rows.len(), 61);
}

#[test]
fn unconditional_xy_populations_stay_uniform() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "u.toml", "n = 5\nstrategy = \"none\"\nsteps = 1000\nrecord_stride = 10\n");
    let out = dir.path().join("u");
    let st = bin()
        .args(["unconditional", "--config", cfg.to_str().unwrap(), "--channels", "xy", "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    let (header, rows) = read_csv(&out.join("populations.csv"));
    assert_eq!(header[1], "p_0");
    assert_eq!(rows.len(), 101);
    for r in &rows {
        for p in &r[1..6] {
            assert!((p.parse::<f64>().unwrap() - 0.2).abs() < 1e-6);
        }
    }
}

#[test]
fn simulate_writes_reparseable_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.toml",
        "n = 5\nstrategy = \"analytic_single\"\nsteps = 50\nn_traj = 8\n",
    );
    let out = dir.path().join("s");
    let st = bin()
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    for f in ["ensemble.csv", "couplings.csv", "curvature.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let (header, rows) = read_csv(&out.join("ensemble.csv"));
    assert_eq!(header, ["t", "mean_fidelity", "stderr", "mean_x", "mean_y"]);
    assert_eq!(rows.len(), 51);
    for r in &rows {
        for cell in r {
            let v: f64 = cell.parse().unwrap();
            assert_eq!(format!("{v:.16e}"), *cell);
        }
    }
    let f0: f64 = rows[0][1].parse().unwrap();
    assert!((f0 - 0.2).abs() < 1e-12);

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["command"], "simulate");
    assert_eq!(summary["n_completed"], 8);
    assert_eq!(summary["config"]["n"], 5);
    assert!(summary["version"].is_string());
}

#[test]
fn sweep_writes_one_row_per_xi() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "w.toml", "n = 5\nstrategy = \"bounded\"\nxi = 1.0\nsteps = 30\nn_traj = 4\n");
    let out = dir.path().join("w");
    let st = bin()
        .args(["sweep-xi", "--config", cfg.to_str().unwrap(), "--xi", "1,5,50", "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    let (header, rows) = read_csv(&out.join("sweep.csv"));
    assert_eq!(header[0], "xi");
    let xi: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(xi, vec![1.0, 5.0, 50.0]);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&["simulate", "--config", missing.to_str().unwrap(), "--out", out]), 4);

    let bad = write_config(dir.path(), "bad.toml", "n = 5\nstrategy = \"bounded\"\n");
    assert_eq!(code(&["simulate", "--config", bad.to_str().unwrap(), "--out", out]), 2);

    let unknown = write_config(dir.path(), "unk.toml", "n = 5\nstrategy = \"none\"\nfoo = 1\n");
    assert_eq!(code(&["simulate", "--config", unknown.to_str().unwrap(), "--out", out]), 2);

    let invalid = write_config(dir.path(), "inv.toml", "n = 2\nstrategy = \"none\"\n");
    assert_eq!(code(&["simulate", "--config", invalid.to_str().unwrap(), "--out", out]), 5);

    let xi = write_config(dir.path(), "xi.toml", "n = 5\nstrategy = \"bounded\"\nxi = 0.5\n");
    assert_eq!(code(&["simulate", "--config", xi.to_str().unwrap(), "--out", out]), 5);

    let ok = write_config(dir.path(), "ok.toml", "n = 5\nstrategy = \"none\"\nsteps = 3\nn_traj = 2\n");
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let nested = blocker.join("sub");
    assert_eq!(code(&["simulate", "--config", ok.to_str().unwrap(), "--out", nested.to_str().unwrap()]), 3);
    assert_eq!(code(&["simulate", "--config", ok.to_str().unwrap(), "--out", out]), 0);
}

#[test]
fn checked_in_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            walksearch_cli::parse_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 10);
}
