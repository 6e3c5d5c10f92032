use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn smp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smp"))
        .args(args)
        .output()
        .expect("spawn smp")
}

fn run_in(dir: &Path, command: &str, config: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    let mut args = vec![
        command,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    smp(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Numeric CSV cells; flags and blanks read as NaN.
fn rows(path: &Path) -> Vec<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(|f| f.parse().unwrap_or(f64::NAN)).collect())
        .collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_writes_every_path_and_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), "simulate", "n_paths = 5\nn_steps = 10\nn_state = 3\n", &[]);
    assert!(o.status.success(), "{}", stdout(&o));
    let data = rows(&dir.path().join("out/states.csv"));
    assert_eq!(data.len(), 5 * 11);
    // path, step, t and three modes
    assert!(data.iter().all(|r| r.len() == 6));
    let first = &data[0];
    assert_eq!(&first[3..], &[1.0, 0.5, 1.0 / 3.0]);
}

#[test]
fn zero_noise_paths_coincide() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        "simulate",
        "n_paths = 4\nn_steps = 8\nzero_noise = true\n",
        &[],
    );
    assert!(o.status.success());
    let data = rows(&dir.path().join("out/states.csv"));
    let per_path = data.len() / 4;
    for p in 1..4 {
        for i in 0..per_path {
            assert_eq!(&data[i][1..], &data[p * per_path + i][1..]);
        }
    }
    let cost = json(&dir.path().join("out/cost.json"));
    assert_eq!(cost["std_error"], 0.0);
}

#[test]
fn adjoint_vanishes_without_terminal_weight() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        "adjoint",
        "n_paths = 50\nn_steps = 10\nterminal_weight = 0.0\n",
        &[],
    );
    assert!(o.status.success(), "{}", stdout(&o));
    let data = rows(&dir.path().join("out/adjoint.csv"));
    assert!(data.iter().all(|r| r[3..].iter().all(|v| *v == 0.0)));
}

#[test]
fn quadratic_terminal_cost_gives_nonzero_z() {
    // noise enters through the control, so the box keeps ν₀ away from zero
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        "adjoint",
        "scenario = \"lq-quadratic-phi\"\nn_paths = 400\nn_steps = 10\ncontrol_lo = 0.5\ncontrol_hi = 1.0\n",
        &[],
    );
    assert!(o.status.success(), "{}", stdout(&o));
    let report = json(&dir.path().join("out/adjoint_report.json"));
    assert!(report["z_max_abs"].as_f64().unwrap() > 1e-3, "{report}");
    assert!(report["noise_floor"].as_f64().unwrap() > 0.0);
    // both solvers regress on 400 paths, so they agree to sampling error only
    let dev = report["max_y_deviation_explicit"].as_f64().unwrap();
    assert!(
        dev > 0.0 && dev < 0.2 * report["y_max_abs"].as_f64().unwrap(),
        "{report}"
    );
}

#[test]
fn linear_lq_adjoint_reports_analytic_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), "adjoint", "n_paths = 100\nn_steps = 20\n", &[]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("adjoint_analytic"));
    let dev = rows(&dir.path().join("out/adjoint_deviation.csv"));
    assert_eq!(dev.len(), 21);
    assert!(dev.iter().all(|r| r[4] <= 1e-6));
}

#[test]
fn epsilon_ladder_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        "verify",
        "n_state = 4\nn_paths = 200\nn_steps = 20\n",
        &["--epsilons", "0.4,0.2,0.1,0.05"],
    );
    assert!(
        o.status.code().is_some_and(|c| c <= 1),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let data = rows(&dir.path().join("out/rate_o_eps2.csv"));
    assert_eq!(data.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![0.4, 0.2, 0.1, 0.05]);
    let manifest = json(&dir.path().join("out/manifest.json"));
    assert_eq!(manifest["config"]["epsilons"][0], 0.4);
}

#[test]
fn bad_epsilon_ladder_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), "verify", "n_paths = 20\n", &["--epsilons", "0.1,0.2,0.05"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epsilons"));
}

#[test]
fn zero_iterations_return_the_initial_control() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        "optimize",
        "n_paths = 30\nn_steps = 10\n",
        &["--max-iters", "0"],
    );
    assert_eq!(o.status.code(), Some(1), "a zero control is not optimal");
    let control = rows(&dir.path().join("out/control.csv"));
    assert_eq!(control.len(), 10);
    assert!(control.iter().all(|r| r[3..].iter().all(|v| *v == 0.0)));
    let trace = rows(&dir.path().join("out/trace.csv"));
    assert_eq!(trace.len(), 1);
}

#[test]
fn boxed_controls_stay_admissible() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        "optimize",
        "scenario = \"tanh-drift\"\nn_paths = 200\nn_steps = 20\ncontrol_lo = -0.1\ncontrol_hi = 0.1\n",
        &[],
    );
    let text = stdout(&o);
    assert!(text.contains("admissible               PASS"), "{text}");
    let control = rows(&dir.path().join("out/control.csv"));
    assert!(control.iter().all(|r| r[3..].iter().all(|v| (-0.1..=0.1).contains(v))));
    // the bound is active somewhere, so the box matters
    assert!(control
        .iter()
        .any(|r| r[3..].iter().any(|v| (v.abs() - 0.1).abs() < 1e-12)));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), "simulate", "n_paths = 10\nn_pahts = 3\n", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_pahts"));
    assert!(!dir.path().join("out/manifest.json").exists());
}

#[test]
fn unknown_mutation_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), "adjoint", "n_paths = 10\n", &["--mutate", "flip-sign"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn manifest_hashes_match_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = "n_paths = 20\nn_steps = 5\nseed = 3\n";
    let o = run_in(dir.path(), "simulate", config, &[]);
    assert!(o.status.success());
    let out = dir.path().join("out");
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["command"], "simulate");
    // git blob hash of the config file
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", config.len()).as_bytes());
    h.update(config.as_bytes());
    let expected: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(manifest["config_hash"], expected.as_str());
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for entry in outputs {
        let name = entry["file"].as_str().unwrap();
        let digest: String = Sha256::digest(std::fs::read(out.join(name)).unwrap())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(entry["sha256"], digest.as_str(), "{name}");
    }
}

#[test]
fn seed_changes_the_noise_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let fp = |seed: &str| {
        let o = run_in(dir.path(), "simulate", "n_paths = 10\nn_steps = 5\n", &["--seed", seed]);
        assert!(o.status.success());
        json(&dir.path().join("out/manifest.json"))["noise_fingerprint"]
            .as_str()
            .unwrap()
            .to_string()
    };
    let (a, b, c) = (fp("1"), fp("2"), fp("1"));
    assert_eq!(a, c);
    assert_ne!(a, b);
}

#[test]
fn mutants_fail_verification_on_the_nonlinear_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        "verify",
        "scenario = \"tanh-drift\"\nn_paths = 500\n",
        &["--mutate", "drop-sigma-nu-term"],
    );
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    for check in ["derivative_selftest", "duality", "maximum_principle"] {
        let line = text.lines().find(|l| l.starts_with(check)).unwrap();
        assert!(line.contains("FAIL"), "{line}");
    }
    let manifest = json(&dir.path().join("out/manifest.json"));
    assert_eq!(manifest["mutation"], "drop-sigma-nu-term");
    assert_eq!(manifest["pass"], false);
}
