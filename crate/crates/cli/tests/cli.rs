use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn prml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prml")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

const AR1: &str = r#"
[model]
family = "ar1"
free = ["phi"]
theta0 = [0.1]
param_box = [[-0.95, 0.95]]
truth = [0.6]

[model.box]
state = [-10.0, 10.0]
obs = [-15.0, 15.0]

[model.constants]
sigma_v = 1.0
sigma_w = 1.0

[smc]
particles = 30
seed = 4

[schedule]
scale = 0.5
exponent = 0.7

[io]
observations = "obs.csv"
output = "trace.jsonl"
"#;

const GRID_STUDY: &str = r#"
[model]
family = "ar1"
free = ["phi"]
theta0 = [0.6]
param_box = [[-0.95, 0.95]]
grid_points = 5

[model.box]
state = [-2.0, 2.0]
obs = [-5.0, 5.0]

[model.constants]
sigma_v = 1.0
sigma_w = 0.5

[smc]
particles = 20
seed = 9

[schedule]
scale = 0.5
exponent = 0.7

[study]
particles = [20, 40]
seeds = 10
horizon = 6
"#;

fn write_config(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn simulate_writes_one_row_per_step_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "ar1.toml", AR1);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = prml(&["simulate", "--config", &cfg, "--steps", "10", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().all(|l| l.split(',').count() == 1 && l.parse::<f64>().is_ok()));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let states = fs::read_to_string(dir.path().join("a.states.csv")).unwrap();
    assert_eq!(states.lines().count(), 11);

    let c = dir.path().join("c.csv");
    let o = prml(&["simulate", "--config", &cfg, "--steps", "10", "--seed", "5", "--out", c.to_str().unwrap()]);
    assert!(o.status.success());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn missing_state_box_is_named() {
    let dir = TempDir::new().unwrap();
    let text = AR1.replace("[model.box]\nstate = [-10.0, 10.0]\nobs = [-15.0, 15.0]\n", "");
    let cfg = write_config(&dir, "nobox.toml", &text);
    let o = prml(&["simulate", "--config", &cfg, "--steps", "10"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("model.box"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "typo.toml", &AR1.replace("seed = 4", "seed = 4\npartciles = 3"));
    let o = prml(&["fit", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("partciles"), "{}", stderr(&o));
}

#[test]
fn fit_on_the_bundled_config_writes_one_record_per_update() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("trace.jsonl");
    let o = prml(&["fit", "--config", bundled("ar1_fit.toml").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let obs = fs::read_to_string(bundled("data/ar1_obs.csv")).unwrap().lines().count();
    let trace = fs::read_to_string(&out).unwrap();
    assert_eq!(trace.lines().count(), obs - 1);
    assert!(trace.lines().all(|l| l.starts_with("{\"n\":")));
    assert!(stdout(&o).contains("final theta"));

    let again = dir.path().join("again.jsonl");
    let o = prml(&["fit", "--config", bundled("ar1_fit.toml").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn fit_rejects_observations_of_the_wrong_width() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "ar1.toml", AR1);
    fs::write(dir.path().join("obs.csv"), "0.1,0.2\n0.3,0.4\n").unwrap();
    let o = prml(&["fit", "--config", &cfg]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("2 columns") && err.contains("expected 1"), "{err}");
}

#[test]
fn fit_rejects_a_start_outside_the_parameter_box() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "ar1.toml", &AR1.replace("theta0 = [0.1]", "theta0 = [1.5]"));
    fs::write(dir.path().join("obs.csv"), "0.1\n0.3\n").unwrap();
    let o = prml(&["fit", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("model.theta0"), "{}", stderr(&o));
}

#[test]
fn simulate_then_fit_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "ar1.toml", AR1);
    let o = prml(&["simulate", "--config", &cfg, "--steps", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = prml(&["fit", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("trace.jsonl")).unwrap().lines().count(), 49);
    let o = prml(&["fit", "--config", &cfg, "--steps", "20", "--particles", "5"]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("trace.jsonl")).unwrap().lines().count(), 19);
    let o = prml(&["fit", "--config", &cfg, "--steps", "80"]);
    assert!(!o.status.success());
}

#[test]
fn bias_study_prints_a_table_and_slope() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "grid.toml", GRID_STUDY);
    let out = dir.path().join("bias.csv");
    let o = prml(&["study", "--study", "bias", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("N=20") && text.contains("N=40"), "{text}");
    assert!(text.contains("log-log slope"), "{text}");
    assert!(text.contains("at half the horizon (3)"), "{text}");
    let table = fs::read_to_string(&out).unwrap();
    assert!(table.starts_with("n_particles,bias_norm,stderr"));
    assert_eq!(table.lines().count(), 3);
    assert_eq!(fs::read_to_string(dir.path().join("bias.jsonl")).unwrap().lines().count(), 2);
    assert!(dir.path().join("bias.half_horizon.csv").exists());
}

#[test]
fn bias_study_needs_ten_seeds_and_a_grid() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "few.toml", &GRID_STUDY.replace("seeds = 10", "seeds = 1"));
    let out = dir.path().join("bias.csv");
    let o = prml(&["study", "--study", "bias", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("seeds"), "{}", stderr(&o));

    let continuous = GRID_STUDY.replace("grid_points = 5\n", "");
    let cfg = write_config(&dir, "cont.toml", &continuous);
    let o = prml(&["study", "--study", "bias", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unsupported study"), "{}", stderr(&o));
}

#[test]
fn tail_study_needs_a_trace_or_run_parameters() {
    let dir = TempDir::new().unwrap();
    let text = format!("{AR1}\n[study]\nseeds = 10\n");
    let cfg = write_config(&dir, "tail.toml", &text);
    let out = dir.path().join("tail.csv");
    let o = prml(&["study", "--study", "tail", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("study.trace"), "{}", stderr(&o));
}

#[test]
fn tail_study_on_an_existing_trace() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "ar1.toml", AR1);
    assert!(prml(&["simulate", "--config", &cfg, "--steps", "200"]).status.success());
    assert!(prml(&["fit", "--config", &cfg]).status.success());
    let text = format!("{AR1}\n[study]\ntrace = \"trace.jsonl\"\nheld_out = 2000\nevaluations = 10\n");
    let cfg = write_config(&dir, "tail.toml", &text);
    let out = dir.path().join("tail.csv");
    let o = prml(&["study", "--study", "tail", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("tail |grad|"));
    let table = fs::read_to_string(&out).unwrap();
    assert!(table.starts_with("n_particles,mean_gradient_norm"));
    assert_eq!(table.lines().count(), 2);
}
