use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"name = "small"
seed = 11

[model]
preset = "constant"

[time]
t0 = 0.0
t1 = 0.5
steps = 1000

[lattice]
n_xi = 65
n_nu = 65
n_std = 4.0

[particles]
ks = 2000
oracle = 2000

[observable]
id = "one"
"#;

fn kinfilt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinfilt"))
        .current_dir(dir)
        .env_remove("KINFILT_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup(body: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), body).unwrap();
    dir
}

fn data_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn simulate_is_reproducible() {
    let dir = setup(SMALL);
    let args = ["--config", "small.toml", "--out", "o", "simulate", "--paths", "2"];
    assert!(kinfilt(dir.path(), &args).status.success());
    let first = std::fs::read(dir.path().join("o/simulate.csv")).unwrap();
    assert!(kinfilt(dir.path(), &args).status.success());
    assert_eq!(first, std::fs::read(dir.path().join("o/simulate.csv")).unwrap());

    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("# kinfilt "));
    assert!(text.contains("# command: kinfilt --config small.toml"));
    assert!(text.contains("#   preset = \"constant\""));
    let rows = data_rows(&dir.path().join("o/simulate.csv"));
    assert_eq!(rows[0], ["path", "step", "t", "x", "v", "y", "rho", "tilde_w"]);
    assert_eq!(rows.len(), 1 + 2 * 1001);
}

#[test]
fn seed_flag_changes_the_path() {
    let dir = setup(SMALL);
    let run = |seed: &str, out: &str| {
        assert!(kinfilt(dir.path(), &["--config", "small.toml", "--seed", seed, "--out", out, "simulate"]).status.success());
        data_rows(&dir.path().join(out).join("simulate.csv"))
    };
    assert_ne!(run("1", "a")[10], run("2", "b")[10]);
}

#[test]
fn forward_filter_of_one_is_one() {
    let dir = setup(SMALL);
    let out = kinfilt(dir.path(), &["--config", "small.toml", "--out", "o", "filter-forward"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&dir.path().join("o/filter_forward.csv"));
    let col = rows[0].iter().position(|c| c == "value").unwrap();
    let value: f64 = rows[1][col].parse().unwrap();
    assert!((value - 1.0).abs() < 1e-12, "{value}");
    assert!(dir.path().join("o/filter_forward_density.csv").exists());
}

#[test]
fn unknown_key_exits_with_usage_error() {
    let dir = setup(&SMALL.replace("n_std = 4.0", "n_std = 4.0\nwidth = 3"));
    let out = kinfilt(dir.path(), &["--config", "small.toml", "--out", "o", "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("small.toml") && err.contains("line 16"), "{err}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn output_dir_comes_from_the_environment() {
    let dir = setup(SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_kinfilt"))
        .current_dir(dir.path())
        .env("KINFILT_OUT", "from-env")
        .args(["--config", "small.toml", "simulate"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from-env/simulate.csv").exists());
}

#[test]
fn quick_verify_subset_passes() {
    let dir = setup(SMALL);
    let out = kinfilt(dir.path(), &["--out", "o", "verify", "--quick", "--criteria", "2,8"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("criterion 2") && stdout.contains("criterion 8"));
    assert!(!stdout.contains("criterion 5"));
    let rows = data_rows(&dir.path().join("o/verify.csv"));
    assert_eq!(rows.len(), 3);
}
