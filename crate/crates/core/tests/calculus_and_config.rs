use kinfilt::bito::{backward_integral, forward_integral};
use kinfilt::config::ScenarioConfig;
use kinfilt::io::{read_table, write_artifact, Manifest, Table};
use kinfilt::rng::NormalStream;
use kinfilt::verify::shipped_scenarios;
use proptest::prelude::*;

#[test]
fn shipped_scenarios_round_trip() {
    for cfg in shipped_scenarios().unwrap() {
        let text = cfg.to_toml();
        assert_eq!(ScenarioConfig::parse(&text).unwrap(), cfg);
        cfg.coefficients().unwrap();
        assert_eq!(cfg.grid().unwrap().n_steps, 1000);
    }
}

#[test]
fn unknown_keys_are_rejected_with_a_line() {
    let text = "seed = 1\n\n[model]\npreset = \"constant\"\nfriction = 2.0\n";
    let err = ScenarioConfig::parse(text).unwrap_err().to_string();
    assert!(err.contains("line 5"), "{err}");
}

#[test]
fn artifacts_are_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ScenarioConfig::for_preset("sinusoidal", 4).unwrap();
    let m = Manifest::new("simulate", &cfg.to_toml(), &[]);
    let mut t = Table::new(&["k", "x"]);
    let mut s = NormalStream::new(4, 0, 0);
    for k in 0..50 {
        t.push(vec![k.to_string(), kinfilt::io::fmt_f64(s.next_normal())]);
    }
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_artifact(&a, &m, &t).unwrap();
    write_artifact(&b, &m, &t).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let back = read_table(&a).unwrap();
    for (row, orig) in back.rows.iter().zip(&t.rows) {
        assert_eq!(row[1].parse::<f64>().unwrap().to_bits(), orig[1].parse::<f64>().unwrap().to_bits());
    }
}

proptest! {
    // Right minus left endpoint sums is exactly the discrete covariation.
    #[test]
    fn endpoint_sums_differ_by_covariation(seed in 0u64..1000, n in 2usize..200) {
        let mut s = NormalStream::new(seed, 0, 0);
        let w: Vec<f64> = std::iter::once(0.0).chain((0..n).scan(0.0, |acc, _| { *acc += s.next_normal(); Some(*acc) })).collect();
        let u: Vec<f64> = w.iter().map(|x| x.sin()).collect();
        let back = backward_integral(&u, &w, 1.0).unwrap().value;
        let fwd = forward_integral(&u, &w).unwrap();
        let cov: f64 = u.windows(2).zip(w.windows(2)).map(|(a, b)| (a[1] - a[0]) * (b[1] - b[0])).sum();
        prop_assert!((back - fwd - cov).abs() < 1e-9 * (1.0 + cov.abs()));
    }

    #[test]
    fn config_seed_and_steps_round_trip(seed in any::<u64>(), half in 1usize..5000) {
        let mut cfg = ScenarioConfig::for_preset("constant", seed).unwrap();
        cfg.time.steps = 2 * half;
        let back = ScenarioConfig::parse(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
