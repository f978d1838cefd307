//! The committed FIX-A fixture and its oracle-derived golden values.
//!
//! The golden file is frozen output of `gen-golden`; these tests recompute
//! every value through the enumeration oracle and compare. Regenerate with
//! `cargo run -p piwo-cli --bin gen-golden` if the fixture tables change.

use std::path::PathBuf;

use piwo_cli::formats::{golden_from_string, load_tabular};
use piwo_cli::verify::fixture_golden_values;
use piwo_core::tabular::TabularModel;

fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

#[test]
fn committed_fixture_matches_the_in_code_tables() {
    let from_file = load_tabular(&fixtures_dir().join("fix_a.tab")).unwrap();
    let from_code = TabularModel::fix_a();
    let a = from_file.tables();
    let b = from_code.tables();
    for (x, y) in a
        .p_z
        .iter()
        .chain(&a.p_y_z)
        .chain(&a.p_x_yz)
        .chain(&a.q_y_x)
        .chain(&a.q_z_x)
        .zip(
            b.p_z
                .iter()
                .chain(&b.p_y_z)
                .chain(&b.p_x_yz)
                .chain(&b.q_y_x)
                .chain(&b.q_z_x),
        )
    {
        assert!((x - y).abs() < 1e-15, "{x} vs {y}");
    }
}

#[test]
fn golden_values_match_the_enumeration_oracle() {
    let model = load_tabular(&fixtures_dir().join("fix_a.tab")).unwrap();
    let golden_text = std::fs::read_to_string(fixtures_dir().join("fix_a.golden")).unwrap();
    let golden = golden_from_string(&golden_text).unwrap();
    let recomputed = fixture_golden_values(&model);
    assert_eq!(golden.len(), recomputed.len(), "golden value count changed");
    for ((gname, gval), (rname, rval)) in golden.iter().zip(&recomputed) {
        assert_eq!(gname, rname, "golden value order changed");
        assert!(
            (gval - rval).abs() < 1e-12,
            "{gname}: frozen {gval} vs recomputed {rval}"
        );
    }
}

#[test]
fn golden_values_satisfy_the_cross_value_identities() {
    // Independent structure checks on the frozen numbers themselves.
    let golden_text = std::fs::read_to_string(fixtures_dir().join("fix_a.golden")).unwrap();
    let golden: std::collections::BTreeMap<String, f64> =
        golden_from_string(&golden_text).unwrap().into_iter().collect();
    for x in 0..2 {
        let log_px = golden[&format!("log_px_x{x}")];
        let elbo = golden[&format!("elbo_unsup_x{x}")];
        let kl_yz = golden[&format!("kl_yz_x{x}")];
        assert!((elbo - (log_px - kl_yz)).abs() < 1e-12);
        let piwo_limit = golden[&format!("piwo_limit_x{x}")];
        let kl_y = golden[&format!("kl_y_x{x}")];
        assert!((piwo_limit - (log_px - kl_y)).abs() < 1e-12);
        // Monotone toward the limit.
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=3 {
            let v = golden[&format!("piwo_k{k}_x{x}")];
            assert!(v >= prev - 1e-12 && v <= piwo_limit + 1e-12);
            prev = v;
        }
        let py: f64 = (0..2)
            .map(|y| golden[&format!("posterior_y{y}_x{x}")])
            .sum();
        assert!((py - 1.0).abs() < 1e-12);
    }
}
