//! Verification suites: identities, bounds, and gradient estimators, run
//! against fresh random models plus the committed fixture.
//!
//! Each check is named; a suite fails on its first violated invariant and
//! the report is emitted in a machine-readable `status\tname\tdetail` form.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use piwo_core::fm;
use piwo_core::gradients::{
    exact_batch_node, finite_difference_check, grad, GradientEstimatorKind,
};
use piwo_core::hybrid::HybridModel;
use piwo_core::objectives::{
    batch_objective, exact_item_bound, semi_supervised_objective, EstKind, Flavor, ObjectiveSpec,
    VariationalModel,
};
use piwo_core::rng::SplitMix64;
use piwo_core::tabular::TabularModel;
use piwo_core::tape::Tape;

use crate::formats::load_tabular;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub suite: &'static str,
    pub checks: Vec<Check>,
    pub elapsed_secs: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.passed)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "ok" } else { "FAIL" };
            let _ = writeln!(out, "{status}\t{}::{}\t{}", self.suite, c.name, c.detail);
        }
        let _ = writeln!(
            out,
            "{}\t{}::summary\t{} checks, {:.2}s",
            if self.passed() { "ok" } else { "FAIL" },
            self.suite,
            self.checks.len(),
            self.elapsed_secs
        );
        out
    }
}

struct Suite {
    name: &'static str,
    checks: Vec<Check>,
    started: Instant,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checks: Vec::new(),
            started: Instant::now(),
        }
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    /// Record a max-residual style check against a bound.
    fn residual(&mut self, name: &str, worst: f64, bound: f64) {
        self.check(
            name,
            worst < bound,
            format!("worst {worst:.3e} (bound {bound:.0e})"),
        );
    }

    fn finish(self) -> Report {
        Report {
            suite: self.name,
            checks: self.checks,
            elapsed_secs: self.started.elapsed().as_secs_f64(),
        }
    }
}

fn random_models(n: usize, seed: u64) -> Vec<TabularModel> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let nz = 2 + rng.below(2);
            let ny = 2 + rng.below(2);
            let nx = 2 + rng.below(2);
            TabularModel::random(nz, ny, nx, 1.0, &mut rng)
        })
        .collect()
}

fn load_fixture(suite: &mut Suite, fixture: Option<&Path>) -> Option<TabularModel> {
    match fixture {
        None => Some(TabularModel::fix_a()),
        Some(path) => match load_tabular(path) {
            Ok(m) => Some(m),
            Err(e) => {
                suite.check("fixture-valid", false, e.to_string());
                None
            }
        },
    }
}

/// ELBO identities and KL structure on the fixture and 100 random models.
pub fn verify_identities(fixture: Option<&Path>) -> Report {
    let mut s = Suite::new("identities");

    if let Some(fix) = load_fixture(&mut s, fixture) {
        let mut worst = 0.0f64;
        for x in 0..fix.nx() {
            worst = worst.max(fix.exact_elbo_identity_check(x, None).unwrap());
            for y in 0..fix.ny() {
                worst = worst.max(fix.exact_elbo_identity_check(x, Some(y)).unwrap());
            }
        }
        s.residual("fixture-elbo-identity-residual", worst, 1e-10);
    }

    let models = random_models(100, 0x1dea);
    let mut worst_sup = 0.0f64;
    let mut worst_unsup = 0.0f64;
    let mut kl_ok = true;
    let mut posterior_ok = true;
    for m in &models {
        worst_unsup = worst_unsup.max(m.exact_elbo_identity_check(0, None).unwrap());
        worst_sup = worst_sup.max(m.exact_elbo_identity_check(0, Some(0)).unwrap());
        let kl = m.exact_kl_terms(0, 0).unwrap();
        kl_ok &= !kl.support_violation
            && kl.kl_yz >= -1e-12
            && kl.kl_y >= -1e-12
            && kl.kl_z >= -1e-12
            && kl.kl_z_given_xy >= -1e-12
            && kl.kl_yz >= kl.kl_y - 1e-10
            && kl.kl_yz >= kl.kl_z - 1e-10;
        let post = m.exact_posterior(0).unwrap();
        let total: f64 = post.joint.iter().sum();
        posterior_ok &= fm::abs(total - 1.0) < 1e-12;
    }
    s.residual("random-supervised-identity-residual", worst_sup, 1e-10);
    s.residual("random-unsupervised-identity-residual", worst_unsup, 1e-10);
    s.check(
        "kl-nonnegative-and-chain-dominated",
        kl_ok,
        format!("{} models", models.len()),
    );
    s.check(
        "posterior-normalized",
        posterior_ok,
        format!("{} models", models.len()),
    );
    s.finish()
}

/// Bound sandwich, monotonicity in k, limits, and the k = 1 collapse.
pub fn verify_bounds(fixture: Option<&Path>) -> Report {
    let mut s = Suite::new("bounds");

    let models = random_models(100, 0xb0d);
    let mut sandwich_ok = true;
    let mut monotone_ok = true;
    let mut worst_limit_gap = 0.0f64;
    for m in &models {
        let x = 0;
        let log_px = m.exact_log_px(x);
        let piwo_lim = m.piwo_limit(x).unwrap();
        let ipiwo_lim = m.ipiwo_limit(x).unwrap();
        worst_limit_gap = worst_limit_gap
            .max(fm::abs(piwo_lim - m.piwo_limit_via_conditional(x)))
            .max(fm::abs(ipiwo_lim - m.ipiwo_limit_via_conditional(x)));
        let elbo = m.exact_elbo_unsupervised(x);
        let mut prev = [f64::NEG_INFINITY; 3];
        for k in 1..=4 {
            let iwae = m.exact_iwae_unsupervised(x, k);
            let piwo = m.exact_piwo(x, k);
            let ipiwo = m.exact_ipiwo(x, k);
            sandwich_ok &= elbo <= iwae + 1e-10
                && iwae <= log_px + 1e-10
                && piwo <= piwo_lim + 1e-10
                && ipiwo <= ipiwo_lim + 1e-10;
            monotone_ok &=
                iwae >= prev[0] - 1e-10 && piwo >= prev[1] - 1e-10 && ipiwo >= prev[2] - 1e-10;
            prev = [iwae, piwo, ipiwo];
        }
    }
    s.check(
        "sandwich-elbo-iwae-logpx-and-limits",
        sandwich_ok,
        format!("{} models, k <= 4", models.len()),
    );
    s.check(
        "monotone-in-k",
        monotone_ok,
        format!("{} models, k <= 4", models.len()),
    );
    s.residual("limit-two-routes-agree", worst_limit_gap, 1e-10);

    // Zero-KL configuration: bounds are tight for every k.
    let mut rng = SplitMix64::seed_from_u64(0x2e80);
    let mut tight_ok = true;
    for _ in 0..10 {
        let m = TabularModel::random_with_factorizing_posterior(2, 2, 2, 1.0, &mut rng);
        for x in 0..m.nx() {
            let log_px = m.exact_log_px(x);
            for k in 1..=3 {
                tight_ok &= fm::abs(m.exact_piwo(x, k) - log_px) < 1e-10
                    && fm::abs(m.exact_ipiwo(x, k) - log_px) < 1e-10
                    && fm::abs(m.exact_iwae_unsupervised(x, k) - log_px) < 1e-10;
            }
        }
    }
    s.check(
        "posterior-q-bounds-tight-for-all-k",
        tight_ok,
        "10 factorizing models, k <= 3".to_string(),
    );

    if let Some(fix) = load_fixture(&mut s, fixture) {
        // Monte Carlo k = 1 collapse across flavors, bitwise on a shared seed.
        let x0 = 0usize;
        let x1 = 1usize;
        let labeled = [(&x0, 1usize)];
        let unlabeled = [&x1, &x0];
        let mut bits = Vec::new();
        for flavor in [Flavor::Vae, Flavor::Piwo, Flavor::Ipiwo, Flavor::Iwae] {
            let spec = ObjectiveSpec::new(flavor, 1, 1.0);
            let mut rng = SplitMix64::seed_from_u64(0xc0);
            let est = semi_supervised_objective(&fix, &labeled, &unlabeled, &spec, &mut rng)
                .unwrap();
            bits.push(est.value.to_bits());
        }
        s.check(
            "k1-collapse-bitwise",
            bits.iter().all(|b| *b == bits[0]),
            format!("values {bits:?}"),
        );

        // Exact tape mode equals the plain enumeration oracle.
        let mut worst = 0.0f64;
        for flavor in [Flavor::Vae, Flavor::Piwo, Flavor::Ipiwo, Flavor::Iwae] {
            for k in 1..=3 {
                let spec = ObjectiveSpec::new(flavor, k, 1.0);
                let mut t = Tape::new(fix.params());
                let node = exact_item_bound(&mut t, &fix, &x0, None, &spec).unwrap();
                let want = fix.exact_bound_expectation(&spec, x0, None, 1 << 20).unwrap();
                worst = worst.max(fm::abs(t.scalar_val(node) - want));
            }
        }
        s.residual("exact-tape-vs-oracle", worst, 1e-10);
    }
    s.finish()
}

/// Exact-enumeration gradients vs finite differences, pinned-seed pathwise
/// differentiation, and a quick statistical unbiasedness screen.
pub fn verify_gradients() -> Report {
    let mut s = Suite::new("gradients");

    // Tabular exact gradients against central differences.
    let mut rng = SplitMix64::seed_from_u64(0x9d);
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let mut m = TabularModel::random(2, 2, 2, 0.8, &mut rng);
        let x0 = 0usize;
        let x1 = 1usize;
        let labeled = [(&x0, 1usize)];
        let unlabeled = [&x1];
        for flavor in [Flavor::Vae, Flavor::Piwo, Flavor::Ipiwo, Flavor::Iwae] {
            let spec = ObjectiveSpec::new(flavor, 2, 0.5).with_beta(0.9);
            let report = grad(
                &m,
                &labeled,
                &unlabeled,
                &spec,
                GradientEstimatorKind::ExactEnumeration,
                0,
                false,
            )
            .unwrap();
            let spec2 = spec.clone();
            let err = finite_difference_check(
                &mut m,
                TabularModel::params_mut,
                |mm| {
                    let mut t = Tape::new(mm.params());
                    let node = exact_batch_node(&mut t, mm, &labeled, &unlabeled, &spec2).unwrap();
                    t.scalar_val(node)
                },
                &report.grads,
                1e-5,
                1e-8,
                1000,
                0,
            )
            .unwrap();
            worst = worst.max(err);
        }
    }
    s.residual("tabular-exact-vs-finite-differences", worst, 1e-6);

    // Hybrid (quadrature) exact gradients against central differences.
    let mut m = HybridModel::random(0.6, &mut SplitMix64::seed_from_u64(0x71));
    let x0 = 0.7f64;
    let x1 = -0.3f64;
    let labeled = [(&x0, 1usize)];
    let unlabeled = [&x1];
    let mut worst = 0.0f64;
    for flavor in [Flavor::Vae, Flavor::Piwo, Flavor::Ipiwo, Flavor::Iwae] {
        let spec = ObjectiveSpec::new(flavor, 2, 0.5).with_beta(0.8);
        let report = grad(
            &m,
            &labeled,
            &unlabeled,
            &spec,
            GradientEstimatorKind::ExactEnumeration,
            0,
            false,
        )
        .unwrap();
        let spec2 = spec.clone();
        let err = finite_difference_check(
            &mut m,
            HybridModel::params_mut,
            |mm| {
                let mut t = Tape::new(mm.params());
                let node = exact_batch_node(&mut t, mm, &labeled, &unlabeled, &spec2).unwrap();
                t.scalar_val(node)
            },
            &report.grads,
            1e-5,
            1e-8,
            1000,
            0,
        )
        .unwrap();
        worst = worst.max(err);
    }
    s.residual("hybrid-exact-vs-finite-differences", worst, 1e-6);

    // Pinned-seed pathwise estimate is exactly differentiated.
    let spec = ObjectiveSpec::new(Flavor::Piwo, 5, 0.4);
    let seed = 77u64;
    let report = grad(
        &m,
        &labeled,
        &unlabeled,
        &spec,
        GradientEstimatorKind::Pathwise,
        seed,
        false,
    )
    .unwrap();
    let spec2 = spec.clone();
    let err = finite_difference_check(
        &mut m,
        HybridModel::params_mut,
        |mm| {
            let mut t = Tape::new(mm.params());
            batch_objective(
                &mut t,
                mm,
                &labeled,
                &unlabeled,
                &spec2,
                EstKind::Pathwise,
                seed,
                false,
            )
            .unwrap()
            .value
        },
        &report.grads,
        1e-5,
        1e-8,
        1000,
        0,
    )
    .unwrap();
    s.residual("pinned-seed-pathwise-vs-finite-differences", err, 1e-4);

    // Quick statistical screen: estimator means vs the exact gradient.
    let spec = ObjectiveSpec::new(Flavor::Iwae, 2, 0.0);
    let exact = grad(
        &m,
        &[],
        &unlabeled,
        &spec,
        GradientEstimatorKind::ExactEnumeration,
        0,
        false,
    )
    .unwrap();
    for kind in [
        GradientEstimatorKind::Pathwise,
        GradientEstimatorKind::Dreg,
        GradientEstimatorKind::ScoreFunction,
    ] {
        let n = 4000;
        let np = exact.grads.data().len();
        let mut sum = vec![0.0; np];
        let mut sq = vec![0.0; np];
        for draw in 0..n {
            let r = grad(
                &m,
                &[],
                &unlabeled,
                &spec,
                kind,
                SplitMix64::derive(0x5eed, draw as u64),
                false,
            )
            .unwrap();
            for (i, g) in r.grads.data().iter().enumerate() {
                sum[i] += g;
                sq[i] += g * g;
            }
        }
        let mut ok = true;
        let mut worst_z = 0.0f64;
        for i in 0..np {
            let mean = sum[i] / n as f64;
            let var = (sq[i] / n as f64 - mean * mean).max(0.0);
            let se = fm::sqrt(var / n as f64) + 1e-12;
            let z = fm::abs(mean - exact.grads.data()[i]) / se;
            worst_z = worst_z.max(z);
            ok &= z < 5.0;
        }
        s.check(
            &format!("unbiased-{kind:?}-5-sigma-screen"),
            ok,
            format!("worst |z| {worst_z:.2} over {np} coords, {n} draws"),
        );
    }
    s.finish()
}

/// Run the named suites.
pub fn run_suites(which: &str, fixture: Option<&Path>) -> Result<Vec<Report>, String> {
    match which {
        "identities" => Ok(vec![verify_identities(fixture)]),
        "bounds" => Ok(vec![verify_bounds(fixture)]),
        "gradients" => Ok(vec![verify_gradients()]),
        "all" => Ok(vec![
            verify_identities(fixture),
            verify_bounds(fixture),
            verify_gradients(),
        ]),
        other => Err(format!("unknown suite {other:?} (identities|bounds|gradients|all)")),
    }
}

/// Golden values derived from a fixture by the enumeration oracle. The
/// regeneration binary freezes these to disk; the golden tests recompute
/// and compare.
pub fn fixture_golden_values(m: &TabularModel) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for x in 0..m.nx() {
        out.push((format!("log_px_x{x}"), m.exact_log_px(x)));
        out.push((format!("elbo_unsup_x{x}"), m.exact_elbo_unsupervised(x)));
        out.push((format!("piwo_limit_x{x}"), m.piwo_limit(x).unwrap()));
        out.push((format!("ipiwo_limit_x{x}"), m.ipiwo_limit(x).unwrap()));
        for y in 0..m.ny() {
            out.push((format!("log_pxy_x{x}_y{y}"), m.exact_log_pxy(x, y)));
            out.push((format!("elbo_sup_x{x}_y{y}"), m.exact_elbo_supervised(x, y)));
        }
        let kl = m.exact_kl_terms(x, 0).unwrap();
        out.push((format!("kl_yz_x{x}"), kl.kl_yz));
        out.push((format!("kl_z_given_xy0_x{x}"), kl.kl_z_given_xy));
        out.push((format!("kl_y_x{x}"), kl.kl_y));
        out.push((format!("kl_z_x{x}"), kl.kl_z));
        let post = m.exact_posterior(x).unwrap();
        for y in 0..m.ny() {
            out.push((format!("posterior_y{y}_x{x}"), post.marginal_y[y]));
        }
        for k in 1..=3 {
            out.push((format!("iwae_unsup_k{k}_x{x}"), m.exact_iwae_unsupervised(x, k)));
            out.push((format!("iwae_sup_k{k}_x{x}_y0"), m.exact_iwae_supervised(x, 0, k)));
            out.push((format!("piwo_k{k}_x{x}"), m.exact_piwo(x, k)));
            out.push((format!("ipiwo_k{k}_x{x}"), m.exact_ipiwo(x, k)));
        }
    }
    out
}
