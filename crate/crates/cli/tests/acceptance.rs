//! Acceptance suite: every release criterion as one test, each printing a
//! `ACCEPT-n ... PASS` line (run with `--nocapture` to see them).
//!
//!   cargo test -p piwo-cli --test acceptance -- --test-threads=1 --nocapture
//!
//! Criteria 6-8 share four desk-scale training experiments on the SYN-A
//! fixture; those run once behind a lock. The suite asserts directional
//! patterns and exact identities only — paper-scale magnitudes are out of
//! scope by design.

use std::sync::OnceLock;
use std::time::Instant;

use piwo_core::data::{generate_synthetic, supervision_subset, Dataset, SyntheticSpec};
use piwo_core::fm;
use piwo_core::gradients::{
    exact_batch_node, finite_difference_check, grad, GradientEstimatorKind,
};
use piwo_core::hybrid::HybridModel;
use piwo_core::neural::{NeuralConfig, NeuralModel};
use piwo_core::objectives::{semi_supervised_objective, Flavor, ObjectiveSpec};
use piwo_core::rng::SplitMix64;
use piwo_core::tabular::TabularModel;
use piwo_core::tape::Tape;
use piwo_core::training::{
    alpha_sweep, cross_split_evaluate, default_estimator, CrossSplitResult, TrainConfig,
};

const SYN_A_SEED: u64 = 20260808;
const LSR_RATE: f64 = 0.005;
const EXPERIMENT_ALPHA: f64 = 10.0;

fn pass(n: u32, what: &str, detail: String, started: Instant, budget_secs: f64) {
    let elapsed = started.elapsed().as_secs_f64();
    println!("ACCEPT-{n} {what}: PASS ({detail}; {elapsed:.1}s of {budget_secs:.0}s budget)");
    assert!(
        elapsed < budget_secs,
        "ACCEPT-{n} exceeded its runtime budget: {elapsed:.1}s >= {budget_secs}s"
    );
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

#[test]
fn accept_1_identity_suite() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for m in random_models(100, 0xACC1) {
        // Supervised and unsupervised ELBO identities plus the generic
        // ELBO-equals-loglik-minus-KL identity they instantiate.
        for x in 0..m.nx() {
            worst = worst.max(m.exact_elbo_identity_check(x, None).unwrap());
            for y in 0..m.ny() {
                worst = worst.max(m.exact_elbo_identity_check(x, Some(y)).unwrap());
            }
        }
    }
    assert!(worst < 1e-10, "ACCEPT-1 FAIL: worst residual {worst}");
    pass(
        1,
        "identity suite (100 random models)",
        format!("worst residual {worst:.2e} < 1e-10"),
        started,
        30.0,
    );
}

#[test]
fn accept_2_k1_collapse() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut rng = SplitMix64::seed_from_u64(0xACC2);
    for trial in 0..20 {
        let m = TabularModel::random(2, 2, 3, 1.0, &mut rng);
        let x0 = 0usize;
        let x1 = 1usize;
        let x2 = 2usize;
        let labeled = [(&x0, 1usize), (&x2, 0usize)];
        let unlabeled = [&x1, &x0];
        let mut values = Vec::new();
        for flavor in [Flavor::Vae, Flavor::Piwo, Flavor::Ipiwo, Flavor::Iwae] {
            let spec = ObjectiveSpec::new(flavor, 1, 1.0);
            let mut r = SplitMix64::seed_from_u64(1000 + trial);
            values.push(
                semi_supervised_objective(&m, &labeled, &unlabeled, &spec, &mut r)
                    .unwrap()
                    .value,
            );
        }
        for v in &values {
            worst = worst.max(fm::abs(v - values[0]));
        }
    }
    assert!(
        worst < 1e-12,
        "ACCEPT-2 FAIL: flavors disagree at k=1 by {worst}"
    );
    pass(
        2,
        "k=1 collapse of SSPIWO/SSiPIWO/SSIWAE/-J^alpha",
        format!("worst gap {worst:.2e} < 1e-12"),
        started,
        10.0,
    );
}

#[test]
fn accept_3_bound_sandwich_and_monotonicity() {
    let started = Instant::now();
    let mut checked = 0usize;
    for m in random_models(100, 0xACC3) {
        let x = 0;
        let log_px = m.exact_log_px(x);
        let piwo_lim = m.piwo_limit(x).unwrap();
        let ipiwo_lim = m.ipiwo_limit(x).unwrap();
        let elbo = m.exact_elbo_unsupervised(x);
        let mut prev = [f64::NEG_INFINITY; 3];
        for k in 1..=4 {
            let iwae = m.exact_iwae_unsupervised(x, k);
            let piwo = m.exact_piwo(x, k);
            let ipiwo = m.exact_ipiwo(x, k);
            assert!(
                elbo <= iwae + 1e-10 && iwae <= log_px + 1e-10,
                "ACCEPT-3 FAIL: ELBO <= IWAE_{k} <= log p(x) violated"
            );
            assert!(
                piwo <= piwo_lim + 1e-10,
                "ACCEPT-3 FAIL: PIWO_{k} above its KL_y limit"
            );
            assert!(
                ipiwo <= ipiwo_lim + 1e-10,
                "ACCEPT-3 FAIL: iPIWO_{k} above its KL_z limit"
            );
            assert!(
                iwae >= prev[0] - 1e-10 && piwo >= prev[1] - 1e-10 && ipiwo >= prev[2] - 1e-10,
                "ACCEPT-3 FAIL: monotonicity in k violated at k={k}"
            );
            prev = [iwae, piwo, ipiwo];
            checked += 3;
        }
    }
    pass(
        3,
        "bound sandwich + monotonicity (exact, k<=4, 100 models)",
        format!("{checked} exact bounds, zero statistical tolerance"),
        started,
        300.0,
    );
}

#[test]
fn accept_4_limits_with_factorizing_posterior() {
    let started = Instant::now();
    let mut rng = SplitMix64::seed_from_u64(0xACC4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m = TabularModel::random_with_factorizing_posterior(2, 2, 2, 1.0, &mut rng);
        for x in 0..m.nx() {
            let log_px = m.exact_log_px(x);
            for k in 1..=4 {
                worst = worst.max(fm::abs(m.exact_piwo(x, k) - log_px));
                worst = worst.max(fm::abs(m.exact_ipiwo(x, k) - log_px));
            }
        }
    }
    assert!(worst < 1e-10, "ACCEPT-4 FAIL: limit gap {worst}");
    pass(
        4,
        "PIWO_k = iPIWO_k = log p(x) at a factorizing true posterior",
        format!("worst gap {worst:.2e} < 1e-10, k <= 4"),
        started,
        30.0,
    );
}

#[test]
fn accept_5_gradient_suite() {
    let started = Instant::now();

    // Exact-enumeration gradients vs central finite differences.
    let mut worst_fd = 0.0f64;
    {
        let mut rng = SplitMix64::seed_from_u64(0xACC5);
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
                    let mut t = Tape::new(piwo_core::objectives::VariationalModel::params(mm));
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
            worst_fd = worst_fd.max(err);
        }
        let mut h = HybridModel::random(0.6, &mut rng);
        let hx0 = 0.7f64;
        let hx1 = -0.4f64;
        let hlabeled = [(&hx0, 1usize)];
        let hunlabeled = [&hx1];
        for flavor in [Flavor::Vae, Flavor::Piwo, Flavor::Ipiwo, Flavor::Iwae] {
            let spec = ObjectiveSpec::new(flavor, 2, 0.5).with_beta(0.8);
            let report = grad(
                &h,
                &hlabeled,
                &hunlabeled,
                &spec,
                GradientEstimatorKind::ExactEnumeration,
                0,
                false,
            )
            .unwrap();
            let spec2 = spec.clone();
            let err = finite_difference_check(
                &mut h,
                HybridModel::params_mut,
                |mm| {
                    let mut t = Tape::new(piwo_core::objectives::VariationalModel::params(mm));
                    let node =
                        exact_batch_node(&mut t, mm, &hlabeled, &hunlabeled, &spec2).unwrap();
                    t.scalar_val(node)
                },
                &report.grads,
                1e-5,
                1e-8,
                1000,
                0,
            )
            .unwrap();
            worst_fd = worst_fd.max(err);
        }
    }
    assert!(
        worst_fd < 1e-6,
        "ACCEPT-5 FAIL: exact gradient vs finite differences {worst_fd}"
    );

    // Statistical suite: each estimator's 1e5-sample mean per seed lands
    // within 3 standard errors of the exact gradient for >= 95% of
    // (seed, coordinate) pairs, per estimator x objective combination.
    let model = HybridModel::random(0.5, &mut SplitMix64::seed_from_u64(0xACC5 + 1));
    let x = 0.6f64;
    let unlabeled = [&x];
    let n_draws = 100_000usize;
    let n_seeds = 20usize;
    let mut summary = Vec::new();
    for flavor in [Flavor::Iwae, Flavor::Piwo, Flavor::Ipiwo] {
        let spec = ObjectiveSpec::new(flavor, 2, 0.0);
        let exact = grad(
            &model,
            &[],
            &unlabeled,
            &spec,
            GradientEstimatorKind::ExactEnumeration,
            0,
            false,
        )
        .unwrap();
        let np = exact.grads.data().len();
        for kind in [
            GradientEstimatorKind::Pathwise,
            GradientEstimatorKind::Dreg,
            GradientEstimatorKind::ScoreFunction,
        ] {
            let mut hits = 0usize;
            let mut total = 0usize;
            for seed in 0..n_seeds {
                let mut sum = vec![0.0f64; np];
                let mut sq = vec![0.0f64; np];
                for draw in 0..n_draws {
                    let r = grad(
                        &model,
                        &[],
                        &unlabeled,
                        &spec,
                        kind,
                        SplitMix64::derive2(0x5eed0 + seed as u64, flavor as u64, draw as u64),
                        false,
                    )
                    .unwrap();
                    for (i, g) in r.grads.data().iter().enumerate() {
                        sum[i] += g;
                        sq[i] += g * g;
                    }
                }
                for i in 0..np {
                    let mean = sum[i] / n_draws as f64;
                    let var = (sq[i] / n_draws as f64 - mean * mean).max(0.0);
                    let se = fm::sqrt(var / n_draws as f64) + 1e-14;
                    total += 1;
                    if fm::abs(mean - exact.grads.data()[i]) < 3.0 * se {
                        hits += 1;
                    }
                }
            }
            let frac = hits as f64 / total as f64;
            summary.push(format!("{kind:?}/{flavor:?} {frac:.3}"));
            assert!(
                frac >= 0.95,
                "ACCEPT-5 FAIL: {kind:?} x {flavor:?} within-3-SE fraction {frac} < 0.95"
            );
        }
    }
    pass(
        5,
        "gradient suite (exact vs FD; 1e5-sample unbiasedness over 20 seeds)",
        format!("fd {worst_fd:.2e}; within-3SE fractions {}", summary.join(", ")),
        started,
        600.0,
    );
}

// ----------------------------------------------------------------------
// Desk-scale experiments shared by criteria 6-8.
// ----------------------------------------------------------------------

struct Experiments {
    dataset: Dataset,
    none_lsr: CrossSplitResult,
    vae_lsr: CrossSplitResult,
    vae_hsr: CrossSplitResult,
    piwo_hsr: CrossSplitResult,
    secs: f64,
}

fn experiment_config(k: usize, patience: usize, max_epochs: usize) -> TrainConfig {
    TrainConfig {
        anneal_steps: 1500,
        patience,
        max_epochs,
        k,
        seed: 7,
        alpha_grid: vec![EXPERIMENT_ALPHA],
        ..TrainConfig::default()
    }
}

fn run_cross_split(
    dataset: &Dataset,
    flavor: Flavor,
    k: usize,
    patience: usize,
    max_epochs: usize,
) -> CrossSplitResult {
    let ncfg = NeuralConfig::desk(dataset.vocab.size(), dataset.n_classes, 16);
    let factory = move |seed: u64| NeuralModel::new(ncfg.clone(), seed);
    let cfg = experiment_config(k, patience, max_epochs);
    let spec = ObjectiveSpec::new(flavor, k, EXPERIMENT_ALPHA);
    cross_split_evaluate(&factory, dataset, &spec, &cfg, default_estimator(flavor))
        .expect("experiment training run failed")
}

fn experiments() -> &'static Experiments {
    static CELL: OnceLock<Experiments> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let dataset = generate_synthetic(&SyntheticSpec::syn_a(SYN_A_SEED));
        let lsr = supervision_subset(&dataset, LSR_RATE, 1, false).expect("subset");
        // Tiny dev splits (4 points at 0.5%) saturate quickly, so the
        // low-rate runs get more patience; the full-rate dev splits are
        // informative and use the standard patience.
        let none_lsr = run_cross_split(&lsr, Flavor::None, 1, 10, 30);
        let vae_lsr = run_cross_split(&lsr, Flavor::Vae, 1, 10, 30);
        let vae_hsr = run_cross_split(&dataset, Flavor::Vae, 1, 4, 8);
        let piwo_hsr = run_cross_split(&dataset, Flavor::Piwo, 5, 4, 8);
        Experiments {
            dataset,
            none_lsr,
            vae_lsr,
            vae_hsr,
            piwo_hsr,
            secs: started.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn accept_6_directional_semi_supervision() {
    let started = Instant::now();
    let e = experiments();
    let bayes = e.dataset.bayes_accuracy.unwrap();
    let detail = format!(
        "LSR {:.1}%: none {:.3} (sd {:.3}) vs vae {:.3} (sd {:.3}); \
         HSR 100%: vae {:.3} (sd {:.3}) vs piwo {:.3} (sd {:.3}); bayes {:.3}; experiments {:.0}s",
        100.0 * LSR_RATE,
        e.none_lsr.mean,
        e.none_lsr.std,
        e.vae_lsr.mean,
        e.vae_lsr.std,
        e.vae_hsr.mean,
        e.vae_hsr.std,
        e.piwo_hsr.mean,
        e.piwo_hsr.std,
        bayes,
        e.secs
    );
    assert!(
        e.vae_lsr.mean >= e.none_lsr.mean,
        "ACCEPT-6 FAIL (LSR pattern): VAE mean {} < supervised-only mean {} — {detail}",
        e.vae_lsr.mean,
        e.none_lsr.mean
    );
    assert!(
        e.piwo_hsr.mean >= e.vae_hsr.mean - e.vae_hsr.std,
        "ACCEPT-6 FAIL (HSR pattern): PIWO mean {} < VAE mean {} - 1 std {} — {detail}",
        e.piwo_hsr.mean,
        e.vae_hsr.mean,
        e.vae_hsr.std
    );
    pass(6, "directional semi-supervision on SYN-A", detail, started, 3600.0);
}

#[test]
fn accept_7_alpha_behavior_probe() {
    let started = Instant::now();
    // Desk-scale alpha sweep at a 10% supervision rate: three rotations,
    // grid {1, 10, 100, 1000}, selection by dev accuracy per rotation.
    let dataset = generate_synthetic(&SyntheticSpec::syn_a(SYN_A_SEED));
    let subset = supervision_subset(&dataset, 0.1, 2, false).expect("subset");
    let ncfg = NeuralConfig::desk(dataset.vocab.size(), dataset.n_classes, 16);
    let mut selected = Vec::new();
    for (flavor, k) in [(Flavor::Vae, 1usize), (Flavor::Iwae, 5)] {
        let cfg = TrainConfig {
            anneal_steps: 1500,
            patience: 2,
            max_epochs: 5,
            k,
            seed: 11,
            alpha_grid: vec![1.0, 10.0, 100.0, 1000.0],
            ..TrainConfig::default()
        };
        let spec = ObjectiveSpec::new(flavor, k, 1.0);
        let mut logs = Vec::new();
        for split in 0..3u8 {
            let ncfg2 = ncfg.clone();
            let factory = move |seed: u64| NeuralModel::new(ncfg2.clone(), seed);
            let mut split_cfg = cfg.clone();
            split_cfg.seed = SplitMix64::derive(cfg.seed, split as u64);
            let (best_alpha, _) = alpha_sweep(
                &factory,
                &subset,
                split,
                &spec,
                &split_cfg,
                default_estimator(flavor),
            )
            .expect("alpha sweep failed");
            logs.push(fm::log10(best_alpha));
        }
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        selected.push((flavor, mean));
    }
    let (vae_log_alpha, iwae_log_alpha) = (selected[0].1, selected[1].1);
    let detail = format!(
        "mean log10(alpha): VAE {vae_log_alpha:.2}, IWAE {iwae_log_alpha:.2}"
    );
    // Soft criterion: the IWAE flavor is expected to select alphas no larger
    // than the VAE flavor; a violation warns but does not fail the build.
    if iwae_log_alpha <= vae_log_alpha {
        pass(7, "alpha-behavior probe (soft)", detail, started, 3600.0);
    } else {
        println!(
            "ACCEPT-7 alpha-behavior probe (soft): WARN — IWAE selected a larger mean \
             log10(alpha) than VAE ({detail}; {:.1}s)",
            started.elapsed().as_secs_f64()
        );
    }
}

#[test]
fn accept_8_posterior_collapse_guard() {
    let started = Instant::now();
    let e = experiments();
    // End-of-training batch-mean KL_z with annealing on, over the VAE runs.
    let mut worst = f64::INFINITY;
    for run in e.vae_hsr.runs.iter().chain(&e.vae_lsr.runs) {
        worst = worst.min(run.final_kl_z);
    }
    assert!(
        worst > 0.01,
        "ACCEPT-8 FAIL: end-of-training KL_z {worst} <= 0.01 nats (posterior collapsed)"
    );
    pass(
        8,
        "posterior-collapse guard",
        format!("min end-of-training KL_z {worst:.3} nats > 0.01"),
        started,
        3600.0,
    );
}
