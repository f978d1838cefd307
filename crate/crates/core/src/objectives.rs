//! Monte Carlo estimators of the semi-supervised training objectives,
//! generic over any model exposing the required log-densities and samplers.
//!
//! Every estimator is built as an expression on the [`Tape`], so a single
//! code path yields both the bound value and — through the chosen gradient
//! estimator's surrogate — its parameter gradients. Per-item construction is
//! pinned to a derived seed, making results independent of evaluation order.
//!
//! The five flavors compose as follows on a labeled pair `(x, y)` and an
//! unlabeled `x`:
//!
//! | flavor | labeled bound        | unlabeled bound |
//! |--------|----------------------|-----------------|
//! | None   | (classification only)| —               |
//! | VAE    | ELBO(x,y) (k-sample avg) | ELBO(x)     |
//! | PIWO   | IWAE(x,y,k)          | PIWO(x,k)       |
//! | iPIWO  | ELBO(x,y)            | iPIWO(x,k)      |
//! | IWAE   | IWAE(x,y,k)          | IWAE(x,k)       |
//!
//! with the `alpha`-weighted `log q(y|x)` term added to every labeled item.
//! All five coincide bitwise at `k = 1` on shared random streams: weights are
//! assembled from one shared log-weight matrix and the reductions collapse to
//! the same floating-point operations.
//!
//! KL annealing multiplies the `log p(y,z) - log q(y,z|x)` portion of each
//! per-sample log-weight by `beta`, which reduces to ordinary beta-weighted
//! ELBO annealing at `k = 1`.
//!
//! The outer expectation over `y` is enumerated exactly whenever the class
//! count (and, for tuple-valued bounds, `|Y|^k`) is within the configured
//! thresholds; otherwise `y` is hard-sampled and score terms keep the
//! gradient unbiased.

use alloc::vec::Vec;

use crate::fm;
use crate::rng::SplitMix64;
use crate::tape::{NodeId, ParamStore, Tape};

/// Which semi-supervised objective family to estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    /// Pure supervision: the weighted classification term only.
    None,
    /// Plain ELBOs on both parts (the classic M2 objective).
    Vae,
    /// Importance-weight `z` only: supervised IWAE + unsupervised PIWO.
    Piwo,
    /// Importance-weight `y` only: supervised ELBO + unsupervised iPIWO.
    Ipiwo,
    /// Importance-weight the joint `(y, z)` on both parts.
    Iwae,
}

impl Flavor {
    pub const ALL: [Flavor; 5] = [
        Flavor::None,
        Flavor::Vae,
        Flavor::Piwo,
        Flavor::Ipiwo,
        Flavor::Iwae,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Flavor::None => "none",
            Flavor::Vae => "vae",
            Flavor::Piwo => "piwo",
            Flavor::Ipiwo => "ipiwo",
            Flavor::Iwae => "iwae",
        }
    }

    pub fn parse(s: &str) -> Option<Flavor> {
        match s {
            "none" | "None" | "NONE" => Some(Flavor::None),
            "vae" | "VAE" | "Vae" => Some(Flavor::Vae),
            "piwo" | "PIWO" | "Piwo" => Some(Flavor::Piwo),
            "ipiwo" | "iPIWO" | "IPIWO" | "Ipiwo" => Some(Flavor::Ipiwo),
            "iwae" | "IWAE" | "Iwae" => Some(Flavor::Iwae),
            _ => None,
        }
    }
}

/// Objective configuration: flavor, importance-sample count, classification
/// weight, and the current annealing coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    pub flavor: Flavor,
    /// Importance samples per datum (`k >= 1`). Under the VAE flavor, `k`
    /// independent ELBO samples are averaged instead of importance-weighted.
    pub k: usize,
    /// Classification loss weight (`alpha >= 0`).
    pub alpha: f64,
    /// KL annealing coefficient in `[0, 1]`.
    pub beta: f64,
    /// Enumerate the outer `y`-expectation exactly when `|Y|` is at most this.
    pub y_enum_threshold: usize,
    /// Enumerate `y`-tuples (IWAE / iPIWO) exactly when `|Y|^k` is at most
    /// this; also caps the tape-mode exact `z`-tuple enumeration.
    pub tuple_budget: usize,
}

impl ObjectiveSpec {
    pub fn new(flavor: Flavor, k: usize, alpha: f64) -> Self {
        assert!(k >= 1, "sample count k must be >= 1");
        assert!(alpha >= 0.0, "alpha must be non-negative");
        Self {
            flavor,
            k,
            alpha,
            beta: 1.0,
            y_enum_threshold: 16,
            tuple_budget: 4096,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        assert!(alpha >= 0.0);
        self.alpha = alpha;
        self
    }
}

/// A scalar bound estimate in nats with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveError {
    /// An importance log-weight came out non-finite; carries the offending
    /// sample's position.
    NonFiniteWeight {
        sample: usize,
        y: usize,
        value: f64,
    },
    /// `alpha > 0` needs labeled data.
    EmptyLabeledBatch,
    /// PIWO / iPIWO require the factorized posterior `q(y,z|x) = q(y|x) q(z|x)`.
    NonFactorizedPosterior,
    /// Exact tape-mode enumeration requires an enumerable latent.
    NotEnumerable,
    /// Exact enumeration would exceed the tuple budget.
    TupleBudgetExceeded { needed: u64, budget: u64 },
    /// Estimator kind is incompatible with this objective or model.
    EstimatorMismatch { detail: &'static str },
}

impl core::fmt::Display for ObjectiveError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ObjectiveError::NonFiniteWeight { sample, y, value } => write!(
                f,
                "non-finite log-weight {value} at sample {sample}, class {y}"
            ),
            ObjectiveError::EmptyLabeledBatch => {
                write!(f, "alpha > 0 requires a non-empty labeled batch")
            }
            ObjectiveError::NonFactorizedPosterior => write!(
                f,
                "PIWO/iPIWO require the factorized posterior q(y,z|x) = q(y|x) q(z|x)"
            ),
            ObjectiveError::NotEnumerable => {
                write!(f, "exact mode requires an enumerable latent space")
            }
            ObjectiveError::TupleBudgetExceeded { needed, budget } => {
                write!(f, "exact enumeration needs {needed} tuples, budget {budget}")
            }
            ObjectiveError::EstimatorMismatch { detail } => {
                write!(f, "estimator mismatch: {detail}")
            }
        }
    }
}

impl core::error::Error for ObjectiveError {}

/// Gradient estimator variant used when building objective graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstKind {
    /// Total-derivative reparameterized gradient (all paths live).
    Pathwise,
    /// "Sticking the landing": the q-density's direct parameter dependence is
    /// detached at the sampled latent; the path through the sample survives.
    /// ELBO-style (k = 1) objectives only.
    Stl,
    /// REINFORCE on `z` (no reparameterization required).
    Score,
    /// Doubly reparameterized: normalized-weight squares scale the
    /// per-sample pathwise terms of the inference gradient; generative
    /// gradients keep the plain importance weighting.
    Dreg,
}

/// Interface the objective estimators need from a model.
///
/// A model exposes a per-datum encoder pass, the factorized inference
/// densities `q(y|x)` and `q(z|x)`, the structured prior `p(y,z)`, and the
/// likelihood `p(x|y,z)`, all as tape expressions.
pub trait VariationalModel {
    type Datum: ?Sized;
    type Ctx;
    type Latent: Clone;

    fn n_classes(&self) -> usize;
    fn params(&self) -> &ParamStore;
    /// Whether `q(y,z|x) = q(y|x) q(z|x)` (required by PIWO / iPIWO).
    fn posterior_factorized(&self) -> bool {
        true
    }
    /// Whether `sample_z` keeps a differentiable path (`mu + sigma * eps`).
    fn z_reparameterized(&self) -> bool;

    /// Encoder pass. `rng` enables training-time stochasticity (dropout);
    /// pass `None` for evaluation.
    fn encode(&self, t: &mut Tape, x: &Self::Datum, rng: Option<&mut SplitMix64>) -> Self::Ctx;
    /// Vector node of per-class `log q(y|x)`.
    fn log_q_y(&self, t: &mut Tape, ctx: &Self::Ctx) -> NodeId;
    /// Draw `z ~ q(z|x)`.
    fn sample_z(&self, t: &mut Tape, ctx: &Self::Ctx, rng: &mut SplitMix64) -> Self::Latent;
    /// `log q(z|x)` of a drawn latent. With `detach_q_params` the density's
    /// direct parameter dependence is severed while the latent's own path
    /// stays alive (STL / DReG evaluation).
    fn log_q_z(&self, t: &mut Tape, ctx: &Self::Ctx, z: &Self::Latent, detach_q_params: bool)
        -> NodeId;
    /// `log p(y, z) = log p(z) + log p(y|z)`.
    fn log_prior(&self, t: &mut Tape, y: usize, z: &Self::Latent) -> NodeId;
    /// `log p(x | y, z)`.
    fn log_lik(&self, t: &mut Tape, x: &Self::Datum, y: usize, z: &Self::Latent) -> NodeId;
    /// Copy of the latent with its gradient path severed.
    fn detach_latent(&self, t: &mut Tape, z: &Self::Latent) -> Self::Latent;
    /// Copy of the latent whose gradient path is multiplied by a deferred
    /// coefficient (DReG's squared-weight scaling). `None` for latents with
    /// no reparameterized path.
    fn grad_scaled_latent(
        &self,
        _t: &mut Tape,
        z: &Self::Latent,
    ) -> (Self::Latent, Option<crate::tape::GradScaleSlot>) {
        (z.clone(), None)
    }
    /// Closed-form `KL[q(z|x) || p(z)]` for diagnostics, when available.
    fn kl_z_value(&self, _t: &Tape, _ctx: &Self::Ctx) -> Option<f64> {
        None
    }

    /// Number of `z` states when the latent is finite (exact modes).
    fn enumerable_z(&self) -> Option<usize> {
        None
    }
    fn z_state(&self, _i: usize) -> Self::Latent {
        panic!("latent space is not enumerable")
    }
    /// Vector node of `log q(z|x)` over all enumerable states.
    fn log_q_z_all(&self, _t: &mut Tape, _ctx: &Self::Ctx) -> Option<NodeId> {
        None
    }
}

// ----------------------------------------------------------------------
// Shared graph-building machinery
// ----------------------------------------------------------------------

/// Pin a node's value to `target` while keeping its gradient.
fn with_value(t: &mut Tape, surrogate: NodeId, target: f64) -> NodeId {
    let tgt = t.scalar(target);
    let diff = t.sub(tgt, surrogate);
    let diff = t.detach(diff);
    t.add(surrogate, diff)
}

fn check_finite(t: &Tape, node: NodeId, sample: usize, y: usize) -> Result<(), ObjectiveError> {
    let v = t.scalar_val(node);
    if v.is_finite() {
        Ok(())
    } else {
        Err(ObjectiveError::NonFiniteWeight { sample, y, value: v })
    }
}

struct YInfo {
    /// Per-class `get` nodes into `log q(y|x)`.
    lqy_get: Vec<NodeId>,
    /// Per-class `exp` nodes (probabilities, differentiable).
    qy_node: Vec<NodeId>,
    /// Per-class probability values.
    qy_val: Vec<f64>,
}

fn y_info<M: VariationalModel>(t: &mut Tape, model: &M, ctx: &M::Ctx) -> YInfo {
    let lqy = model.log_q_y(t, ctx);
    let ny = model.n_classes();
    let mut lqy_get = Vec::with_capacity(ny);
    let mut qy_node = Vec::with_capacity(ny);
    let mut qy_val = Vec::with_capacity(ny);
    for y in 0..ny {
        let g = t.get(lqy, y);
        let e = t.exp(g);
        qy_val.push(t.scalar_val(e));
        lqy_get.push(g);
        qy_node.push(e);
    }
    let _ = lqy;
    YInfo {
        lqy_get,
        qy_node,
        qy_val,
    }
}

/// Enumerate all ordered tuples in `[0, n)^k`, invoking `f` per tuple.
fn for_each_tuple(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = alloc::vec![0usize; k];
    loop {
        f(&idx);
        let mut pos = 0;
        loop {
            if pos == k {
                return;
            }
            idx[pos] += 1;
            if idx[pos] < n {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

fn sum_terms(t: &mut Tape, terms: &[NodeId]) -> NodeId {
    let stacked = t.stack(terms);
    t.sum(stacked)
}

/// Per-sample supervised log-weight `log p(x,y,z_i) - log q(z_i|x)` with the
/// prior-minus-q portion annealed by `beta`.
fn sup_weight<M: VariationalModel>(
    t: &mut Tape,
    model: &M,
    x: &M::Datum,
    y: usize,
    z: &M::Latent,
    lqz: NodeId,
    beta: f64,
) -> NodeId {
    let ll = model.log_lik(t, x, y, z);
    let lp = model.log_prior(t, y, z);
    let inner = t.sub(lp, lqz);
    let annealed = t.affc(inner, beta, 0.0);
    t.add(ll, annealed)
}

/// Per-sample joint log-weight `log p(x,y,z_i) - log q(y|x) - log q(z_i|x)`,
/// annealed.
fn joint_weight<M: VariationalModel>(
    t: &mut Tape,
    model: &M,
    x: &M::Datum,
    y: usize,
    z: &M::Latent,
    lqz: NodeId,
    lqy_y: NodeId,
    beta: f64,
) -> NodeId {
    let ll = model.log_lik(t, x, y, z);
    let lp = model.log_prior(t, y, z);
    let a = t.sub(lp, lqz);
    let inner = t.sub(a, lqy_y);
    let annealed = t.affc(inner, beta, 0.0);
    t.add(ll, annealed)
}

// ----------------------------------------------------------------------
// Supervised bound graphs
// ----------------------------------------------------------------------

/// Supervised bound part (no alpha term): ELBO average or IWAE, per flavor.
fn supervised_bound<M: VariationalModel>(
    t: &mut Tape,
    model: &M,
    x: &M::Datum,
    y: usize,
    ctx: &M::Ctx,
    spec: &ObjectiveSpec,
    kind: EstKind,
    rng: &mut SplitMix64,
) -> Result<NodeId, ObjectiveError> {
    let k = spec.k;
    let beta = spec.beta;
    // ELBO-style labeled bound for None/VAE/iPIWO; IWAE for PIWO/IWAE.
    let iw = matches!(spec.flavor, Flavor::Piwo | Flavor::Iwae);

    let zs: Vec<M::Latent> = (0..k).map(|_| model.sample_z(t, ctx, rng)).collect();

    match kind {
        EstKind::Pathwise | EstKind::Stl | EstKind::Dreg if !iw || kind != EstKind::Dreg => {
            // Plain build; STL and DReG-on-ELBO detach the q-density params.
            let detach = matches!(kind, EstKind::Stl | EstKind::Dreg);
            let mut w = Vec::with_capacity(k);
            for (i, z) in zs.iter().enumerate() {
                let lqz = model.log_q_z(t, ctx, z, detach);
                let wi = sup_weight(t, model, x, y, z, lqz, beta);
                check_finite(t, wi, i, y)?;
                w.push(wi);
            }
            let stacked = t.stack(&w);
            if iw {
                Ok(t.log_mean_exp(stacked))
            } else {
                let s = t.sum(stacked);
                Ok(t.affc(s, 1.0 / k as f64, 0.0))
            }
        }
        EstKind::Dreg => {
            // Importance-weighted labeled bound under DReG. One evaluation
            // per sample: the generative terms see the plain weight through
            // the outer scaling while the latent's gradient path carries an
            // extra deferred factor, which lands the inference terms on the
            // squared normalized weights.
            let mut e = Vec::with_capacity(k);
            let mut slots = Vec::with_capacity(k);
            for (i, z) in zs.iter().enumerate() {
                let (zs_scaled, slot) = model.grad_scaled_latent(t, z);
                let ll = model.log_lik(t, x, y, &zs_scaled);
                let lp = model.log_prior(t, y, &zs_scaled);
                let lp = t.affc(lp, beta, 0.0);
                let core = t.add(ll, lp);
                let lqz = model.log_q_z(t, ctx, &zs_scaled, true);
                let lqz = t.affc(lqz, beta, 0.0);
                let ei = t.sub(core, lqz);
                check_finite(t, ei, i, y)?;
                e.push(ei);
                slots.push(slot);
            }
            let wvals: Vec<f64> = e.iter().map(|&n| t.scalar_val(n)).collect();
            let what = normalized_weights(&wvals);
            let mut terms = Vec::with_capacity(k);
            for i in 0..k {
                if let Some(slot) = slots[i] {
                    t.set_grad_scale(slot, what[i]);
                }
                terms.push(t.affc(e[i], what[i], 0.0));
            }
            let surr = sum_terms(t, &terms);
            Ok(with_value(t, surr, fm::log_mean_exp(&wvals)))
        }
        EstKind::Score => {
            let mut w = Vec::with_capacity(k);
            let mut lqz_live = Vec::with_capacity(k);
            for (i, z) in zs.iter().enumerate() {
                let z_det = model.detach_latent(t, z);
                let lqz = model.log_q_z(t, ctx, &z_det, false);
                let wi = sup_weight(t, model, x, y, &z_det, lqz, beta);
                check_finite(t, wi, i, y)?;
                w.push(wi);
                lqz_live.push(lqz);
            }
            let stacked = t.stack(&w);
            let bound = if iw {
                t.log_mean_exp(stacked)
            } else {
                let s = t.sum(stacked);
                t.affc(s, 1.0 / k as f64, 0.0)
            };
            let fval = t.scalar_val(bound);
            let mut terms = alloc::vec![bound];
            for lqz in &lqz_live {
                terms.push(t.affc(*lqz, fval, 0.0));
            }
            let surr = sum_terms(t, &terms);
            Ok(with_value(t, surr, fval))
        }
        _ => unreachable!(),
    }
}

fn normalized_weights(lw: &[f64]) -> Vec<f64> {
    let z = fm::logsumexp(lw);
    lw.iter().map(|&w| fm::exp(w - z)).collect()
}

// ----------------------------------------------------------------------
// Unsupervised bound graphs
// ----------------------------------------------------------------------

/// Unsupervised bound for any flavor, `y` enumerated exactly.
#[allow(clippy::too_many_arguments)]
fn unsup_bound_enum<M: VariationalModel>(
    t: &mut Tape,
    model: &M,
    x: &M::Datum,
    ctx: &M::Ctx,
    spec: &ObjectiveSpec,
    kind: EstKind,
    rng: &mut SplitMix64,
) -> Result<NodeId, ObjectiveError> {
    let ny = model.n_classes();
    let k = spec.k;
    let beta = spec.beta;
    let yi = y_info(t, model, ctx);

    if kind == EstKind::Dreg && matches!(spec.flavor, Flavor::Piwo | Flavor::Iwae) {
        return unsup_dreg_enum(t, model, x, ctx, spec, rng, &yi);
    }

    // Plain / STL / Score / (DReG on ELBO-style = STL) path.
    let detach_q = matches!(kind, EstKind::Stl | EstKind::Dreg);
    let score = kind == EstKind::Score;

    let zs_raw: Vec<M::Latent> = (0..k).map(|_| model.sample_z(t, ctx, rng)).collect();
    let zs: Vec<M::Latent> = if score {
        zs_raw.iter().map(|z| model.detach_latent(t, z)).collect()
    } else {
        zs_raw
    };
    let lqz: Vec<NodeId> = zs
        .iter()
        .map(|z| model.log_q_z(t, ctx, z, detach_q))
        .collect();

    // Shared log-weight matrix W[i][y].
    let mut w = Vec::with_capacity(k);
    for (i, z) in zs.iter().enumerate() {
        let mut row = Vec::with_capacity(ny);
        for y in 0..ny {
            let wiy = joint_weight(t, model, x, y, z, lqz[i], yi.lqy_get[y], beta);
            if yi.qy_val[y] > 0.0 {
                check_finite(t, wiy, i, y)?;
            }
            row.push(wiy);
        }
        w.push(row);
    }

    let bound = combine_enum(t, spec, &yi, &w)?;

    if score {
        let fval = t.scalar_val(bound);
        let mut terms = alloc::vec![bound];
        for l in &lqz {
            terms.push(t.affc(*l, fval, 0.0));
        }
        let surr = sum_terms(t, &terms);
        Ok(with_value(t, surr, fval))
    } else {
        Ok(bound)
    }
}

/// Flavor-specific exact-in-`y` combination of the shared weight matrix.
fn combine_enum(
    t: &mut Tape,
    spec: &ObjectiveSpec,
    yi: &YInfo,
    w: &[Vec<NodeId>],
) -> Result<NodeId, ObjectiveError> {
    let ny = yi.qy_node.len();
    let k = w.len();
    match spec.flavor {
        Flavor::Vae => {
            // (1/k) Σ_i Σ_y q(y|x) W[i][y]
            let mut per_i = Vec::with_capacity(k);
            for row in w {
                let mut terms = Vec::with_capacity(ny);
                for y in 0..ny {
                    terms.push(t.mul(yi.qy_node[y], row[y]));
                }
                per_i.push(sum_terms(t, &terms));
            }
            let s = sum_terms(t, &per_i);
            Ok(t.affc(s, 1.0 / k as f64, 0.0))
        }
        Flavor::Piwo => {
            // Σ_y q(y|x) log-mean-exp_i W[i][y]
            let mut terms = Vec::with_capacity(ny);
            for y in 0..ny {
                let col: Vec<NodeId> = w.iter().map(|row| row[y]).collect();
                let stacked = t.stack(&col);
                let m = t.log_mean_exp(stacked);
                terms.push(t.mul(yi.qy_node[y], m));
            }
            Ok(sum_terms(t, &terms))
        }
        Flavor::Ipiwo => {
            // (1/k) Σ_i Σ_{y-tuples} Π_j q(y_j|x) log-mean-exp_j W[i][y_j]
            guard_tuples(ny, k, spec.tuple_budget)?;
            let mut per_i = Vec::with_capacity(k);
            for row in w {
                let mut terms = Vec::new();
                for_each_tuple(ny, k, |tuple| {
                    let prodq = product_node(t, yi, tuple);
                    let picked: Vec<NodeId> = tuple.iter().map(|&y| row[y]).collect();
                    let stacked = t.stack(&picked);
                    let m = t.log_mean_exp(stacked);
                    terms.push(t.mul(prodq, m));
                });
                per_i.push(sum_terms(t, &terms));
            }
            let s = sum_terms(t, &per_i);
            Ok(t.affc(s, 1.0 / k as f64, 0.0))
        }
        Flavor::Iwae => {
            // Σ_{y-tuples} Π_j q(y_j|x) log-mean-exp_j W[j][y_j]
            guard_tuples(ny, k, spec.tuple_budget)?;
            let mut terms = Vec::new();
            for_each_tuple(ny, k, |tuple| {
                let prodq = product_node(t, yi, tuple);
                let picked: Vec<NodeId> = tuple
                    .iter()
                    .enumerate()
                    .map(|(j, &y)| w[j][y])
                    .collect();
                let stacked = t.stack(&picked);
                let m = t.log_mean_exp(stacked);
                terms.push(t.mul(prodq, m));
            });
            Ok(sum_terms(t, &terms))
        }
        Flavor::None => Ok(t.scalar(0.0)),
    }
}

fn guard_tuples(n: usize, k: usize, budget: usize) -> Result<(), ObjectiveError> {
    let needed = (n as u64).checked_pow(k as u32);
    match needed {
        Some(c) if c <= budget as u64 => Ok(()),
        Some(c) => Err(ObjectiveError::TupleBudgetExceeded {
            needed: c,
            budget: budget as u64,
        }),
        None => Err(ObjectiveError::TupleBudgetExceeded {
            needed: u64::MAX,
            budget: budget as u64,
        }),
    }
}

fn product_node(t: &mut Tape, yi: &YInfo, tuple: &[usize]) -> NodeId {
    let mut p = yi.qy_node[tuple[0]];
    for &y in &tuple[1..] {
        p = t.mul(p, yi.qy_node[y]);
    }
    p
}

/// DReG build of the unsupervised PIWO and joint-IWAE bounds with `y`
/// enumerated. The generative side keeps the plain importance weighting;
/// a deferred gradient scale on each latent's path lands the inference
/// terms on the squared normalized weights with the q-density's direct
/// parameter dependence detached. Exact-enumeration factors (`q(y|x)`
/// products and in-weight `log q(y|x)`) are differentiated exactly.
fn unsup_dreg_enum<M: VariationalModel>(
    t: &mut Tape,
    model: &M,
    x: &M::Datum,
    ctx: &M::Ctx,
    spec: &ObjectiveSpec,
    rng: &mut SplitMix64,
    yi: &YInfo,
) -> Result<NodeId, ObjectiveError> {
    let ny = model.n_classes();
    let k = spec.k;
    let beta = spec.beta;

    let zs: Vec<M::Latent> = (0..k).map(|_| model.sample_z(t, ctx, rng)).collect();

    // E[i][y] = log p(x,y,z_i') + beta(log p(y,z_i') - log q_det(z_i'|x))
    // where z_i' carries the deferred gradient scale for the (i, y) branch.
    let mut e = Vec::with_capacity(k);
    let mut slots = Vec::with_capacity(k);
    for (i, z) in zs.iter().enumerate() {
        let mut erow = Vec::with_capacity(ny);
        let mut srow = Vec::with_capacity(ny);
        for y in 0..ny {
            let (zsc, slot) = model.grad_scaled_latent(t, z);
            let ll = model.log_lik(t, x, y, &zsc);
            let lp = model.log_prior(t, y, &zsc);
            let lp = t.affc(lp, beta, 0.0);
            let core = t.add(ll, lp);
            let lqz = model.log_q_z(t, ctx, &zsc, true);
            let lqz = t.affc(lqz, beta, 0.0);
            let ey = t.sub(core, lqz);
            if yi.qy_val[y] > 0.0 {
                check_finite(t, ey, i, y)?;
            }
            erow.push(ey);
            srow.push(slot);
        }
        e.push(erow);
        slots.push(srow);
    }
    let eval: Vec<Vec<f64>> = e
        .iter()
        .map(|row| row.iter().map(|&n| t.scalar_val(n)).collect())
        .collect();
    let lqy_val: Vec<f64> = yi.lqy_get.iter().map(|&n| t.scalar_val(n)).collect();

    match spec.flavor {
        Flavor::Piwo => {
            // V = Σ_y q_y (J_y - beta lqy_y), J_y = lme_i(E[i][y]).
            let mut terms = Vec::with_capacity(ny);
            let mut target = 0.0;
            for y in 0..ny {
                let col: Vec<f64> = (0..k).map(|i| eval[i][y]).collect();
                let jhat = fm::log_mean_exp(&col);
                let what = normalized_weights(&col);
                let mut jparts = Vec::with_capacity(k);
                for i in 0..k {
                    if let Some(slot) = slots[i][y] {
                        t.set_grad_scale(slot, what[i]);
                    }
                    jparts.push(t.affc(e[i][y], what[i], 0.0));
                }
                let j_surr = sum_terms(t, &jparts);
                // exact terms: grad q_y * jhat  and  d(q_y * -beta lqy_y)
                let tq = t.affc(yi.qy_node[y], jhat, 0.0);
                let ex = t.affc(yi.lqy_get[y], -beta, 0.0);
                let te = t.mul(yi.qy_node[y], ex);
                let tj = t.affc(j_surr, yi.qy_val[y], 0.0);
                let s1 = t.add(tq, te);
                terms.push(t.add(s1, tj));
                target += yi.qy_val[y] * (jhat - beta * lqy_val[y]);
            }
            let surr = sum_terms(t, &terms);
            Ok(with_value(t, surr, target))
        }
        Flavor::Iwae => {
            guard_tuples(ny, k, spec.tuple_budget)?;
            // Aggregate the per-(slot, class) weights across tuples: the
            // plain weights A scale the terms, B/A rides the latent's
            // deferred gradient scale, and C collects the exact in-weight
            // log q(y|x) coefficients.
            let mut a_coef = alloc::vec![alloc::vec![0.0f64; ny]; k];
            let mut b_coef = alloc::vec![alloc::vec![0.0f64; ny]; k];
            let mut c_coef = alloc::vec![0.0f64; ny];
            let mut terms = Vec::new();
            let mut target = 0.0;
            let mut err = None;
            for_each_tuple(ny, k, |tuple| {
                if err.is_some() {
                    return;
                }
                let mut lw = Vec::with_capacity(k);
                let mut prodq_val = 1.0;
                for (j, &y) in tuple.iter().enumerate() {
                    lw.push(eval[j][y] - beta * lqy_val[y]);
                    prodq_val *= yi.qy_val[y];
                }
                if prodq_val == 0.0 {
                    return;
                }
                let vhat = fm::log_mean_exp(&lw);
                if !vhat.is_finite() {
                    err = Some(ObjectiveError::NonFiniteWeight {
                        sample: 0,
                        y: tuple[0],
                        value: vhat,
                    });
                    return;
                }
                let what = normalized_weights(&lw);
                for (j, &y) in tuple.iter().enumerate() {
                    a_coef[j][y] += prodq_val * what[j];
                    b_coef[j][y] += prodq_val * what[j] * what[j];
                    c_coef[y] += -beta * prodq_val * what[j];
                }
                let prodq = product_node(t, yi, tuple);
                terms.push(t.affc(prodq, vhat, 0.0));
                target += prodq_val * vhat;
            });
            if let Some(err) = err {
                return Err(err);
            }
            for i in 0..k {
                for y in 0..ny {
                    if a_coef[i][y] > 0.0 {
                        if let Some(slot) = slots[i][y] {
                            t.set_grad_scale(slot, b_coef[i][y] / a_coef[i][y]);
                        }
                        terms.push(t.affc(e[i][y], a_coef[i][y], 0.0));
                    }
                }
            }
            for y in 0..ny {
                if c_coef[y] != 0.0 {
                    terms.push(t.affc(yi.lqy_get[y], c_coef[y], 0.0));
                }
            }
            let surr = sum_terms(t, &terms);
            Ok(with_value(t, surr, target))
        }
        _ => unreachable!("dreg enum path only handles PIWO and IWAE"),
    }
}

/// Unsupervised bound with hard-sampled `y` (class count above the
/// enumeration threshold). Score terms on the sampled classes keep the
/// estimator unbiased; under DReG they are scaled like the z-pathwise terms.
#[allow(clippy::too_many_arguments)]
fn unsup_bound_sampled<M: VariationalModel>(
    t: &mut Tape,
    model: &M,
    x: &M::Datum,
    ctx: &M::Ctx,
    spec: &ObjectiveSpec,
    kind: EstKind,
    rng: &mut SplitMix64,
) -> Result<NodeId, ObjectiveError> {
    let k = spec.k;
    let beta = spec.beta;
    let yi = y_info(t, model, ctx);
    let cat = crate::dist::Categorical::from_probs(&yi.qy_val);

    let detach_q = matches!(kind, EstKind::Stl | EstKind::Dreg);
    let score_z = kind == EstKind::Score;

    // Draw z_1..z_k first (stream layout shared with the enumerated path),
    // then the y draws the flavor needs.
    let zs_raw: Vec<M::Latent> = (0..k).map(|_| model.sample_z(t, ctx, rng)).collect();
    let zs: Vec<M::Latent> = if score_z {
        zs_raw.iter().map(|z| model.detach_latent(t, z)).collect()
    } else {
        zs_raw
    };
    let lqz: Vec<NodeId> = zs
        .iter()
        .map(|z| model.log_q_z(t, ctx, z, detach_q))
        .collect();

    let (bound, ys) = match spec.flavor {
        Flavor::Vae => {
            let ys: Vec<usize> = (0..k).map(|_| cat.sample(rng)).collect();
            let mut terms = Vec::with_capacity(k);
            for i in 0..k {
                let w = joint_weight(t, model, x, ys[i], &zs[i], lqz[i], yi.lqy_get[ys[i]], beta);
                check_finite(t, w, i, ys[i])?;
                terms.push(w);
            }
            let s = sum_terms(t, &terms);
            (t.affc(s, 1.0 / k as f64, 0.0), ys)
        }
        Flavor::Iwae => {
            let ys: Vec<usize> = (0..k).map(|_| cat.sample(rng)).collect();
            let mut w = Vec::with_capacity(k);
            for i in 0..k {
                let wi = joint_weight(t, model, x, ys[i], &zs[i], lqz[i], yi.lqy_get[ys[i]], beta);
                check_finite(t, wi, i, ys[i])?;
                w.push(wi);
            }
            let stacked = t.stack(&w);
            (t.log_mean_exp(stacked), ys)
        }
        Flavor::Piwo => {
            // One outer y draw; inner k z-samples.
            let y0 = cat.sample(rng);
            let mut w = Vec::with_capacity(k);
            for i in 0..k {
                let wi = joint_weight(t, model, x, y0, &zs[i], lqz[i], yi.lqy_get[y0], beta);
                check_finite(t, wi, i, y0)?;
                w.push(wi);
            }
            let stacked = t.stack(&w);
            (t.log_mean_exp(stacked), alloc::vec![y0])
        }
        Flavor::Ipiwo => {
            // Outer z draws (the k z-samples); inner k y-draws per z.
            let mut per_i = Vec::with_capacity(k);
            let mut ys = Vec::new();
            for i in 0..k {
                let mut w = Vec::with_capacity(k);
                for _ in 0..k {
                    let yj = cat.sample(rng);
                    let wj =
                        joint_weight(t, model, x, yj, &zs[i], lqz[i], yi.lqy_get[yj], beta);
                    check_finite(t, wj, i, yj)?;
                    w.push(wj);
                    ys.push(yj);
                }
                let stacked = t.stack(&w);
                per_i.push(t.log_mean_exp(stacked));
            }
            let s = sum_terms(t, &per_i);
            (t.affc(s, 1.0 / k as f64, 0.0), ys)
        }
        Flavor::None => (t.scalar(0.0), Vec::new()),
    };

    // Score terms for the hard-sampled classes (and for z under Score).
    let fval = t.scalar_val(bound);
    let mut terms = alloc::vec![bound];
    for &y in &ys {
        terms.push(t.affc(yi.lqy_get[y], fval, 0.0));
    }
    if score_z {
        for l in &lqz {
            terms.push(t.affc(*l, fval, 0.0));
        }
    }
    if terms.len() == 1 {
        return Ok(bound);
    }
    let surr = sum_terms(t, &terms);
    Ok(with_value(t, surr, fval))
}

// ----------------------------------------------------------------------
// Item-level entry points
// ----------------------------------------------------------------------

fn validate<M: VariationalModel>(
    model: &M,
    spec: &ObjectiveSpec,
    kind: EstKind,
) -> Result<(), ObjectiveError> {
    if matches!(spec.flavor, Flavor::Piwo | Flavor::Ipiwo) && !model.posterior_factorized() {
        return Err(ObjectiveError::NonFactorizedPosterior);
    }
    if kind == EstKind::Stl && !matches!(spec.flavor, Flavor::Vae | Flavor::None) {
        return Err(ObjectiveError::EstimatorMismatch {
            detail: "STL applies only to ELBO-style (VAE/None) objectives",
        });
    }
    Ok(())
}

/// Gradient-path precondition: pathwise-family estimators need a
/// reparameterized `z`. Value-only evaluation has no such requirement.
pub fn validate_gradient_kind<M: VariationalModel>(
    model: &M,
    spec: &ObjectiveSpec,
    kind: EstKind,
) -> Result<(), ObjectiveError> {
    validate(model, spec, kind)?;
    if matches!(kind, EstKind::Pathwise | EstKind::Stl | EstKind::Dreg)
        && !model.z_reparameterized()
        && spec.flavor != Flavor::None
    {
        return Err(ObjectiveError::EstimatorMismatch {
            detail: "pathwise-family estimators need a reparameterized z",
        });
    }
    Ok(())
}

/// Labeled item graph: `alpha * log q(y|x) + bound(x, y)`.
/// Returns the item node and the `log q(y|x)` value.
pub fn labeled_item<M: VariationalModel>(
    t: &mut Tape,
    model: &M,
    x: &M::Datum,
    y: usize,
    spec: &ObjectiveSpec,
    kind: EstKind,
    rng: &mut SplitMix64,
    train_mode: bool,
) -> Result<(NodeId, f64, Option<f64>), ObjectiveError> {
    validate(model, spec, kind)?;
    let ctx = model.encode(t, x, if train_mode { Some(rng) } else { None });
    let lqy = model.log_q_y(t, &ctx);
    let lqy_y = t.get(lqy, y);
    let lqy_val = t.scalar_val(lqy_y);
    let alpha_term = t.affc(lqy_y, spec.alpha, 0.0);
    let kl_diag = model.kl_z_value(t, &ctx);
    if spec.flavor == Flavor::None {
        return Ok((alpha_term, lqy_val, kl_diag));
    }
    let bound = supervised_bound(t, model, x, y, &ctx, spec, kind, rng)?;
    Ok((t.add(alpha_term, bound), lqy_val, kl_diag))
}

/// Unlabeled item graph: the flavor's unsupervised bound.
pub fn unlabeled_item<M: VariationalModel>(
    t: &mut Tape,
    model: &M,
    x: &M::Datum,
    spec: &ObjectiveSpec,
    kind: EstKind,
    rng: &mut SplitMix64,
    train_mode: bool,
) -> Result<(NodeId, Option<f64>), ObjectiveError> {
    validate(model, spec, kind)?;
    let ctx = model.encode(t, x, if train_mode { Some(rng) } else { None });
    let kl_diag = model.kl_z_value(t, &ctx);
    let ny = model.n_classes();
    let tuple_ok = (ny as u64)
        .checked_pow(spec.k as u32)
        .map(|c| c <= spec.tuple_budget as u64)
        .unwrap_or(false);
    let enum_ok = ny <= spec.y_enum_threshold
        && match spec.flavor {
            Flavor::Iwae | Flavor::Ipiwo => tuple_ok,
            _ => true,
        };
    let node = if enum_ok {
        unsup_bound_enum(t, model, x, &ctx, spec, kind, rng)?
    } else {
        unsup_bound_sampled(t, model, x, &ctx, spec, kind, rng)?
    };
    Ok((node, kl_diag))
}

// ----------------------------------------------------------------------
// Batch composition
// ----------------------------------------------------------------------

/// A built batch objective: the scalar node to backpropagate (its value is
/// the objective estimate under the chosen estimator) plus diagnostics.
pub struct BatchGraph {
    pub objective: NodeId,
    pub value: f64,
    pub labeled_values: Vec<f64>,
    pub unlabeled_values: Vec<f64>,
    /// Batch-mean `log q(y|x)` over labeled items (the alpha-term slope).
    pub mean_log_qy: f64,
    /// Batch-mean closed-form `KL[q(z|x)||p(z)]` when the model provides it.
    pub mean_kl_z: Option<f64>,
}

/// Build the full semi-supervised objective over one labeled and one
/// unlabeled batch:
/// `mean_lab[alpha log q(y|x) + bound(x,y)] + mean_unlab[bound(x)]`.
///
/// Per-item randomness derives from `(base_seed, side, index)`, so values are
/// independent of evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective<M: VariationalModel>(
    t: &mut Tape,
    model: &M,
    labeled: &[(&M::Datum, usize)],
    unlabeled: &[&M::Datum],
    spec: &ObjectiveSpec,
    kind: EstKind,
    base_seed: u64,
    train_mode: bool,
) -> Result<BatchGraph, ObjectiveError> {
    if labeled.is_empty() && spec.alpha > 0.0 {
        return Err(ObjectiveError::EmptyLabeledBatch);
    }
    let mut lab_nodes = Vec::with_capacity(labeled.len());
    let mut labeled_values = Vec::with_capacity(labeled.len());
    let mut lqy_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut kl_count = 0usize;
    for (idx, (x, y)) in labeled.iter().enumerate() {
        let mut rng = SplitMix64::seed_from_u64(SplitMix64::derive2(base_seed, 0, idx as u64));
        let (node, lqy, kl) = labeled_item(t, model, x, *y, spec, kind, &mut rng, train_mode)?;
        labeled_values.push(t.scalar_val(node));
        lab_nodes.push(node);
        lqy_sum += lqy;
        if let Some(k) = kl {
            kl_sum += k;
            kl_count += 1;
        }
    }
    let use_unlabeled = spec.flavor != Flavor::None;
    let mut unlab_nodes = Vec::new();
    let mut unlabeled_values = Vec::new();
    if use_unlabeled {
        for (idx, x) in unlabeled.iter().enumerate() {
            let mut rng = SplitMix64::seed_from_u64(SplitMix64::derive2(base_seed, 1, idx as u64));
            let (node, kl) = unlabeled_item(t, model, x, spec, kind, &mut rng, train_mode)?;
            unlabeled_values.push(t.scalar_val(node));
            unlab_nodes.push(node);
            if let Some(k) = kl {
                kl_sum += k;
                kl_count += 1;
            }
        }
    }

    let mut parts = Vec::with_capacity(2);
    if !lab_nodes.is_empty() {
        let s = sum_terms(t, &lab_nodes);
        parts.push(t.affc(s, 1.0 / lab_nodes.len() as f64, 0.0));
    }
    if !unlab_nodes.is_empty() {
        let s = sum_terms(t, &unlab_nodes);
        parts.push(t.affc(s, 1.0 / unlab_nodes.len() as f64, 0.0));
    }
    let objective = match parts.len() {
        0 => t.scalar(0.0),
        1 => parts[0],
        _ => t.add(parts[0], parts[1]),
    };
    Ok(BatchGraph {
        objective,
        value: t.scalar_val(objective),
        labeled_values,
        unlabeled_values,
        mean_log_qy: if labeled.is_empty() {
            0.0
        } else {
            lqy_sum / labeled.len() as f64
        },
        mean_kl_z: if kl_count > 0 {
            Some(kl_sum / kl_count as f64)
        } else {
            None
        },
    })
}

fn estimate_from(graph: &BatchGraph) -> BoundEstimate {
    let se_lab = fm::std_error(&graph.labeled_values);
    let se_unlab = fm::std_error(&graph.unlabeled_values);
    BoundEstimate {
        value: graph.value,
        std_error: fm::sqrt(se_lab * se_lab + se_unlab * se_unlab),
        n_samples: graph.labeled_values.len() + graph.unlabeled_values.len(),
    }
}

// ----------------------------------------------------------------------
// Named estimator entry points (value-level convenience API)
// ----------------------------------------------------------------------

/// Supervised ELBO estimate (`k`-sample average).
pub fn elbo_supervised<M: VariationalModel>(
    model: &M,
    x: &M::Datum,
    y: usize,
    k: usize,
    rng: &mut SplitMix64,
) -> Result<BoundEstimate, ObjectiveError> {
    let spec = ObjectiveSpec::new(Flavor::Vae, k, 0.0);
    let mut t = Tape::new(model.params());
    let ctx = model.encode(&mut t, x, None);
    let node = supervised_bound(&mut t, model, x, y, &ctx, &spec, EstKind::Pathwise, rng)?;
    Ok(BoundEstimate {
        value: t.scalar_val(node),
        std_error: 0.0,
        n_samples: k,
    })
}

/// Unsupervised ELBO estimate; the outer `y`-expectation is enumerated
/// exactly when `|Y|` is within the threshold.
pub fn elbo_unsupervised<M: VariationalModel>(
    model: &M,
    x: &M::Datum,
    rng: &mut SplitMix64,
) -> Result<BoundEstimate, ObjectiveError> {
    let spec = ObjectiveSpec::new(Flavor::Vae, 1, 0.0);
    let mut t = Tape::new(model.params());
    let (node, _) = unlabeled_item(&mut t, model, x, &spec, EstKind::Pathwise, rng, false)?;
    Ok(BoundEstimate {
        value: t.scalar_val(node),
        std_error: 0.0,
        n_samples: 1,
    })
}

/// IWAE bound estimate: supervised (`y` given) or the joint unsupervised form.
pub fn iwae<M: VariationalModel>(
    model: &M,
    x: &M::Datum,
    y: Option<usize>,
    spec: &ObjectiveSpec,
    rng: &mut SplitMix64,
) -> Result<BoundEstimate, ObjectiveError> {
    let spec = ObjectiveSpec {
        flavor: Flavor::Iwae,
        ..spec.clone()
    };
    let mut t = Tape::new(model.params());
    let node = match y {
        Some(y) => {
            let ctx = model.encode(&mut t, x, None);
            supervised_bound(&mut t, model, x, y, &ctx, &spec, EstKind::Pathwise, rng)?
        }
        None => unlabeled_item(&mut t, model, x, &spec, EstKind::Pathwise, rng, false)?.0,
    };
    Ok(BoundEstimate {
        value: t.scalar_val(node),
        std_error: 0.0,
        n_samples: spec.k,
    })
}

/// PIWO bound estimate on an unlabeled datum.
pub fn piwo<M: VariationalModel>(
    model: &M,
    x: &M::Datum,
    spec: &ObjectiveSpec,
    rng: &mut SplitMix64,
) -> Result<BoundEstimate, ObjectiveError> {
    let spec = ObjectiveSpec {
        flavor: Flavor::Piwo,
        ..spec.clone()
    };
    let mut t = Tape::new(model.params());
    let (node, _) = unlabeled_item(&mut t, model, x, &spec, EstKind::Pathwise, rng, false)?;
    Ok(BoundEstimate {
        value: t.scalar_val(node),
        std_error: 0.0,
        n_samples: spec.k,
    })
}

/// iPIWO bound estimate on an unlabeled datum.
pub fn ipiwo<M: VariationalModel>(
    model: &M,
    x: &M::Datum,
    spec: &ObjectiveSpec,
    rng: &mut SplitMix64,
) -> Result<BoundEstimate, ObjectiveError> {
    let spec = ObjectiveSpec {
        flavor: Flavor::Ipiwo,
        ..spec.clone()
    };
    let mut t = Tape::new(model.params());
    let (node, _) = unlabeled_item(&mut t, model, x, &spec, EstKind::Pathwise, rng, false)?;
    Ok(BoundEstimate {
        value: t.scalar_val(node),
        std_error: 0.0,
        n_samples: spec.k,
    })
}

/// The M2 objective `-J^alpha` over a labeled and an unlabeled batch
/// (requires `flavor = VAE`).
pub fn j_alpha<M: VariationalModel>(
    model: &M,
    labeled: &[(&M::Datum, usize)],
    unlabeled: &[&M::Datum],
    spec: &ObjectiveSpec,
    rng: &mut SplitMix64,
) -> Result<BoundEstimate, ObjectiveError> {
    assert_eq!(spec.flavor, Flavor::Vae, "j_alpha is the VAE-flavor objective");
    semi_supervised_objective(model, labeled, unlabeled, spec, rng)
}

/// The full semi-supervised objective for any flavor.
pub fn semi_supervised_objective<M: VariationalModel>(
    model: &M,
    labeled: &[(&M::Datum, usize)],
    unlabeled: &[&M::Datum],
    spec: &ObjectiveSpec,
    rng: &mut SplitMix64,
) -> Result<BoundEstimate, ObjectiveError> {
    let base_seed = rng.next_u64();
    let mut t = Tape::new(model.params());
    let graph = batch_objective(
        &mut t,
        model,
        labeled,
        unlabeled,
        spec,
        EstKind::Pathwise,
        base_seed,
        false,
    )?;
    Ok(estimate_from(&graph))
}

// ----------------------------------------------------------------------
// Exact tape-mode expectations (enumerable-z models)
// ----------------------------------------------------------------------

/// Exact expectation of the item bound as an expression on the tape, by
/// enumerating latent states and sample tuples. This is the differentiable
/// counterpart of the plain-`f64` enumeration oracle.
pub fn exact_item_bound<M: VariationalModel>(
    t: &mut Tape,
    model: &M,
    x: &M::Datum,
    y: Option<usize>,
    spec: &ObjectiveSpec,
) -> Result<NodeId, ObjectiveError> {
    let nz = model.enumerable_z().ok_or(ObjectiveError::NotEnumerable)?;
    let ctx = model.encode(t, x, None);
    let lqz_all = model
        .log_q_z_all(t, &ctx)
        .ok_or(ObjectiveError::NotEnumerable)?;
    let ny = model.n_classes();
    let k = spec.k;
    let beta = spec.beta;

    let qz_all = t.exp(lqz_all);
    let lqz_get: Vec<NodeId> = (0..nz).map(|z| t.get(lqz_all, z)).collect();
    let qz_get: Vec<NodeId> = (0..nz).map(|z| t.get(qz_all, z)).collect();
    let qz_val: Vec<f64> = qz_get.iter().map(|&n| t.scalar_val(n)).collect();
    let states: Vec<M::Latent> = (0..nz).map(|z| model.z_state(z)).collect();

    // Supervised weights S[z] and joint weights W[z][y].
    let sup_w = |t: &mut Tape, y: usize| -> Vec<NodeId> {
        (0..nz)
            .map(|z| sup_weight(t, model, x, y, &states[z], lqz_get[z], beta))
            .collect()
    };

    match (spec.flavor, y) {
        (Flavor::None, _) => Ok(t.scalar(0.0)),
        (Flavor::Vae, Some(y)) | (Flavor::Ipiwo, Some(y)) => {
            // Exact ELBO(x, y) = Σ_z q(z|x) S[z].
            let w = sup_w(t, y);
            let mut terms = Vec::with_capacity(nz);
            for z in 0..nz {
                terms.push(t.mul(qz_get[z], w[z]));
            }
            Ok(sum_terms(t, &terms))
        }
        (Flavor::Iwae, Some(y)) | (Flavor::Piwo, Some(y)) => {
            guard_tuples(nz, k, spec.tuple_budget)?;
            let w = sup_w(t, y);
            let mut terms = Vec::new();
            for_each_tuple(nz, k, |tuple| {
                let mut prodq = qz_get[tuple[0]];
                for &z in &tuple[1..] {
                    prodq = t.mul(prodq, qz_get[z]);
                }
                let picked: Vec<NodeId> = tuple.iter().map(|&z| w[z]).collect();
                let stacked = t.stack(&picked);
                let m = t.log_mean_exp(stacked);
                terms.push(t.mul(prodq, m));
            });
            Ok(sum_terms(t, &terms))
        }
        (_, None) => {
            let yi = y_info(t, model, &ctx);
            // Joint weight matrix W[z][y].
            let mut w = Vec::with_capacity(nz);
            for z in 0..nz {
                let mut row = Vec::with_capacity(ny);
                for yy in 0..ny {
                    row.push(joint_weight(
                        t,
                        model,
                        x,
                        yy,
                        &states[z],
                        lqz_get[z],
                        yi.lqy_get[yy],
                        beta,
                    ));
                }
                w.push(row);
            }
            match spec.flavor {
                Flavor::Vae => {
                    let mut terms = Vec::new();
                    for yy in 0..ny {
                        for z in 0..nz {
                            let p = t.mul(yi.qy_node[yy], qz_get[z]);
                            terms.push(t.mul(p, w[z][yy]));
                        }
                    }
                    Ok(sum_terms(t, &terms))
                }
                Flavor::Piwo => {
                    guard_tuples(nz, k, spec.tuple_budget)?;
                    let mut terms = Vec::new();
                    for yy in 0..ny {
                        let mut inner = Vec::new();
                        for_each_tuple(nz, k, |tuple| {
                            let mut prodq = qz_get[tuple[0]];
                            for &z in &tuple[1..] {
                                prodq = t.mul(prodq, qz_get[z]);
                            }
                            let picked: Vec<NodeId> =
                                tuple.iter().map(|&z| w[z][yy]).collect();
                            let stacked = t.stack(&picked);
                            let m = t.log_mean_exp(stacked);
                            inner.push(t.mul(prodq, m));
                        });
                        let inner_sum = sum_terms(t, &inner);
                        terms.push(t.mul(yi.qy_node[yy], inner_sum));
                    }
                    Ok(sum_terms(t, &terms))
                }
                Flavor::Ipiwo => {
                    guard_tuples(ny, k, spec.tuple_budget)?;
                    let mut terms = Vec::new();
                    for z in 0..nz {
                        let mut inner = Vec::new();
                        for_each_tuple(ny, k, |tuple| {
                            let prodq = product_node(t, &yi, tuple);
                            let picked: Vec<NodeId> =
                                tuple.iter().map(|&yy| w[z][yy]).collect();
                            let stacked = t.stack(&picked);
                            let m = t.log_mean_exp(stacked);
                            inner.push(t.mul(prodq, m));
                        });
                        let inner_sum = sum_terms(t, &inner);
                        terms.push(t.mul(qz_get[z], inner_sum));
                    }
                    Ok(sum_terms(t, &terms))
                }
                Flavor::Iwae => {
                    guard_tuples(ny * nz, k, spec.tuple_budget)?;
                    let mut terms = Vec::new();
                    // Tuple over joint (y, z) pairs, index = y * nz + z.
                    for_each_tuple(ny * nz, k, |tuple| {
                        let mut prodq: Option<NodeId> = None;
                        let mut picked = Vec::with_capacity(k);
                        for &pair in tuple {
                            let (yy, z) = (pair / nz, pair % nz);
                            let p = t.mul(yi.qy_node[yy], qz_get[z]);
                            prodq = Some(match prodq {
                                Some(acc) => t.mul(acc, p),
                                None => p,
                            });
                            picked.push(w[z][yy]);
                        }
                        let stacked = t.stack(&picked);
                        let m = t.log_mean_exp(stacked);
                        terms.push(t.mul(prodq.unwrap(), m));
                    });
                    Ok(sum_terms(t, &terms))
                }
                Flavor::None => unreachable!(),
            }
        }
    }
    .map(|node| {
        // Quiet the unused warning for models with zero-probability states.
        let _ = &qz_val;
        node
    })
}

// ----------------------------------------------------------------------
// VariationalModel for the tabular oracle substrate
// ----------------------------------------------------------------------

pub struct TabularCtx {
    x: usize,
    lqy: NodeId,
    lqz_all: NodeId,
}

impl VariationalModel for crate::tabular::TabularModel {
    type Datum = usize;
    type Ctx = TabularCtx;
    type Latent = usize;

    fn n_classes(&self) -> usize {
        self.ny()
    }

    fn params(&self) -> &ParamStore {
        self.params()
    }

    fn z_reparameterized(&self) -> bool {
        false
    }

    fn encode(&self, t: &mut Tape, x: &usize, _rng: Option<&mut SplitMix64>) -> TabularCtx {
        let [_, _, _, inf_y, inf_z] = self.param_ids();
        let ry = t.param_row(inf_y, *x);
        let lqy = t.log_softmax(ry);
        let rz = t.param_row(inf_z, *x);
        let lqz_all = t.log_softmax(rz);
        TabularCtx {
            x: *x,
            lqy,
            lqz_all,
        }
    }

    fn log_q_y(&self, _t: &mut Tape, ctx: &TabularCtx) -> NodeId {
        ctx.lqy
    }

    fn sample_z(&self, t: &mut Tape, ctx: &TabularCtx, rng: &mut SplitMix64) -> usize {
        let probs: Vec<f64> = t.val(ctx.lqz_all).iter().map(|&l| fm::exp(l)).collect();
        let u = rng.next_f64();
        let mut cum = 0.0;
        for (i, p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return i;
            }
        }
        probs.len() - 1
    }

    fn log_q_z(&self, t: &mut Tape, ctx: &TabularCtx, z: &usize, detach_q_params: bool) -> NodeId {
        if detach_q_params {
            let [_, _, _, _, inf_z] = self.param_ids();
            let x = ctx.x;
            let z = *z;
            t.frozen(|t| {
                let r = t.param_row(inf_z, x);
                let ls = t.log_softmax(r);
                t.get(ls, z)
            })
        } else {
            t.get(ctx.lqz_all, *z)
        }
    }

    fn log_prior(&self, t: &mut Tape, y: usize, z: &usize) -> NodeId {
        let [prior_z, gen_y, _, _, _] = self.param_ids();
        let pz = t.param(prior_z);
        let lpz = t.log_softmax(pz);
        let lpz_z = t.get(lpz, *z);
        let ry = t.param_row(gen_y, *z);
        let lpy = t.log_softmax(ry);
        let lpy_y = t.get(lpy, y);
        t.add(lpz_z, lpy_y)
    }

    fn log_lik(&self, t: &mut Tape, x: &usize, y: usize, z: &usize) -> NodeId {
        let [_, _, gen_x, _, _] = self.param_ids();
        let row = t.param_row(gen_x, y * self.nz() + z);
        let ls = t.log_softmax(row);
        t.get(ls, *x)
    }

    fn detach_latent(&self, _t: &mut Tape, z: &usize) -> usize {
        *z
    }

    fn enumerable_z(&self) -> Option<usize> {
        Some(self.nz())
    }

    fn z_state(&self, i: usize) -> usize {
        i
    }

    fn log_q_z_all(&self, _t: &mut Tape, ctx: &TabularCtx) -> Option<NodeId> {
        Some(ctx.lqz_all)
    }
}
