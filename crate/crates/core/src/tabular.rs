//! Fully enumerable finite models over `(x, y, z)`.
//!
//! A [`TabularModel`] stores five raw-logit tables mapped through row-wise
//! softmax: a prior over `z`, a prior head `p(y|z)`, an emission table
//! `p(x|y,z)`, and the two inference tables `q(y|x)` and `q(z|x)`. The
//! variational posterior factorizes as `q(y,z|x) = q(y|x) q(z|x)` by
//! construction.
//!
//! Everything in this module is computed by exhaustive summation in `f64`:
//! marginals, posteriors, KL terms, ELBO identities, and the exact
//! expectations of every importance-weighted bound (by enumerating all
//! sample tuples weighted by their `q`-probabilities). These are the oracles
//! the Monte Carlo estimators and gradient estimators are checked against;
//! nothing here touches the expression tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::fm;
use crate::objectives::{Flavor, ObjectiveSpec};
use crate::rng::SplitMix64;
use crate::tape::{ParamId, ParamStore, Role};

/// Default cap on enumerated sample tuples in [`TabularModel::exact_bound_expectation`].
pub const DEFAULT_TUPLE_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub enum TabularError {
    /// `p(x) = 0`: the posterior is undefined.
    ZeroEvidence { x: usize },
    /// Tuple enumeration would exceed the configured budget; use the Monte
    /// Carlo estimators instead.
    BudgetExceeded { needed: u64, budget: u64 },
    /// Index outside the finite support.
    OutOfSupport { what: &'static str, got: usize, size: usize },
}

impl core::fmt::Display for TabularError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TabularError::ZeroEvidence { x } => write!(f, "p(x={x}) = 0; posterior undefined"),
            TabularError::BudgetExceeded { needed, budget } => write!(
                f,
                "exact enumeration needs {needed} tuples, budget is {budget}; use Monte Carlo"
            ),
            TabularError::OutOfSupport { what, got, size } => {
                write!(f, "{what} index {got} out of support (size {size})")
            }
        }
    }
}

impl core::error::Error for TabularError {}

/// The four exact KL divergences of the two ELBO identities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlTerms {
    /// `KL[q(y,z|x) || p(y,z|x)]`
    pub kl_yz: f64,
    /// `KL[q(z|x,y) || p(z|x,y)]` (with `q(z|x,y) = q(z|x)`)
    pub kl_z_given_xy: f64,
    /// `KL[q(y|x) || p(y|x)]`
    pub kl_y: f64,
    /// `KL[q(z|x) || p(z|x)]`
    pub kl_z: f64,
    /// True when some `q > 0` landed on `p = 0` (a KL is `+inf`).
    pub support_violation: bool,
}

/// Exact joint posterior `p(y,z|x)` with its marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// Row-major `[y][z]`.
    pub joint: Vec<f64>,
    pub marginal_y: Vec<f64>,
    pub marginal_z: Vec<f64>,
    pub ny: usize,
    pub nz: usize,
}

/// Probability tables snapshotted from the raw logits.
#[derive(Debug, Clone)]
pub struct Tables {
    pub nz: usize,
    pub ny: usize,
    pub nx: usize,
    /// `p(z)`, length `nz`.
    pub p_z: Vec<f64>,
    /// `p(y|z)`, row-major `[z][y]`.
    pub p_y_z: Vec<f64>,
    /// `p(x|y,z)`, row-major `[y][z][x]`.
    pub p_x_yz: Vec<f64>,
    /// `q(y|x)`, row-major `[x][y]`.
    pub q_y_x: Vec<f64>,
    /// `q(z|x)`, row-major `[x][z]`.
    pub q_z_x: Vec<f64>,
}

impl Tables {
    #[inline]
    pub fn p_x_given(&self, y: usize, z: usize, x: usize) -> f64 {
        self.p_x_yz[(y * self.nz + z) * self.nx + x]
    }

    #[inline]
    pub fn p_y_given(&self, z: usize, y: usize) -> f64 {
        self.p_y_z[z * self.ny + y]
    }

    #[inline]
    pub fn q_y_given(&self, x: usize, y: usize) -> f64 {
        self.q_y_x[x * self.ny + y]
    }

    #[inline]
    pub fn q_z_given(&self, x: usize, z: usize) -> f64 {
        self.q_z_x[x * self.nz + z]
    }

    /// `log p(x,y,z)`.
    #[inline]
    pub fn log_joint(&self, x: usize, y: usize, z: usize) -> f64 {
        fm::ln(self.p_z[z]) + fm::ln(self.p_y_given(z, y)) + fm::ln(self.p_x_given(y, z, x))
    }
}

/// Fully enumerable generative + inference model. Parameters are raw logit
/// arrays; each conditional is the row-wise softmax of its block.
#[derive(Debug, Clone)]
pub struct TabularModel {
    nz: usize,
    ny: usize,
    nx: usize,
    params: ParamStore,
    p_prior_z: ParamId,
    p_gen_y: ParamId,
    p_gen_x: ParamId,
    p_inf_y: ParamId,
    p_inf_z: ParamId,
}

fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let z = fm::logsumexp(row);
        out.extend(row.iter().map(|l| fm::exp(l - z)));
    }
    out
}

impl TabularModel {
    /// Build from raw logits. Shapes: `prior_z[nz]`, `gen_y[nz*ny]` as
    /// `[z][y]`, `gen_x[ny*nz*nx]` as `[y][z][x]`, `inf_y[nx*ny]` as
    /// `[x][y]`, `inf_z[nx*nz]` as `[x][z]`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_logits(
        nz: usize,
        ny: usize,
        nx: usize,
        prior_z: &[f64],
        gen_y: &[f64],
        gen_x: &[f64],
        inf_y: &[f64],
        inf_z: &[f64],
    ) -> Self {
        assert_eq!(prior_z.len(), nz);
        assert_eq!(gen_y.len(), nz * ny);
        assert_eq!(gen_x.len(), ny * nz * nx);
        assert_eq!(inf_y.len(), nx * ny);
        assert_eq!(inf_z.len(), nx * nz);
        let mut params = ParamStore::new();
        let p_prior_z = params.add("prior_z", Role::Theta, 1, nz, prior_z);
        let p_gen_y = params.add("gen_y_given_z", Role::Theta, nz, ny, gen_y);
        let p_gen_x = params.add("gen_x_given_yz", Role::Theta, ny * nz, nx, gen_x);
        let p_inf_y = params.add("inf_y_given_x", Role::Phi, nx, ny, inf_y);
        let p_inf_z = params.add("inf_z_given_x", Role::Phi, nx, nz, inf_z);
        Self {
            nz,
            ny,
            nx,
            params,
            p_prior_z,
            p_gen_y,
            p_gen_x,
            p_inf_y,
            p_inf_z,
        }
    }

    /// Build from probability tables (`ln p` logits; zero entries allowed and
    /// map to `-inf`). Layouts as in [`Self::from_logits`].
    #[allow(clippy::too_many_arguments)]
    pub fn from_probs(
        nz: usize,
        ny: usize,
        nx: usize,
        prior_z: &[f64],
        gen_y: &[f64],
        gen_x: &[f64],
        inf_y: &[f64],
        inf_z: &[f64],
    ) -> Self {
        let ln = |v: &[f64]| v.iter().map(|&p| fm::ln(p)).collect::<Vec<_>>();
        Self::from_logits(
            nz,
            ny,
            nx,
            &ln(prior_z),
            &ln(gen_y),
            &ln(gen_x),
            &ln(inf_y),
            &ln(inf_z),
        )
    }

    /// Uniform model: every conditional is uniform over its support.
    pub fn uniform(nz: usize, ny: usize, nx: usize) -> Self {
        Self::from_logits(
            nz,
            ny,
            nx,
            &vec![0.0; nz],
            &vec![0.0; nz * ny],
            &vec![0.0; ny * nz * nx],
            &vec![0.0; nx * ny],
            &vec![0.0; nx * nz],
        )
    }

    /// Random model with logits drawn from `scale * N(0,1)`.
    pub fn random(nz: usize, ny: usize, nx: usize, scale: f64, rng: &mut SplitMix64) -> Self {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| scale * rng.next_normal()).collect() };
        let prior_z = draw(nz);
        let gen_y = draw(nz * ny);
        let gen_x = draw(ny * nz * nx);
        let inf_y = draw(nx * ny);
        let inf_z = draw(nx * nz);
        Self::from_logits(nz, ny, nx, &prior_z, &gen_y, &gen_x, &inf_y, &inf_z)
    }

    /// The committed verification fixture: `|Z| = |Y| = |X| = 2` with fixed,
    /// asymmetric tables. Golden values derived from it are produced by the
    /// enumeration oracle and frozen on disk, never typed by hand.
    pub fn fix_a() -> Self {
        Self::from_probs(
            2,
            2,
            2,
            &FIX_A_PRIOR_Z,
            &FIX_A_GEN_Y,
            &FIX_A_GEN_X,
            &FIX_A_INF_Y,
            &FIX_A_INF_Z,
        )
    }

    /// Random model whose true posterior provably factorizes over `(y, z)`:
    /// the prior on `y` ignores `z` and the emission ignores `z`, so
    /// `p(y,z|x) = p(y|x) p(z)`. `q` is then set exactly to the posterior
    /// marginals, making every importance weight constant.
    pub fn random_with_factorizing_posterior(
        nz: usize,
        ny: usize,
        nx: usize,
        scale: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        let prior_z: Vec<f64> = (0..nz).map(|_| scale * rng.next_normal()).collect();
        let gen_y_row: Vec<f64> = (0..ny).map(|_| scale * rng.next_normal()).collect();
        let mut gen_y = Vec::with_capacity(nz * ny);
        for _ in 0..nz {
            gen_y.extend_from_slice(&gen_y_row);
        }
        let mut gen_x_rows = Vec::with_capacity(ny);
        for _ in 0..ny {
            gen_x_rows.push((0..nx).map(|_| scale * rng.next_normal()).collect::<Vec<_>>());
        }
        let mut gen_x = Vec::with_capacity(ny * nz * nx);
        for row in &gen_x_rows {
            for _ in 0..nz {
                gen_x.extend_from_slice(row);
            }
        }
        let mut model = Self::from_logits(
            nz,
            ny,
            nx,
            &prior_z,
            &gen_y,
            &gen_x,
            &vec![0.0; nx * ny],
            &vec![0.0; nx * nz],
        );
        model.set_q_to_posterior_marginals();
        model
    }

    /// Overwrite `q(y|x)` and `q(z|x)` with the exact posterior marginals.
    pub fn set_q_to_posterior_marginals(&mut self) {
        let mut inf_y = Vec::with_capacity(self.nx * self.ny);
        let mut inf_z = Vec::with_capacity(self.nx * self.nz);
        for x in 0..self.nx {
            let post = self
                .exact_posterior(x)
                .expect("posterior marginals need p(x) > 0 for every x");
            inf_y.extend(post.marginal_y.iter().map(|&p| fm::ln(p)));
            inf_z.extend(post.marginal_z.iter().map(|&p| fm::ln(p)));
        }
        self.params.slice_mut(self.p_inf_y).copy_from_slice(&inf_y);
        self.params.slice_mut(self.p_inf_z).copy_from_slice(&inf_z);
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Block handles in layout order: prior_z, gen_y, gen_x, inf_y, inf_z.
    pub fn param_ids(&self) -> [ParamId; 5] {
        [
            self.p_prior_z,
            self.p_gen_y,
            self.p_gen_x,
            self.p_inf_y,
            self.p_inf_z,
        ]
    }

    /// Snapshot the probability tables from the current raw logits.
    pub fn tables(&self) -> Tables {
        Tables {
            nz: self.nz,
            ny: self.ny,
            nx: self.nx,
            p_z: softmax_rows(self.params.slice(self.p_prior_z), self.nz),
            p_y_z: softmax_rows(self.params.slice(self.p_gen_y), self.ny),
            p_x_yz: softmax_rows(self.params.slice(self.p_gen_x), self.nx),
            q_y_x: softmax_rows(self.params.slice(self.p_inf_y), self.ny),
            q_z_x: softmax_rows(self.params.slice(self.p_inf_z), self.nz),
        }
    }

    fn check_x(&self, x: usize) -> Result<(), TabularError> {
        if x >= self.nx {
            return Err(TabularError::OutOfSupport {
                what: "x",
                got: x,
                size: self.nx,
            });
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Exact marginals and posteriors
    // ------------------------------------------------------------------

    /// `log p(x) = log Σ_{y,z} p(z) p(y|z) p(x|y,z)`.
    pub fn exact_log_px(&self, x: usize) -> f64 {
        let t = self.tables();
        let mut terms = Vec::with_capacity(self.ny * self.nz);
        for y in 0..self.ny {
            for z in 0..self.nz {
                terms.push(t.log_joint(x, y, z));
            }
        }
        fm::logsumexp(&terms)
    }

    /// `log p(x, y) = log Σ_z p(z) p(y|z) p(x|y,z)`.
    pub fn exact_log_pxy(&self, x: usize, y: usize) -> f64 {
        let t = self.tables();
        let terms: Vec<f64> = (0..self.nz).map(|z| t.log_joint(x, y, z)).collect();
        fm::logsumexp(&terms)
    }

    /// `log p(x | y) = log p(x, y) - log p(y)` with `p(y) = Σ_z p(z) p(y|z)`.
    pub fn exact_log_px_given_y(&self, x: usize, y: usize) -> f64 {
        self.exact_log_pxy(x, y) - fm::ln(self.marginal_p_y()[y])
    }

    /// `log p(x | z) = log Σ_y p(y|z) p(x|y,z)`.
    pub fn exact_log_px_given_z(&self, x: usize, z: usize) -> f64 {
        let t = self.tables();
        let terms: Vec<f64> = (0..self.ny)
            .map(|y| fm::ln(t.p_y_given(z, y)) + fm::ln(t.p_x_given(y, z, x)))
            .collect();
        fm::logsumexp(&terms)
    }

    /// Model marginal `p(y) = Σ_z p(z) p(y|z)`.
    pub fn marginal_p_y(&self) -> Vec<f64> {
        let t = self.tables();
        let mut out = vec![0.0; self.ny];
        for z in 0..self.nz {
            for y in 0..self.ny {
                out[y] += t.p_z[z] * t.p_y_given(z, y);
            }
        }
        out
    }

    /// Exact joint posterior `p(y,z|x)` and its marginals.
    pub fn exact_posterior(&self, x: usize) -> Result<Posterior, TabularError> {
        self.check_x(x)?;
        let t = self.tables();
        let log_px = self.exact_log_px(x);
        if log_px == f64::NEG_INFINITY {
            return Err(TabularError::ZeroEvidence { x });
        }
        let mut joint = vec![0.0; self.ny * self.nz];
        let mut marginal_y = vec![0.0; self.ny];
        let mut marginal_z = vec![0.0; self.nz];
        for y in 0..self.ny {
            for z in 0..self.nz {
                let p = fm::exp(t.log_joint(x, y, z) - log_px);
                joint[y * self.nz + z] = p;
                marginal_y[y] += p;
                marginal_z[z] += p;
            }
        }
        Ok(Posterior {
            joint,
            marginal_y,
            marginal_z,
            ny: self.ny,
            nz: self.nz,
        })
    }

    // ------------------------------------------------------------------
    // Exact KL terms
    // ------------------------------------------------------------------

    /// All four KL divergences at `(x, y)`, by exhaustive summation.
    /// `0 log 0 = 0`; `q > 0` where `p = 0` yields `+inf` with the
    /// `support_violation` flag set.
    pub fn exact_kl_terms(&self, x: usize, y: usize) -> Result<KlTerms, TabularError> {
        self.check_x(x)?;
        if y >= self.ny {
            return Err(TabularError::OutOfSupport {
                what: "y",
                got: y,
                size: self.ny,
            });
        }
        let t = self.tables();
        let post = self.exact_posterior(x)?;
        let mut violation = false;

        fn kl_sum(pairs: &mut dyn Iterator<Item = (f64, f64)>, violation: &mut bool) -> f64 {
            let mut acc = 0.0;
            for (q, p) in pairs {
                if q > 0.0 {
                    if p > 0.0 {
                        acc += q * (fm::ln(q) - fm::ln(p));
                    } else {
                        *violation = true;
                        acc = f64::INFINITY;
                    }
                }
            }
            acc
        }

        // KL[q(y,z|x) || p(y,z|x)] with q(y,z|x) = q(y|x) q(z|x).
        let nz = self.nz;
        let kl_yz = kl_sum(
            &mut (0..self.ny).flat_map(|yy| {
                let t = &t;
                let post = &post;
                (0..nz).map(move |zz| {
                    (
                        t.q_y_given(x, yy) * t.q_z_given(x, zz),
                        post.joint[yy * nz + zz],
                    )
                })
            }),
            &mut violation,
        );

        // KL[q(z|x,y) || p(z|x,y)], q(z|x,y) = q(z|x).
        let log_pxy = self.exact_log_pxy(x, y);
        let kl_z_given_xy = if log_pxy == f64::NEG_INFINITY {
            violation = true;
            f64::INFINITY
        } else {
            kl_sum(
                &mut (0..self.nz).map(|zz| {
                    (
                        t.q_z_given(x, zz),
                        fm::exp(t.log_joint(x, y, zz) - log_pxy),
                    )
                }),
                &mut violation,
            )
        };

        let kl_y = kl_sum(
            &mut (0..self.ny).map(|yy| (t.q_y_given(x, yy), post.marginal_y[yy])),
            &mut violation,
        );
        let kl_z = kl_sum(
            &mut (0..self.nz).map(|zz| (t.q_z_given(x, zz), post.marginal_z[zz])),
            &mut violation,
        );

        Ok(KlTerms {
            kl_yz,
            kl_z_given_xy,
            kl_y,
            kl_z,
            support_violation: violation,
        })
    }

    // ------------------------------------------------------------------
    // Exact ELBO values and identity residuals
    // ------------------------------------------------------------------

    /// Exact supervised ELBO:
    /// `Σ_z q(z|x) [log p(x,y,z) - log q(z|x)]`.
    pub fn exact_elbo_supervised(&self, x: usize, y: usize) -> f64 {
        let t = self.tables();
        let mut acc = 0.0;
        for z in 0..self.nz {
            let q = t.q_z_given(x, z);
            if q > 0.0 {
                acc += q * (t.log_joint(x, y, z) - fm::ln(q));
            }
        }
        acc
    }

    /// Exact unsupervised ELBO:
    /// `Σ_{y,z} q(y|x) q(z|x) [log p(x,y,z) - log q(y|x) - log q(z|x)]`.
    pub fn exact_elbo_unsupervised(&self, x: usize) -> f64 {
        let t = self.tables();
        let mut acc = 0.0;
        for y in 0..self.ny {
            let qy = t.q_y_given(x, y);
            if qy == 0.0 {
                continue;
            }
            for z in 0..self.nz {
                let qz = t.q_z_given(x, z);
                if qz > 0.0 {
                    acc += qy * qz * (t.log_joint(x, y, z) - fm::ln(qy) - fm::ln(qz));
                }
            }
        }
        acc
    }

    /// Residual of the ELBO identity `E_q[log p - log q] = log p - KL`.
    /// Supervised form when `y` is given, unsupervised otherwise.
    pub fn exact_elbo_identity_check(
        &self,
        x: usize,
        y: Option<usize>,
    ) -> Result<f64, TabularError> {
        let kl = self.exact_kl_terms(x, y.unwrap_or(0))?;
        let residual = match y {
            Some(y) => {
                let lhs = self.exact_elbo_supervised(x, y);
                let rhs = self.exact_log_pxy(x, y) - kl.kl_z_given_xy;
                fm::abs(lhs - rhs)
            }
            None => {
                let lhs = self.exact_elbo_unsupervised(x);
                let rhs = self.exact_log_px(x) - kl.kl_yz;
                fm::abs(lhs - rhs)
            }
        };
        Ok(residual)
    }

    // ------------------------------------------------------------------
    // Exact expectations of the importance-weighted bounds
    // ------------------------------------------------------------------

    /// Exact value of `E[bound]` for the given objective flavor and sample
    /// count, by enumerating every sample tuple weighted by its
    /// `q`-probability. Annealing is ignored (`beta = 1`). Refuses rather
    /// than subsampling when the tuple count exceeds `budget`.
    pub fn exact_bound_expectation(
        &self,
        spec: &ObjectiveSpec,
        x: usize,
        y: Option<usize>,
        budget: u64,
    ) -> Result<f64, TabularError> {
        self.check_x(x)?;
        let k = spec.k as u32;
        match (spec.flavor, y) {
            (Flavor::Vae, Some(y)) => Ok(self.exact_elbo_supervised(x, y)),
            (Flavor::Vae, None) => Ok(self.exact_elbo_unsupervised(x)),
            (Flavor::Iwae, Some(y)) => {
                self.guard_budget((self.nz as u64).checked_pow(k), budget)?;
                Ok(self.exact_iwae_supervised(x, y, spec.k))
            }
            (Flavor::Iwae, None) => {
                self.guard_budget(((self.ny * self.nz) as u64).checked_pow(k), budget)?;
                Ok(self.exact_iwae_unsupervised(x, spec.k))
            }
            (Flavor::Piwo, None) => {
                self.guard_budget(
                    (self.nz as u64)
                        .checked_pow(k)
                        .and_then(|n| n.checked_mul(self.ny as u64)),
                    budget,
                )?;
                Ok(self.exact_piwo(x, spec.k))
            }
            (Flavor::Ipiwo, None) => {
                self.guard_budget(
                    (self.ny as u64)
                        .checked_pow(k)
                        .and_then(|n| n.checked_mul(self.nz as u64)),
                    budget,
                )?;
                Ok(self.exact_ipiwo(x, spec.k))
            }
            // Supervised data under PIWO uses the supervised IWAE bound;
            // under iPIWO it uses the plain supervised ELBO.
            (Flavor::Piwo, Some(y)) => {
                self.guard_budget((self.nz as u64).checked_pow(k), budget)?;
                Ok(self.exact_iwae_supervised(x, y, spec.k))
            }
            (Flavor::Ipiwo, Some(y)) => Ok(self.exact_elbo_supervised(x, y)),
            (Flavor::None, _) => Ok(0.0),
        }
    }

    fn guard_budget(&self, needed: Option<u64>, budget: u64) -> Result<(), TabularError> {
        match needed {
            Some(n) if n <= budget => Ok(()),
            Some(n) => Err(TabularError::BudgetExceeded { needed: n, budget }),
            None => Err(TabularError::BudgetExceeded {
                needed: u64::MAX,
                budget,
            }),
        }
    }

    /// `E_{z_1..z_k ~ q(z|x)} [log (1/k) Σ_i p(x,y,z_i)/q(z_i|x)]`, exactly.
    pub fn exact_iwae_supervised(&self, x: usize, y: usize, k: usize) -> f64 {
        let t = self.tables();
        let lw: Vec<f64> = (0..self.nz)
            .map(|z| t.log_joint(x, y, z) - fm::ln(t.q_z_given(x, z)))
            .collect();
        let qz: Vec<f64> = (0..self.nz).map(|z| t.q_z_given(x, z)).collect();
        expect_over_tuples(&qz, k, &lw)
    }

    /// `E_{(y_i,z_i)^k ~ q(y,z|x)} [log (1/k) Σ_i p(x,y_i,z_i)/q(y_i,z_i|x)]`.
    pub fn exact_iwae_unsupervised(&self, x: usize, k: usize) -> f64 {
        let t = self.tables();
        let mut probs = Vec::with_capacity(self.ny * self.nz);
        let mut lw = Vec::with_capacity(self.ny * self.nz);
        for y in 0..self.ny {
            for z in 0..self.nz {
                let q = t.q_y_given(x, y) * t.q_z_given(x, z);
                probs.push(q);
                lw.push(t.log_joint(x, y, z) - fm::ln(q));
            }
        }
        expect_over_tuples(&probs, k, &lw)
    }

    /// `Σ_y q(y|x) E_{z_1..z_k} [log (1/k) Σ_i p(x,y,z_i)/(q(y|x) q(z_i|x))]`.
    pub fn exact_piwo(&self, x: usize, k: usize) -> f64 {
        let t = self.tables();
        let qz: Vec<f64> = (0..self.nz).map(|z| t.q_z_given(x, z)).collect();
        let mut acc = 0.0;
        for y in 0..self.ny {
            let qy = t.q_y_given(x, y);
            if qy == 0.0 {
                continue;
            }
            let lw: Vec<f64> = (0..self.nz)
                .map(|z| t.log_joint(x, y, z) - fm::ln(qy) - fm::ln(t.q_z_given(x, z)))
                .collect();
            acc += qy * expect_over_tuples(&qz, k, &lw);
        }
        acc
    }

    /// `Σ_z q(z|x) E_{y_1..y_k} [log (1/k) Σ_i p(x,y_i,z)/(q(y_i|x) q(z|x))]`.
    pub fn exact_ipiwo(&self, x: usize, k: usize) -> f64 {
        let t = self.tables();
        let qy: Vec<f64> = (0..self.ny).map(|y| t.q_y_given(x, y)).collect();
        let mut acc = 0.0;
        for z in 0..self.nz {
            let qz = t.q_z_given(x, z);
            if qz == 0.0 {
                continue;
            }
            let lw: Vec<f64> = (0..self.ny)
                .map(|y| t.log_joint(x, y, z) - fm::ln(t.q_y_given(x, y)) - fm::ln(qz))
                .collect();
            acc += qz * expect_over_tuples(&qy, k, &lw);
        }
        acc
    }

    // ------------------------------------------------------------------
    // Bound limits
    // ------------------------------------------------------------------

    /// `k -> inf` target of PIWO: `log p(x) - KL[q(y|x) || p(y|x)]`.
    pub fn piwo_limit(&self, x: usize) -> Result<f64, TabularError> {
        let kl = self.exact_kl_terms(x, 0)?;
        Ok(self.exact_log_px(x) - kl.kl_y)
    }

    /// The same limit through the other algebraic route:
    /// `Σ_y q(y|x) log p(x|y) - KL[q(y|x) || p(y)]`.
    pub fn piwo_limit_via_conditional(&self, x: usize) -> f64 {
        let t = self.tables();
        let p_y = self.marginal_p_y();
        let mut acc = 0.0;
        for y in 0..self.ny {
            let q = t.q_y_given(x, y);
            if q > 0.0 {
                acc += q * (self.exact_log_px_given_y(x, y) - fm::ln(q) + fm::ln(p_y[y]));
            }
        }
        acc
    }

    /// `k -> inf` target of iPIWO: `log p(x) - KL[q(z|x) || p(z|x)]`.
    pub fn ipiwo_limit(&self, x: usize) -> Result<f64, TabularError> {
        let kl = self.exact_kl_terms(x, 0)?;
        Ok(self.exact_log_px(x) - kl.kl_z)
    }

    /// The same limit via `Σ_z q(z|x) log p(x|z) - KL[q(z|x) || p(z)]`.
    pub fn ipiwo_limit_via_conditional(&self, x: usize) -> f64 {
        let t = self.tables();
        let mut acc = 0.0;
        for z in 0..self.nz {
            let q = t.q_z_given(x, z);
            if q > 0.0 {
                acc += q * (self.exact_log_px_given_z(x, z) - fm::ln(q) + fm::ln(t.p_z[z]));
            }
        }
        acc
    }
}

/// `Σ_{t in S^k} Π_i probs[t_i] * log_mean_exp(lw[t_1..t_k])` over all
/// ordered k-tuples, by odometer enumeration.
fn expect_over_tuples(probs: &[f64], k: usize, lw: &[f64]) -> f64 {
    let n = probs.len();
    let mut idx = vec![0usize; k];
    let mut scratch = vec![0.0f64; k];
    let mut acc = 0.0;
    loop {
        let mut q = 1.0;
        for (slot, &i) in idx.iter().enumerate() {
            q *= probs[i];
            scratch[slot] = lw[i];
        }
        if q > 0.0 {
            acc += q * fm::log_mean_exp(&scratch);
        }
        // Advance the odometer.
        let mut pos = 0;
        loop {
            if pos == k {
                return acc;
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

// FIX-A probability tables. Layouts as in `TabularModel::from_probs`.
pub const FIX_A_PRIOR_Z: [f64; 2] = [0.6, 0.4];
pub const FIX_A_GEN_Y: [f64; 4] = [0.7, 0.3, 0.2, 0.8];
pub const FIX_A_GEN_X: [f64; 8] = [0.9, 0.1, 0.55, 0.45, 0.3, 0.7, 0.15, 0.85];
pub const FIX_A_INF_Y: [f64; 4] = [0.65, 0.35, 0.25, 0.75];
pub const FIX_A_INF_Z: [f64; 4] = [0.5, 0.5, 0.3, 0.7];

#[cfg(test)]
mod tests {
    use super::*;

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
    fn rows_are_normalized() {
        let mut rng = SplitMix64::seed_from_u64(0);
        let m = TabularModel::random(3, 2, 4, 2.0, &mut rng);
        let t = m.tables();
        assert!(fm::abs(t.p_z.iter().sum::<f64>() - 1.0) < 1e-12);
        for z in 0..3 {
            let s: f64 = (0..2).map(|y| t.p_y_given(z, y)).sum();
            assert!(fm::abs(s - 1.0) < 1e-12);
        }
        for y in 0..2 {
            for z in 0..3 {
                let s: f64 = (0..4).map(|x| t.p_x_given(y, z, x)).sum();
                assert!(fm::abs(s - 1.0) < 1e-12);
            }
        }
        for x in 0..4 {
            let sy: f64 = (0..2).map(|y| t.q_y_given(x, y)).sum();
            let sz: f64 = (0..3).map(|z| t.q_z_given(x, z)).sum();
            assert!(fm::abs(sy - 1.0) < 1e-12);
            assert!(fm::abs(sz - 1.0) < 1e-12);
        }
    }

    #[test]
    fn uniform_model_marginal() {
        let m = TabularModel::uniform(2, 2, 2);
        assert!(fm::abs(m.exact_log_px(0) - fm::ln(0.5)) < 1e-12);
        assert!(fm::abs(m.exact_log_px(1) - fm::ln(0.5)) < 1e-12);
        let post = m.exact_posterior(0).unwrap();
        for &p in &post.joint {
            assert!(fm::abs(p - 0.25) < 1e-12);
        }
    }

    #[test]
    fn deterministic_emission_marginal_is_zero_nats() {
        // p(x|y,z) = delta(x = 0) for all (y, z).
        let m = TabularModel::from_probs(
            2,
            2,
            2,
            &[0.5, 0.5],
            &[0.5, 0.5, 0.5, 0.5],
            &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
            &[0.5, 0.5, 0.5, 0.5],
            &[0.5, 0.5, 0.5, 0.5],
        );
        assert!(fm::abs(m.exact_log_px(0)) < 1e-12);
        assert_eq!(m.exact_log_px(1), f64::NEG_INFINITY);
        assert_eq!(
            m.exact_posterior(1),
            Err(TabularError::ZeroEvidence { x: 1 })
        );
        // Posterior at the deterministic x equals the prior over (y, z).
        let post = m.exact_posterior(0).unwrap();
        let t = m.tables();
        for y in 0..2 {
            for z in 0..2 {
                let expect = t.p_z[z] * t.p_y_given(z, y);
                assert!(fm::abs(post.joint[y * 2 + z] - expect) < 1e-12);
            }
        }
    }

    #[test]
    fn fix_a_marginal_matches_four_term_sum() {
        let m = TabularModel::fix_a();
        let t = m.tables();
        for x in 0..2 {
            let mut direct = 0.0;
            for y in 0..2 {
                for z in 0..2 {
                    direct += t.p_z[z] * t.p_y_given(z, y) * t.p_x_given(y, z, x);
                }
            }
            assert!(fm::abs(m.exact_log_px(x) - fm::ln(direct)) < 1e-12);
        }
    }

    #[test]
    fn posterior_is_bayes_consistent() {
        for m in random_models(20, 1) {
            for x in 0..m.nx() {
                let post = m.exact_posterior(x).unwrap();
                let total: f64 = post.joint.iter().sum();
                assert!(fm::abs(total - 1.0) < 1e-12);
                let t = m.tables();
                let px = fm::exp(m.exact_log_px(x));
                for y in 0..m.ny() {
                    for z in 0..m.nz() {
                        let lhs = post.joint[y * m.nz() + z] * px;
                        let rhs = t.p_z[z] * t.p_y_given(z, y) * t.p_x_given(y, z, x);
                        assert!(fm::abs(lhs - rhs) < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn elbo_identities_hold_on_random_models() {
        for m in random_models(100, 2) {
            let r_unsup = m.exact_elbo_identity_check(0, None).unwrap();
            assert!(r_unsup < 1e-10, "unsup residual {r_unsup}");
            let r_sup = m.exact_elbo_identity_check(0, Some(0)).unwrap();
            assert!(r_sup < 1e-10, "sup residual {r_sup}");
        }
    }

    #[test]
    fn kl_terms_nonnegative_and_chain_dominated() {
        for m in random_models(100, 3) {
            let kl = m.exact_kl_terms(0, 0).unwrap();
            assert!(!kl.support_violation);
            assert!(kl.kl_yz >= -1e-12);
            assert!(kl.kl_y >= -1e-12);
            assert!(kl.kl_z >= -1e-12);
            assert!(kl.kl_z_given_xy >= -1e-12);
            assert!(kl.kl_yz >= kl.kl_y - 1e-10);
            assert!(kl.kl_yz >= kl.kl_z - 1e-10);
        }
    }

    #[test]
    fn kl_zero_when_q_is_factorizing_posterior() {
        let mut rng = SplitMix64::seed_from_u64(4);
        let m = TabularModel::random_with_factorizing_posterior(2, 2, 3, 1.0, &mut rng);
        for x in 0..m.nx() {
            let kl = m.exact_kl_terms(x, 0).unwrap();
            assert!(fm::abs(kl.kl_yz) < 1e-10, "kl_yz {}", kl.kl_yz);
            assert!(fm::abs(kl.kl_y) < 1e-10);
            assert!(fm::abs(kl.kl_z) < 1e-10);
        }
    }

    #[test]
    fn kl_y_two_term_hand_sum() {
        // q(y|x) uniform vs the exact posterior marginal: KL = Σ 0.5 ln(0.5/p).
        let mut m = TabularModel::fix_a();
        let pid = m.param_ids()[3];
        m.params_mut().slice_mut(pid)[0] = 0.0;
        m.params_mut().slice_mut(pid)[1] = 0.0;
        let post = m.exact_posterior(0).unwrap();
        let hand: f64 = (0..2)
            .map(|y| 0.5 * fm::ln(0.5 / post.marginal_y[y]))
            .sum();
        let kl = m.exact_kl_terms(0, 0).unwrap();
        assert!(fm::abs(kl.kl_y - hand) < 1e-12);
    }

    #[test]
    fn support_violation_is_flagged_infinite() {
        // Degenerate p(y|z) puts zero posterior mass on y=1 while q stays
        // dense, so KL(q || p) = +inf with the flag set.
        let m = TabularModel::from_probs(
            2,
            2,
            2,
            &[0.5, 0.5],
            &[1.0, 0.0, 1.0, 0.0],
            &[0.6, 0.4, 0.6, 0.4, 0.5, 0.5, 0.5, 0.5],
            &[0.5, 0.5, 0.5, 0.5],
            &[0.5, 0.5, 0.5, 0.5],
        );
        let kl = m.exact_kl_terms(0, 0).unwrap();
        assert!(kl.support_violation);
        assert!(kl.kl_yz.is_infinite() && kl.kl_yz > 0.0);
    }

    #[test]
    fn iwae_k1_equals_elbo() {
        for m in random_models(20, 5) {
            let sup1 = m.exact_iwae_supervised(0, 0, 1);
            assert!(fm::abs(sup1 - m.exact_elbo_supervised(0, 0)) < 1e-12);
            let unsup1 = m.exact_iwae_unsupervised(0, 1);
            assert!(fm::abs(unsup1 - m.exact_elbo_unsupervised(0)) < 1e-12);
            let piwo1 = m.exact_piwo(0, 1);
            assert!(fm::abs(piwo1 - unsup1) < 1e-12);
            let ipiwo1 = m.exact_ipiwo(0, 1);
            assert!(fm::abs(ipiwo1 - unsup1) < 1e-12);
        }
    }

    #[test]
    fn bounds_sandwich_and_monotone_in_k() {
        for m in random_models(100, 6) {
            let x = 0;
            let log_px = m.exact_log_px(x);
            let piwo_lim = m.piwo_limit(x).unwrap();
            let ipiwo_lim = m.ipiwo_limit(x).unwrap();
            let elbo = m.exact_elbo_unsupervised(x);
            let mut prev_iwae = f64::NEG_INFINITY;
            let mut prev_piwo = f64::NEG_INFINITY;
            let mut prev_ipiwo = f64::NEG_INFINITY;
            for k in 1..=4 {
                let iwae = m.exact_iwae_unsupervised(x, k);
                let piwo = m.exact_piwo(x, k);
                let ipiwo = m.exact_ipiwo(x, k);
                assert!(iwae >= prev_iwae - 1e-10, "IWAE not monotone at k={k}");
                assert!(piwo >= prev_piwo - 1e-10, "PIWO not monotone at k={k}");
                assert!(ipiwo >= prev_ipiwo - 1e-10, "iPIWO not monotone at k={k}");
                assert!(elbo <= iwae + 1e-10);
                assert!(iwae <= log_px + 1e-10);
                assert!(piwo <= piwo_lim + 1e-10);
                assert!(ipiwo <= ipiwo_lim + 1e-10);
                prev_iwae = iwae;
                prev_piwo = piwo;
                prev_ipiwo = ipiwo;
            }
        }
    }

    #[test]
    fn limits_match_through_both_routes() {
        for m in random_models(100, 7) {
            for x in 0..m.nx() {
                let a = m.piwo_limit(x).unwrap();
                let b = m.piwo_limit_via_conditional(x);
                assert!(fm::abs(a - b) < 1e-10, "piwo limit {a} vs {b}");
                let a = m.ipiwo_limit(x).unwrap();
                let b = m.ipiwo_limit_via_conditional(x);
                assert!(fm::abs(a - b) < 1e-10, "ipiwo limit {a} vs {b}");
            }
        }
    }

    #[test]
    fn posterior_q_makes_bounds_tight_for_every_k() {
        let mut rng = SplitMix64::seed_from_u64(8);
        for _ in 0..10 {
            let m = TabularModel::random_with_factorizing_posterior(2, 2, 2, 1.0, &mut rng);
            for x in 0..m.nx() {
                let log_px = m.exact_log_px(x);
                for k in 1..=3 {
                    assert!(fm::abs(m.exact_piwo(x, k) - log_px) < 1e-10);
                    assert!(fm::abs(m.exact_ipiwo(x, k) - log_px) < 1e-10);
                    assert!(fm::abs(m.exact_iwae_unsupervised(x, k) - log_px) < 1e-10);
                }
            }
        }
    }

    #[test]
    fn budget_refusal() {
        let m = TabularModel::uniform(10, 10, 2);
        let spec = ObjectiveSpec::new(Flavor::Iwae, 8, 1.0);
        let err = m
            .exact_bound_expectation(&spec, 0, None, 1_000_000)
            .unwrap_err();
        assert!(matches!(err, TabularError::BudgetExceeded { .. }));
        let ok = m.exact_bound_expectation(&spec, 0, Some(0), 1_000_000_000);
        assert!(ok.is_ok());
    }

    #[test]
    fn out_of_support_inputs_error() {
        let m = TabularModel::uniform(2, 2, 2);
        assert!(matches!(
            m.exact_posterior(5),
            Err(TabularError::OutOfSupport { .. })
        ));
        assert!(matches!(
            m.exact_kl_terms(0, 9),
            Err(TabularError::OutOfSupport { .. })
        ));
    }
}
