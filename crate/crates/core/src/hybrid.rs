//! A six-parameter verification model with categorical `y` and a
//! one-dimensional Gaussian `z` over a real-valued observation.
//!
//! The continuous latent makes every pathwise estimator applicable while the
//! model stays small enough that exact bound expectations — and therefore
//! exact gradients — are available through Gauss-Hermite quadrature on the
//! tape. This is the substrate for the statistical gradient-estimator
//! checks; it is not a model anyone trains for its own sake.
//!
//! Generative side (theta = `[a, c, d]`):
//!   `p(z) = N(0,1)`, `p(y=1|z) = sigmoid(a z)`,
//!   `p(x|y,z) = N(x; c (2y-1) + d z, 1)`.
//! Inference side (phi = `[e, g, h]`):
//!   `q(y=1|x) = sigmoid(e x)`, `q(z|x) = N(g x, softplus(h) + 1e-4)`.

use alloc::vec::Vec;

use crate::dist;
use crate::fm;
use crate::objectives::{
    exact_item_bound, Flavor, ObjectiveError, ObjectiveSpec, VariationalModel,
};
use crate::quadrature::GaussHermite;
use crate::rng::SplitMix64;
use crate::tape::{NodeId, ParamId, ParamStore, Role, Tape};

const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct HybridModel {
    params: ParamStore,
    theta: ParamId,
    phi: ParamId,
}

pub struct HybridCtx {
    mu: NodeId,
    sigma: NodeId,
    lqy: NodeId,
}

impl HybridModel {
    /// `theta = [a, c, d]`, `phi = [e, g, h]`.
    pub fn new(theta: [f64; 3], phi: [f64; 3]) -> Self {
        let mut params = ParamStore::new();
        let theta_id = params.add_vec("gen_acd", Role::Theta, &theta);
        let phi_id = params.add_vec("inf_egh", Role::Phi, &phi);
        Self {
            params,
            theta: theta_id,
            phi: phi_id,
        }
    }

    pub fn random(scale: f64, rng: &mut SplitMix64) -> Self {
        let mut draw = || scale * rng.next_normal();
        Self::new([draw(), draw(), draw()], [draw(), draw(), draw()])
    }

    /// Zero-variance configuration: the emission ignores `(y, z)`, the prior
    /// head ignores `z`, and `q` equals the exact posterior
    /// (`q(y|x) = 1/2`, `q(z|x) = N(0,1)`), so every importance weight is
    /// the constant `p(x)`.
    pub fn zero_variance() -> Self {
        // softplus(h) + floor = 1  =>  h = ln(e^(1 - floor) - 1)
        let h = fm::ln(fm::exp(1.0 - SIGMA_FLOOR) - 1.0);
        Self::new([0.0, 0.0, 0.0], [0.0, 0.0, h])
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Exact expectation of the flavor's bound, on the tape, with `y`
    /// enumerated and `z`(-tuples) integrated by Gauss-Hermite quadrature.
    /// Quadrature points are built as `mu + sqrt(2) sigma t_j`, so the
    /// expression's gradient is the exact gradient of the expectation.
    pub fn exact_bound_quadrature(
        &self,
        t: &mut Tape,
        x: f64,
        y: Option<usize>,
        spec: &ObjectiveSpec,
        n_quad: usize,
    ) -> Result<NodeId, ObjectiveError> {
        let gh = GaussHermite::new(n_quad);
        let pw = gh.prob_weights();
        let ctx = self.encode(t, &x, None);
        let k = spec.k;
        let beta = spec.beta;

        // Quadrature latents carry the (mu, sigma) path.
        let zs: Vec<NodeId> = gh
            .nodes
            .iter()
            .map(|&tj| {
                let scaled = t.affc(ctx.sigma, core::f64::consts::SQRT_2 * tj, 0.0);
                t.add(ctx.mu, scaled)
            })
            .collect();
        let lqz: Vec<NodeId> = zs
            .iter()
            .map(|z| self.log_q_z(t, &ctx, z, false))
            .collect();

        let nq = zs.len();
        let tuple_count = |base: usize| -> Result<(), ObjectiveError> {
            let needed = (base as u64).checked_pow(k as u32);
            match needed {
                Some(c) if c <= spec.tuple_budget as u64 => Ok(()),
                Some(c) => Err(ObjectiveError::TupleBudgetExceeded {
                    needed: c,
                    budget: spec.tuple_budget as u64,
                }),
                None => Err(ObjectiveError::TupleBudgetExceeded {
                    needed: u64::MAX,
                    budget: spec.tuple_budget as u64,
                }),
            }
        };

        let sup_w = |t: &mut Tape, y: usize, j: usize| -> NodeId {
            let ll = self.log_lik(t, &x, y, &zs[j]);
            let lp = self.log_prior(t, y, &zs[j]);
            let inner = t.sub(lp, lqz[j]);
            let annealed = t.affc(inner, beta, 0.0);
            t.add(ll, annealed)
        };

        match (spec.flavor, y) {
            (Flavor::None, _) => Ok(t.scalar(0.0)),
            (Flavor::Vae, Some(yy)) | (Flavor::Ipiwo, Some(yy)) => {
                let terms: Vec<NodeId> = (0..nq)
                    .map(|j| {
                        let w = sup_w(t, yy, j);
                        t.affc(w, pw[j], 0.0)
                    })
                    .collect();
                let stacked = t.stack(&terms);
                Ok(t.sum(stacked))
            }
            (Flavor::Iwae, Some(yy)) | (Flavor::Piwo, Some(yy)) => {
                tuple_count(nq)?;
                let w: Vec<NodeId> = (0..nq).map(|j| sup_w(t, yy, j)).collect();
                let mut terms = Vec::new();
                for_each_tuple(nq, k, |tuple| {
                    let qprod: f64 = tuple.iter().map(|&j| pw[j]).product();
                    let picked: Vec<NodeId> = tuple.iter().map(|&j| w[j]).collect();
                    let stacked = t.stack(&picked);
                    let m = t.log_mean_exp(stacked);
                    terms.push(t.affc(m, qprod, 0.0));
                });
                let stacked = t.stack(&terms);
                Ok(t.sum(stacked))
            }
            (flavor, None) => {
                let lqy = ctx.lqy;
                let lqy_get: Vec<NodeId> = (0..2).map(|yy| t.get(lqy, yy)).collect();
                let qy_node: Vec<NodeId> = lqy_get.iter().map(|&g| t.exp(g)).collect();
                // Joint weights W[j][y].
                let mut w = Vec::with_capacity(nq);
                for j in 0..nq {
                    let mut row = Vec::with_capacity(2);
                    for yy in 0..2 {
                        let ll = self.log_lik(t, &x, yy, &zs[j]);
                        let lp = self.log_prior(t, yy, &zs[j]);
                        let s1 = t.sub(lp, lqz[j]);
                        let s2 = t.sub(s1, lqy_get[yy]);
                        let annealed = t.affc(s2, beta, 0.0);
                        row.push(t.add(ll, annealed));
                    }
                    w.push(row);
                }
                match flavor {
                    Flavor::Vae => {
                        let mut terms = Vec::new();
                        for yy in 0..2 {
                            for j in 0..nq {
                                let prod = t.mul(qy_node[yy], w[j][yy]);
                                terms.push(t.affc(prod, pw[j], 0.0));
                            }
                        }
                        let stacked = t.stack(&terms);
                        Ok(t.sum(stacked))
                    }
                    Flavor::Piwo => {
                        tuple_count(nq)?;
                        let mut terms = Vec::new();
                        for yy in 0..2 {
                            let mut inner = Vec::new();
                            for_each_tuple(nq, k, |tuple| {
                                let qprod: f64 = tuple.iter().map(|&j| pw[j]).product();
                                let picked: Vec<NodeId> =
                                    tuple.iter().map(|&j| w[j][yy]).collect();
                                let stacked = t.stack(&picked);
                                let m = t.log_mean_exp(stacked);
                                inner.push(t.affc(m, qprod, 0.0));
                            });
                            let stacked = t.stack(&inner);
                            let isum = t.sum(stacked);
                            terms.push(t.mul(qy_node[yy], isum));
                        }
                        let stacked = t.stack(&terms);
                        Ok(t.sum(stacked))
                    }
                    Flavor::Ipiwo => {
                        tuple_count(2)?;
                        let mut terms = Vec::new();
                        for j in 0..nq {
                            let mut inner = Vec::new();
                            for_each_tuple(2, k, |tuple| {
                                let mut qprod = qy_node[tuple[0]];
                                for &yy in &tuple[1..] {
                                    qprod = t.mul(qprod, qy_node[yy]);
                                }
                                let picked: Vec<NodeId> =
                                    tuple.iter().map(|&yy| w[j][yy]).collect();
                                let stacked = t.stack(&picked);
                                let m = t.log_mean_exp(stacked);
                                inner.push(t.mul(qprod, m));
                            });
                            let stacked = t.stack(&inner);
                            let isum = t.sum(stacked);
                            terms.push(t.affc(isum, pw[j], 0.0));
                        }
                        let stacked = t.stack(&terms);
                        Ok(t.sum(stacked))
                    }
                    Flavor::Iwae => {
                        tuple_count(2 * nq)?;
                        let mut terms = Vec::new();
                        for_each_tuple(2 * nq, k, |tuple| {
                            let mut qprod_node: Option<NodeId> = None;
                            let mut wconst = 1.0;
                            let mut picked = Vec::with_capacity(k);
                            for &pair in tuple {
                                let (yy, j) = (pair / nq, pair % nq);
                                wconst *= pw[j];
                                qprod_node = Some(match qprod_node {
                                    Some(acc) => t.mul(acc, qy_node[yy]),
                                    None => qy_node[yy],
                                });
                                picked.push(w[j][yy]);
                            }
                            let stacked = t.stack(&picked);
                            let m = t.log_mean_exp(stacked);
                            let prod = t.mul(qprod_node.unwrap(), m);
                            terms.push(t.affc(prod, wconst, 0.0));
                        });
                        let stacked = t.stack(&terms);
                        Ok(t.sum(stacked))
                    }
                    Flavor::None => unreachable!(),
                }
            }
        }
    }

    /// Exact `log p(x)` via quadrature over `z` and enumeration of `y`.
    pub fn exact_log_px(&self, x: f64, n_quad: usize) -> f64 {
        let gh = GaussHermite::new(n_quad);
        let th = self.params.slice(self.theta);
        let (a, c, d) = (th[0], th[1], th[2]);
        let px = gh.expect(0.0, 1.0, |z| {
            let py1 = fm::sigmoid(a * z);
            let mut acc = 0.0;
            for (y, py) in [(0usize, 1.0 - py1), (1, py1)] {
                let mean = c * (2.0 * y as f64 - 1.0) + d * z;
                let diff = x - mean;
                acc += py * fm::exp(-0.5 * fm::LN_2PI - 0.5 * diff * diff);
            }
            acc
        });
        fm::ln(px)
    }
}

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

impl VariationalModel for HybridModel {
    type Datum = f64;
    type Ctx = HybridCtx;
    type Latent = NodeId;

    fn n_classes(&self) -> usize {
        2
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn z_reparameterized(&self) -> bool {
        true
    }

    fn encode(&self, t: &mut Tape, x: &f64, _rng: Option<&mut SplitMix64>) -> HybridCtx {
        let phi = t.param(self.phi);
        let e = t.get(phi, 0);
        let g = t.get(phi, 1);
        let h = t.get(phi, 2);
        let mu = t.affc(g, *x, 0.0);
        let sp = t.softplus(h);
        let sigma = t.affc(sp, 1.0, SIGMA_FLOOR);
        let zero = t.scalar(0.0);
        let logit1 = t.affc(e, *x, 0.0);
        let logits = t.stack(&[zero, logit1]);
        let lqy = t.log_softmax(logits);
        HybridCtx {
            mu,
            sigma,
            lqy,
        }
    }

    fn log_q_y(&self, _t: &mut Tape, ctx: &HybridCtx) -> NodeId {
        ctx.lqy
    }

    fn sample_z(&self, t: &mut Tape, ctx: &HybridCtx, rng: &mut SplitMix64) -> NodeId {
        let eps = rng.next_normal();
        let scaled = t.affc(ctx.sigma, eps, 0.0);
        t.add(ctx.mu, scaled)
    }

    fn log_q_z(&self, t: &mut Tape, ctx: &HybridCtx, z: &NodeId, detach_q_params: bool) -> NodeId {
        let (mu, sigma) = if detach_q_params {
            (t.detach(ctx.mu), t.detach(ctx.sigma))
        } else {
            (ctx.mu, ctx.sigma)
        };
        t.normal_log_pdf(*z, mu, sigma)
    }

    fn log_prior(&self, t: &mut Tape, y: usize, z: &NodeId) -> NodeId {
        let lpz = t.std_normal_log_pdf(*z);
        let theta = t.param(self.theta);
        let a = t.get(theta, 0);
        let az = t.mul(a, *z);
        let zero = t.scalar(0.0);
        let logits = t.stack(&[zero, az]);
        let lpy_all = t.log_softmax(logits);
        let lpy = t.get(lpy_all, y);
        t.add(lpz, lpy)
    }

    fn log_lik(&self, t: &mut Tape, x: &f64, y: usize, z: &NodeId) -> NodeId {
        let theta = t.param(self.theta);
        let c = t.get(theta, 1);
        let d = t.get(theta, 2);
        let cterm = t.affc(c, 2.0 * y as f64 - 1.0, 0.0);
        let dz = t.mul(d, *z);
        let mean = t.add(cterm, dz);
        let xnode = t.constv(&[*x]);
        let one = t.constv(&[1.0]);
        t.normal_log_pdf(xnode, mean, one)
    }

    fn detach_latent(&self, t: &mut Tape, z: &NodeId) -> NodeId {
        t.detach(*z)
    }

    fn grad_scaled_latent(
        &self,
        t: &mut Tape,
        z: &NodeId,
    ) -> (NodeId, Option<crate::tape::GradScaleSlot>) {
        let (node, slot) = t.grad_scale_deferred(*z);
        (node, Some(slot))
    }

    fn kl_z_value(&self, t: &Tape, ctx: &HybridCtx) -> Option<f64> {
        let mu = t.scalar_val(ctx.mu);
        let sigma = t.scalar_val(ctx.sigma);
        let g = dist::DiagonalGaussian::new(&[mu], &[sigma]).ok()?;
        Some(dist::kl_gaussian_standard(&g))
    }
}

/// Exact bound for any enumerable-z model or the quadrature hybrid; used by
/// the exact-enumeration gradient kind.
pub trait ExactBound: VariationalModel + Sized {
    fn exact_bound_node(
        &self,
        t: &mut Tape,
        x: &Self::Datum,
        y: Option<usize>,
        spec: &ObjectiveSpec,
    ) -> Result<NodeId, ObjectiveError>;
}

impl ExactBound for crate::tabular::TabularModel {
    fn exact_bound_node(
        &self,
        t: &mut Tape,
        x: &usize,
        y: Option<usize>,
        spec: &ObjectiveSpec,
    ) -> Result<NodeId, ObjectiveError> {
        exact_item_bound(t, self, x, y, spec)
    }
}

impl ExactBound for HybridModel {
    fn exact_bound_node(
        &self,
        t: &mut Tape,
        x: &f64,
        y: Option<usize>,
        spec: &ObjectiveSpec,
    ) -> Result<NodeId, ObjectiveError> {
        self.exact_bound_quadrature(t, *x, y, spec, 32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_elbo_matches_closed_form_pieces() {
        // With a = c = d = 0 the generative model is N(x; 0, 1) x Bern(1/2),
        // so ELBO(x) = log p(x) - KL terms with everything available in
        // closed form.
        let h = fm::ln(fm::exp(0.7_f64) - 1.0); // softplus(h) = 0.7
        let m = HybridModel::new([0.0, 0.0, 0.0], [0.3, 0.5, h]);
        let x = 0.8;
        let spec = ObjectiveSpec::new(Flavor::Vae, 1, 0.0);
        let mut t = Tape::new(m.params());
        let node = m.exact_bound_quadrature(&mut t, x, None, &spec, 48).unwrap();
        let got = t.scalar_val(node);

        // log p(x): emission independent of (y, z).
        let log_px = -0.5 * fm::LN_2PI - 0.5 * x * x;
        // KL over y: q(y=1) = sigmoid(0.3 x) vs p(y) = 1/2.
        let q1 = fm::sigmoid(0.3 * x);
        let kl_y = q1 * fm::ln(q1 / 0.5) + (1.0 - q1) * fm::ln((1.0 - q1) / 0.5);
        // KL over z: N(0.5 x, 0.7 + floor) vs N(0, 1).
        let sigma = 0.7 + SIGMA_FLOOR;
        let mu = 0.5 * x;
        let kl_z = 0.5 * (sigma * sigma + mu * mu - 1.0 - 2.0 * fm::ln(sigma));
        let want = log_px - kl_y - kl_z;
        assert!(fm::abs(got - want) < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn exact_log_px_consistent_with_vae_bound_at_posterior_q() {
        let m = HybridModel::zero_variance();
        let x = -0.6;
        let log_px = m.exact_log_px(x, 48);
        let spec = ObjectiveSpec::new(Flavor::Iwae, 2, 0.0);
        let mut t = Tape::new(m.params());
        let node = m.exact_bound_quadrature(&mut t, x, None, &spec, 24).unwrap();
        let got = t.scalar_val(node);
        assert!(fm::abs(got - log_px) < 1e-9, "{got} vs {log_px}");
    }

    #[test]
    fn bounds_order_and_limits_under_quadrature() {
        let mut rng = SplitMix64::seed_from_u64(2);
        let m = HybridModel::random(0.7, &mut rng);
        let x = 0.9;
        let log_px = m.exact_log_px(x, 64);
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=3 {
            let mut spec = ObjectiveSpec::new(Flavor::Iwae, k, 0.0);
            spec.tuple_budget = 40_000;
            let mut t = Tape::new(m.params());
            let node = m.exact_bound_quadrature(&mut t, x, None, &spec, 12).unwrap();
            let v = t.scalar_val(node);
            assert!(v >= prev - 1e-9, "IWAE not monotone at k={k}");
            assert!(v <= log_px + 1e-9);
            prev = v;
        }
    }

    #[test]
    fn mc_estimator_mean_matches_quadrature_expectation() {
        let mut rng = SplitMix64::seed_from_u64(5);
        let m = HybridModel::random(0.5, &mut rng);
        let x = 0.4;
        let spec = ObjectiveSpec::new(Flavor::Piwo, 2, 0.0);
        let mut t = Tape::new(m.params());
        let node = m.exact_bound_quadrature(&mut t, x, None, &spec, 32).unwrap();
        let exact = t.scalar_val(node);

        let n = 40_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut r = SplitMix64::seed_from_u64(6);
        for _ in 0..n {
            let v = crate::objectives::piwo(&m, &x, &spec, &mut r).unwrap().value;
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let se = fm::sqrt((sq / n as f64 - mean * mean) / n as f64);
        assert!(
            fm::abs(mean - exact) < 3.0 * se,
            "mc {mean} vs quad {exact} (se {se})"
        );
    }
}
