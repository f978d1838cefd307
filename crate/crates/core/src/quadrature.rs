//! Gauss-Hermite quadrature for exact expectations under a Gaussian.
//!
//! Nodes and weights for `∫ e^{-t^2} f(t) dt ≈ Σ w_i f(t_i)`, computed by
//! Newton iteration on the orthonormal Hermite recurrence (Numerical Recipes
//! `gauher` scheme). For a smooth integrand the error decays faster than any
//! polynomial order, so 32 nodes reach near machine precision for the
//! log-density integrands used in the gradient oracle.

use alloc::vec::Vec;

use crate::fm;

/// Quadrature rule: `E_{z ~ N(mu, sigma)}[f(z)] ≈ Σ (w_i / sqrt(pi)) f(mu + sqrt(2) sigma t_i)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!((1..=128).contains(&n), "node count out of range");
        let mut nodes = alloc::vec![0.0; n];
        let mut weights = alloc::vec![0.0; n];
        let pim4 = 0.7511255444649425_f64; // pi^(-1/4)
        let mut x = 0.0_f64;
        // Roots come in symmetric pairs; find the positive half.
        for i in 0..n.div_ceil(2) {
            x = match i {
                0 => {
                    let f = (2 * n + 1) as f64;
                    fm::sqrt(f) - 1.85575 * libm::pow(f, -1.0 / 6.0)
                }
                1 => x - 1.14 * libm::pow(n as f64, 0.426) / x,
                2 => 1.86 * x - 0.86 * nodes[0],
                3 => 1.91 * x - 0.91 * nodes[1],
                _ => 2.0 * x - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = x * fm::sqrt(2.0 / j as f64) * p2
                        - fm::sqrt((j - 1) as f64 / j as f64) * p3;
                }
                pp = fm::sqrt(2.0 * n as f64) * p2;
                let dx = p1 / pp;
                x -= dx;
                if fm::abs(dx) < 1e-15 {
                    break;
                }
            }
            nodes[i] = x;
            nodes[n - 1 - i] = -x;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Exact Gaussian expectation of a plain function.
    pub fn expect(&self, mu: f64, sigma: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let inv_sqrt_pi = 1.0 / fm::sqrt(core::f64::consts::PI);
        let mut acc = 0.0;
        for (t, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * inv_sqrt_pi * f(mu + core::f64::consts::SQRT_2 * sigma * t);
        }
        acc
    }

    /// Probability weights `w_i / sqrt(pi)` (sum to 1).
    pub fn prob_weights(&self) -> Vec<f64> {
        let inv_sqrt_pi = 1.0 / fm::sqrt(core::f64::consts::PI);
        self.weights.iter().map(|w| w * inv_sqrt_pi).collect()
    }
}
