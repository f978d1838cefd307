//! Primitive distributions: categorical over class indices and diagonal
//! Gaussian over real vectors.
//!
//! Both are immutable values, safe to share across threads. Sampling always
//! takes an explicit [`SplitMix64`] stream. The Gaussian offers a
//! reparameterized sampler (`mu + sigma * eps`); the categorical deliberately
//! does not — gradients through discrete draws are the gradients module's
//! concern (enumeration or score function), never a relaxation.

use alloc::vec::Vec;

use crate::fm;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistError {
    /// Value dimension does not match the distribution dimension.
    DimensionMismatch { expected: usize, got: usize },
    /// Categorical index outside the support.
    IndexOutOfRange { len: usize, got: usize },
    /// A stddev entry was not strictly positive and finite.
    InvalidScale,
}

impl core::fmt::Display for DistError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DistError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            DistError::IndexOutOfRange { len, got } => {
                write!(f, "index {got} out of range for support size {len}")
            }
            DistError::InvalidScale => write!(f, "stddev must be strictly positive"),
        }
    }
}

impl core::error::Error for DistError {}

/// Categorical distribution parameterized by unnormalized log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    logits: Vec<f64>,
    log_z: f64,
}

impl Categorical {
    pub fn from_logits(logits: &[f64]) -> Self {
        let log_z = fm::logsumexp(logits);
        Self {
            logits: logits.to_vec(),
            log_z,
        }
    }

    /// Build from a probability vector (entries may be zero).
    pub fn from_probs(probs: &[f64]) -> Self {
        let logits: Vec<f64> = probs.iter().map(|&p| fm::ln(p)).collect();
        Self::from_logits(&logits)
    }

    pub fn n(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// `logits[i] - logsumexp(logits)`, exactly.
    pub fn log_prob(&self, index: usize) -> Result<f64, DistError> {
        if index >= self.logits.len() {
            return Err(DistError::IndexOutOfRange {
                len: self.logits.len(),
                got: index,
            });
        }
        Ok(self.logits[index] - self.log_z)
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.logits.iter().map(|l| l - self.log_z).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|l| fm::exp(l - self.log_z)).collect()
    }

    /// Inverse-CDF draw on the normalized probability vector.
    pub fn sample(&self, rng: &mut SplitMix64) -> usize {
        let u = rng.next_f64();
        let mut cum = 0.0;
        for (i, l) in self.logits.iter().enumerate() {
            cum += fm::exp(l - self.log_z);
            if u < cum {
                return i;
            }
        }
        self.logits.len() - 1
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.logits.len() {
            if self.logits[i] > self.logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        let mut h = 0.0;
        for l in &self.logits {
            let lp = l - self.log_z;
            let p = fm::exp(lp);
            if p > 0.0 {
                h -= p * lp;
            }
        }
        h
    }
}

/// Diagonal Gaussian with strictly positive stddev.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    stddev: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: &[f64], stddev: &[f64]) -> Result<Self, DistError> {
        if mean.len() != stddev.len() {
            return Err(DistError::DimensionMismatch {
                expected: mean.len(),
                got: stddev.len(),
            });
        }
        if stddev.iter().any(|&s| s <= 0.0 || s.is_nan() || !s.is_finite()) {
            return Err(DistError::InvalidScale);
        }
        Ok(Self {
            mean: mean.to_vec(),
            stddev: stddev.to_vec(),
        })
    }

    /// Construct from raw scale parameters through a softplus gate with a
    /// small floor, guaranteeing positivity.
    pub fn from_raw_scale(mean: &[f64], raw_scale: &[f64], floor: f64) -> Result<Self, DistError> {
        let stddev: Vec<f64> = raw_scale.iter().map(|&r| fm::softplus(r) + floor).collect();
        Self::new(mean, &stddev)
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: alloc::vec![0.0; dim],
            stddev: alloc::vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn stddev(&self) -> &[f64] {
        &self.stddev
    }

    pub fn log_prob(&self, value: &[f64]) -> Result<f64, DistError> {
        if value.len() != self.mean.len() {
            return Err(DistError::DimensionMismatch {
                expected: self.mean.len(),
                got: value.len(),
            });
        }
        let mut acc = 0.0;
        for i in 0..value.len() {
            let d = (value[i] - self.mean[i]) / self.stddev[i];
            acc += -0.5 * fm::LN_2PI - fm::ln(self.stddev[i]) - 0.5 * d * d;
        }
        Ok(acc)
    }

    /// Plain sample; identical stream consumption to [`Self::rsample`].
    pub fn sample(&self, rng: &mut SplitMix64) -> Vec<f64> {
        self.rsample(rng).0
    }

    /// Reparameterized sample: returns `(value, eps)` with
    /// `value = mean + stddev * eps`, `eps ~ N(0, I)`.
    pub fn rsample(&self, rng: &mut SplitMix64) -> (Vec<f64>, Vec<f64>) {
        let mut value = Vec::with_capacity(self.dim());
        let mut eps = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let e = rng.next_normal();
            eps.push(e);
            value.push(self.mean[i] + self.stddev[i] * e);
        }
        (value, eps)
    }

    pub fn entropy(&self) -> f64 {
        self.stddev
            .iter()
            .map(|s| 0.5 * (1.0 + fm::LN_2PI) + fm::ln(*s))
            .sum()
    }
}

/// Closed-form `KL(N(mu, sigma) || N(0, I)) = 0.5 Σ (sigma^2 + mu^2 - 1 - 2 ln sigma)`.
pub fn kl_gaussian_standard(q: &DiagonalGaussian) -> f64 {
    let mut acc = 0.0;
    for i in 0..q.dim() {
        let s2 = q.stddev[i] * q.stddev[i];
        acc += 0.5 * (s2 + q.mean[i] * q.mean[i] - 1.0 - 2.0 * fm::ln(q.stddev[i]));
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categorical_log_prob_normalizes() {
        let c = Categorical::from_logits(&[0.0, 0.0]);
        assert!(fm::abs(c.log_prob(0).unwrap() - fm::ln(0.5)) < 1e-15);
        let c = Categorical::from_logits(&[1.0, 2.0, 3.0]);
        let expect = 3.0 - fm::logsumexp(&[1.0, 2.0, 3.0]);
        assert_eq!(c.log_prob(2).unwrap(), expect);
        let total: f64 = c.probs().iter().sum();
        assert!(fm::abs(total - 1.0) < 1e-12);
    }

    #[test]
    fn categorical_errors() {
        let c = Categorical::from_logits(&[0.0, 1.0]);
        assert_eq!(
            c.log_prob(2),
            Err(DistError::IndexOutOfRange { len: 2, got: 2 })
        );
    }

    #[test]
    fn gaussian_standard_normal_mode() {
        let g = DiagonalGaussian::standard(1);
        let lp = g.log_prob(&[0.0]).unwrap();
        assert!(fm::abs(lp - (-0.5 * fm::LN_2PI)) < 1e-15);
        let g3 = DiagonalGaussian::standard(3);
        let lp3 = g3.log_prob(&[0.0, 0.0, 0.0]).unwrap();
        assert!(fm::abs(lp3 - 3.0 * -0.5 * fm::LN_2PI) < 1e-15);
    }

    #[test]
    fn gaussian_errors() {
        assert_eq!(
            DiagonalGaussian::new(&[0.0], &[0.0]),
            Err(DistError::InvalidScale)
        );
        let g = DiagonalGaussian::standard(2);
        assert_eq!(
            g.log_prob(&[0.0]),
            Err(DistError::DimensionMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn rsample_degenerate_scale_approaches_mean() {
        let g = DiagonalGaussian::new(&[3.5], &[1e-300]).unwrap();
        let mut rng = SplitMix64::seed_from_u64(0);
        for _ in 0..10 {
            let (v, _) = g.rsample(&mut rng);
            assert!(fm::abs(v[0] - 3.5) < 1e-290);
        }
    }

    #[test]
    fn sampling_is_deterministic_for_fixed_seed() {
        let g = DiagonalGaussian::new(&[0.0, 1.0], &[1.0, 2.0]).unwrap();
        let a: Vec<Vec<f64>> = {
            let mut rng = SplitMix64::seed_from_u64(9);
            (0..5).map(|_| g.sample(&mut rng)).collect()
        };
        let b: Vec<Vec<f64>> = {
            let mut rng = SplitMix64::seed_from_u64(9);
            (0..5).map(|_| g.sample(&mut rng)).collect()
        };
        assert_eq!(a, b);
        let c = Categorical::from_logits(&[0.3, -0.2, 0.9]);
        let s1: Vec<usize> = {
            let mut rng = SplitMix64::seed_from_u64(11);
            (0..100).map(|_| c.sample(&mut rng)).collect()
        };
        let s2: Vec<usize> = {
            let mut rng = SplitMix64::seed_from_u64(11);
            (0..100).map(|_| c.sample(&mut rng)).collect()
        };
        assert_eq!(s1, s2);
    }

    #[test]
    fn extreme_logit_dominates_sampling() {
        let c = Categorical::from_logits(&[50.0, 0.0]);
        let mut rng = SplitMix64::seed_from_u64(4);
        let n = 10_000;
        let hits = (0..n).filter(|_| c.sample(&mut rng) == 0).count();
        assert!(hits as f64 / n as f64 >= 0.999, "freq {}", hits as f64 / n as f64);
    }

    #[test]
    fn categorical_frequencies_match_probabilities() {
        let c = Categorical::from_logits(&[0.1, -0.4, 0.8, 0.0]);
        let probs = c.probs();
        let mut rng = SplitMix64::seed_from_u64(5);
        let n = 100_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[c.sample(&mut rng)] += 1;
        }
        for i in 0..4 {
            let p = probs[i];
            let sigma = fm::sqrt(p * (1.0 - p) / n as f64);
            let freq = counts[i] as f64 / n as f64;
            assert!(
                fm::abs(freq - p) < 4.0 * sigma,
                "class {i}: freq {freq} vs p {p}"
            );
        }
    }

    #[test]
    fn kl_standard_closed_form() {
        let g = DiagonalGaussian::standard(4);
        assert!(fm::abs(kl_gaussian_standard(&g)) < 1e-15);
        let g = DiagonalGaussian::new(&[1.0], &[1.0]).unwrap();
        assert!(fm::abs(kl_gaussian_standard(&g) - 0.5) < 1e-15);
        // zero iff mu=0, sigma=1
        let g = DiagonalGaussian::new(&[0.0], &[1.3]).unwrap();
        assert!(kl_gaussian_standard(&g) > 0.0);
        let g = DiagonalGaussian::new(&[0.0], &[0.6]).unwrap();
        assert!(kl_gaussian_standard(&g) > 0.0);
    }

    #[test]
    fn kl_standard_matches_monte_carlo() {
        let q = DiagonalGaussian::new(&[0.3], &[0.7]).unwrap();
        let p = DiagonalGaussian::standard(1);
        let mut rng = SplitMix64::seed_from_u64(6);
        let n = 1_000_000usize;
        let mut vals = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let v = q.sample(&mut rng);
            let d = q.log_prob(&v).unwrap() - p.log_prob(&v).unwrap();
            vals += d;
            sq += d * d;
        }
        let mean = vals / n as f64;
        let var = sq / n as f64 - mean * mean;
        let se = fm::sqrt(var / n as f64);
        let exact = kl_gaussian_standard(&q);
        assert!(
            fm::abs(mean - exact) < 3.0 * se,
            "mc {mean} vs exact {exact} (se {se})"
        );
    }

    #[test]
    fn log_prob_under_own_samples_converges_to_negative_entropy() {
        let n = 100_000usize;

        let g = DiagonalGaussian::new(&[0.5, -1.0], &[0.8, 1.4]).unwrap();
        let mut rng = SplitMix64::seed_from_u64(7);
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let v = g.sample(&mut rng);
            let lp = g.log_prob(&v).unwrap();
            sum += lp;
            sq += lp * lp;
        }
        let mean = sum / n as f64;
        let se = fm::sqrt((sq / n as f64 - mean * mean) / n as f64);
        assert!(fm::abs(mean + g.entropy()) < 3.0 * se);

        let c = Categorical::from_logits(&[0.0, 1.0, -0.5]);
        let mut rng = SplitMix64::seed_from_u64(8);
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let i = c.sample(&mut rng);
            let lp = c.log_prob(i).unwrap();
            sum += lp;
            sq += lp * lp;
        }
        let mean = sum / n as f64;
        let se = fm::sqrt((sq / n as f64 - mean * mean) / n as f64);
        assert!(fm::abs(mean + c.entropy()) < 3.0 * se);
    }

    #[test]
    fn rsample_gradient_matches_finite_differences() {
        // d(value)/d(mu) = 1, d(value)/d(sigma) = eps, checked by recomputing
        // the sample at perturbed parameters with the same eps.
        let mu = 0.4;
        let sigma = 1.3;
        let g = DiagonalGaussian::new(&[mu], &[sigma]).unwrap();
        let mut rng = SplitMix64::seed_from_u64(10);
        let (_, eps) = g.rsample(&mut rng);
        let h = 1e-5;
        let sample_at = |m: f64, s: f64| m + s * eps[0];
        let dmu = (sample_at(mu + h, sigma) - sample_at(mu - h, sigma)) / (2.0 * h);
        let dsig = (sample_at(mu, sigma + h) - sample_at(mu, sigma - h)) / (2.0 * h);
        assert!(fm::abs(dmu - 1.0) < 1e-4);
        assert!(fm::abs(dsig - eps[0]) / fm::abs(eps[0]).max(1.0) < 1e-4);
    }

    #[test]
    fn softplus_gate_floors_scale() {
        let g = DiagonalGaussian::from_raw_scale(&[0.0], &[-100.0], 1e-4).unwrap();
        assert!(g.stddev()[0] >= 1e-4);
    }
}
