//! Scalar float math for `no_std` builds, plus the log-space helpers used by
//! every bound in the crate.
//!
//! All transcendental functions route through `libm` so the core crate never
//! depends on `std`. Log-space reductions use max-shifted `logsumexp`; raw
//! probability products appear nowhere in the crate.

/// ln(2π), used by Gaussian log-densities.
pub const LN_2PI: f64 = 1.8378770664093453_f64;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline]
pub fn log10(x: f64) -> f64 {
    libm::log10(x)
}

#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Numerically stable softplus: `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + ln_1p(exp(-x))
    } else {
        ln_1p(exp(x))
    }
}

/// Max-shifted logsumexp over a slice. Returns `-inf` for an empty slice or
/// when every entry is `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut s = 0.0;
    for &x in xs {
        s += exp(x - m);
    }
    m + ln(s)
}

/// `log((1/k) Σ exp(x_i))`, the importance-weighted reduction.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    logsumexp(xs) - ln(xs.len() as f64)
}

/// In-place softmax of a logit slice.
pub fn softmax_in_place(xs: &mut [f64]) {
    let z = logsumexp(xs);
    for x in xs.iter_mut() {
        *x = exp(*x - z);
    }
}

/// Mean and sample standard deviation (n-1 denominator; 0 for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, sqrt(var))
}

/// Standard error of the mean from per-item values.
pub fn std_error(xs: &[f64]) -> f64 {
    let (_, sd) = mean_std(xs);
    if xs.len() < 2 {
        0.0
    } else {
        sd / sqrt(xs.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_direct_sum() {
        let xs = [1.0, 2.0, 3.0];
        let direct = ln(exp(1.0) + exp(2.0) + exp(3.0));
        assert!(abs(logsumexp(&xs) - direct) < 1e-14);
    }

    #[test]
    fn logsumexp_handles_extremes() {
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
        // Huge shifts must not overflow.
        let v = logsumexp(&[1000.0, 1000.0]);
        assert!(abs(v - (1000.0 + ln(2.0))) < 1e-12);
        // A single -inf entry among finite ones is ignored.
        let v = logsumexp(&[f64::NEG_INFINITY, 0.0]);
        assert!(abs(v) < 1e-15);
    }

    #[test]
    fn log_mean_exp_singleton_is_identity() {
        let a = -3.714159;
        assert_eq!(log_mean_exp(&[a]), a);
    }

    #[test]
    fn softplus_sigmoid_stable() {
        assert!(abs(softplus(0.0) - ln(2.0)) < 1e-15);
        assert!(abs(softplus(800.0) - 800.0) < 1e-12);
        assert!(softplus(-800.0) >= 0.0 && softplus(-700.0).is_finite());
        assert!(abs(sigmoid(0.0) - 0.5) < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn mean_std_basics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!(abs(m - 2.0) < 1e-15);
        assert!(abs(s - 1.0) < 1e-15);
        let (m, s) = mean_std(&[5.0]);
        assert_eq!(m, 5.0);
        assert_eq!(s, 0.0);
    }
}
