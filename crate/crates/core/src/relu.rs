//! Closed-form ReLU Gaussian expectations.
//!
//! For `(u, v) ~ N(0, Λ)` with `Λ = [[σ11, σ12], [σ12, σ22]]` this module
//! evaluates `E[relu(u) relu(v)]` and `E[relu'(u) relu'(v)]` (the degree-1 and
//! degree-0 arc-cosine kernels). The covariance is first normalized to unit
//! diagonal, the unit-diagonal formulas are applied, and the result is
//! rescaled using the positive homogeneity of ReLU.
//!
//! Neither expectation carries the `cσ` factor; kernel recursions multiply by
//! [`C_SIGMA`] themselves.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// `(E_{z~N(0,1)}[relu(z)²])⁻¹` for ReLU.
pub const C_SIGMA: f64 = 2.0;

/// A symmetric 2x2 covariance `[[s11, s12], [s12, s22]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov2 {
    pub s11: f64,
    pub s12: f64,
    pub s22: f64,
}

impl Cov2 {
    /// Validated constructor: finite entries, nonnegative variances and
    /// `s12² <= s11 s22` up to a slack of `1e-12 * max(s11, s22)²`.
    pub fn new(s11: f64, s12: f64, s22: f64) -> Result<Self> {
        let c = Self { s11, s12, s22 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { s11, s12, s22 } = *self;
        if !(s11.is_finite() && s12.is_finite() && s22.is_finite()) {
            return Err(Error::NonFinite(format!("{self:?}")));
        }
        let scale = s11.max(s22);
        let slack = 1e-12 * scale * scale;
        if s11 < -slack.sqrt() || s22 < -slack.sqrt() || s12 * s12 > s11 * s22 + slack {
            return Err(Error::NotPsd(format!("{self:?}")));
        }
        Ok(())
    }

    /// `D Λ D` with `D = diag(c1, c2)`.
    pub fn rescaled(&self, c1: f64, c2: f64) -> Self {
        Self {
            s11: c1 * c1 * self.s11,
            s12: c1 * c2 * self.s12,
            s22: c2 * c2 * self.s22,
        }
    }
}

/// `t = E[relu(u) relu(v)]`, `tdot = E[relu'(u) relu'(v)]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReluExpectationPair {
    pub t: f64,
    pub tdot: f64,
}

/// Unit-diagonal closed forms for correlation `lambda` (clamped into `[-1, 1]`).
#[inline]
pub fn unit_expectations(lambda: f64) -> ReluExpectationPair {
    let lambda = lambda.clamp(-1.0, 1.0);
    let angle = PI - lambda.acos();
    ReluExpectationPair {
        t: (lambda * angle + (1.0 - lambda * lambda).max(0.0).sqrt()) / (2.0 * PI),
        tdot: angle / (2.0 * PI),
    }
}

/// Expectations for the covariance `D Λ D` where `Λ` has unit diagonal and
/// off-diagonal `lambda`, `D = diag(c1, c2)`: `t` scales by `c1 c2`, `tdot`
/// is scale free.
#[inline]
pub fn rescaled_expectations(lambda: f64, c1: f64, c2: f64) -> ReluExpectationPair {
    let unit = unit_expectations(lambda);
    ReluExpectationPair {
        t: c1 * c2 * unit.t,
        tdot: unit.tdot,
    }
}

/// Closed-form expectations without input validation; the hot path of every
/// kernel recursion.
///
/// The correlation is taken as 0 when either variance vanishes (an all-zero
/// patch), which gives `t = 0`, `tdot = 1/4`.
#[inline]
pub fn relu_expectations_unchecked(s11: f64, s12: f64, s22: f64) -> ReluExpectationPair {
    let c1 = s11.max(0.0).sqrt();
    let c2 = s22.max(0.0).sqrt();
    let scale = c1 * c2;
    let lambda = if scale > 0.0 { s12 / scale } else { 0.0 };
    rescaled_expectations(lambda, c1, c2)
}

pub fn relu_expectations(lambda: &Cov2) -> Result<ReluExpectationPair> {
    let Cov2 { s11, s12, s22 } = *lambda;
    if !(s11.is_finite() && s12.is_finite() && s22.is_finite()) {
        return Err(Error::NonFinite(format!("{lambda:?}")));
    }
    Ok(relu_expectations_unchecked(s11, s12, s22))
}

/// A Monte Carlo estimate with per-component standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: ReluExpectationPair,
    pub stderr: ReluExpectationPair,
}

/// Monte Carlo estimate of the same expectations, sampling `(u, v)` through
/// the Cholesky factor of `Λ`. Deterministic given `seed`.
pub fn mc_relu_expectations(lambda: &Cov2, samples: usize, seed: u64) -> Result<McEstimate> {
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be >= 1".into()));
    }
    lambda.validate()?;
    let l11 = lambda.s11.max(0.0).sqrt();
    let l21 = if l11 > 0.0 { lambda.s12 / l11 } else { 0.0 };
    let l22 = (lambda.s22 - l21 * l21).max(0.0).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum_t, mut sq_t) = (0.0f64, 0.0f64);
    let (mut sum_d, mut sq_d) = (0.0f64, 0.0f64);
    for _ in 0..samples {
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        let u = l11 * z1;
        let v = l21 * z1 + l22 * z2;
        if u > 0.0 && v > 0.0 {
            let t = u * v;
            sum_t += t;
            sq_t += t * t;
            sum_d += 1.0;
            sq_d += 1.0;
        }
    }
    let n = samples as f64;
    let stderr = |sum: f64, sq: f64| {
        if samples < 2 {
            return f64::INFINITY;
        }
        let mean = sum / n;
        let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    };
    Ok(McEstimate {
        mean: ReluExpectationPair {
            t: sum_t / n,
            tdot: sum_d / n,
        },
        stderr: ReluExpectationPair {
            t: stderr(sum_t, sq_t),
            tdot: stderr(sum_d, sq_d),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn eval(s11: f64, s12: f64, s22: f64) -> ReluExpectationPair {
        relu_expectations(&Cov2::new(s11, s12, s22).unwrap()).unwrap()
    }

    #[test]
    fn identical_variables() {
        let r = eval(1.0, 1.0, 1.0);
        assert_abs_diff_eq!(r.t, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.tdot, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn independent_variables() {
        let r = eval(1.0, 0.0, 1.0);
        assert_abs_diff_eq!(r.t, 1.0 / (2.0 * PI), epsilon = 1e-15);
        assert_abs_diff_eq!(r.tdot, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn antithetic_variables() {
        let r = eval(1.0, -1.0, 1.0);
        assert_abs_diff_eq!(r.t, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.tdot, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn scaled_marginal() {
        let r = eval(4.0, 0.0, 1.0);
        assert_abs_diff_eq!(r.t, 1.0 / PI, epsilon = 1e-15);
        assert_abs_diff_eq!(r.tdot, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn zero_variance_convention() {
        let r = eval(0.0, 0.0, 2.0);
        assert_eq!(r.t, 0.0);
        assert_abs_diff_eq!(r.tdot, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn boundary_rounding_is_clamped() {
        let r = relu_expectations_unchecked(1.0, 1.0 + 1e-16, 1.0);
        assert!(r.t.is_finite() && r.tdot.is_finite());
        assert_abs_diff_eq!(r.t, 0.5, epsilon = 1e-12);
        let r = relu_expectations_unchecked(1.0, -1.0 - 1e-16, 1.0);
        assert_abs_diff_eq!(r.t, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.tdot, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn boundary_continuity() {
        for &sign in &[1.0, -1.0] {
            let at = eval(1.0, sign, 1.0);
            let near = eval(1.0, sign * (1.0 - 1e-12), 1.0);
            assert_abs_diff_eq!(at.t, near.t, epsilon = 1e-5);
            assert_abs_diff_eq!(at.tdot, near.tdot, epsilon = 1e-5);
        }
    }

    #[test]
    fn rejects_non_finite_and_non_psd() {
        assert!(relu_expectations(&Cov2 { s11: f64::NAN, s12: 0.0, s22: 1.0 }).is_err());
        assert!(Cov2::new(1.0, 2.0, 1.0).is_err());
        assert!(Cov2::new(-1.0, 0.0, 1.0).is_err());
        assert!(mc_relu_expectations(&Cov2 { s11: 1.0, s12: 2.0, s22: 1.0 }, 10, 0).is_err());
        assert!(mc_relu_expectations(&Cov2::new(1.0, 0.0, 1.0).unwrap(), 0, 0).is_err());
    }

    #[test]
    fn monotone_in_correlation() {
        let grid: Vec<f64> = (0..=20).map(|k| -1.0 + 0.1 * k as f64).collect();
        let vals: Vec<_> = grid.iter().map(|&l| eval(1.0, l.clamp(-1.0, 1.0), 1.0)).collect();
        for w in vals.windows(2) {
            assert!(w[1].t >= w[0].t - 1e-15);
            assert!(w[1].tdot >= w[0].tdot - 1e-15);
        }
    }

    #[test]
    fn mc_matches_known_values() {
        let est = mc_relu_expectations(&Cov2::new(1.0, 1.0, 1.0).unwrap(), 1_000_000, 7).unwrap();
        assert!((est.mean.t - 0.5).abs() <= 3.0 * est.stderr.t);
        let est = mc_relu_expectations(&Cov2::new(1.0, 0.0, 1.0).unwrap(), 1_000_000, 8).unwrap();
        assert!((est.mean.tdot - 0.25).abs() <= 3.0 * est.stderr.tdot);
    }

    #[test]
    fn mc_is_deterministic() {
        let c = Cov2::new(2.0, 0.3, 0.5).unwrap();
        assert_eq!(
            mc_relu_expectations(&c, 1000, 11).unwrap(),
            mc_relu_expectations(&c, 1000, 11).unwrap()
        );
    }

    fn arb_cov() -> impl Strategy<Value = Cov2> {
        (0.01f64..10.0, 0.01f64..10.0, -1.0f64..=1.0)
            .prop_map(|(a, b, r)| Cov2 { s11: a, s12: r * (a * b).sqrt(), s22: b })
    }

    proptest! {
        #[test]
        fn swap_symmetry(c in arb_cov()) {
            let a = relu_expectations(&c).unwrap();
            let b = relu_expectations(&Cov2 { s11: c.s22, s12: c.s12, s22: c.s11 }).unwrap();
            prop_assert!((a.t - b.t).abs() <= 1e-12 * (1.0 + a.t.abs()));
            prop_assert!((a.tdot - b.tdot).abs() <= 1e-12);
        }

        #[test]
        fn positive_scale_homogeneity(c in arb_cov(), c1 in 0.05f64..5.0, c2 in 0.05f64..5.0) {
            let base = relu_expectations(&c).unwrap();
            let scaled = relu_expectations(&c.rescaled(c1, c2)).unwrap();
            prop_assert!((scaled.t - c1 * c2 * base.t).abs() <= 1e-12 * (1.0 + scaled.t.abs()));
            prop_assert!((scaled.tdot - base.tdot).abs() <= 1e-12);
        }

        #[test]
        fn expectation_bounds(c in arb_cov()) {
            let r = relu_expectations(&c).unwrap();
            prop_assert!(r.t >= 0.0 && r.t <= (c.s11 * c.s22).sqrt() + 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.tdot));
        }
    }
}
