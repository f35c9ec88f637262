//! Gaussian-mechanism calibration: the standard normal CDF and quantile,
//! the noise scale solver, and the release threshold.

use std::fmt;
use std::sync::Arc;

use libm::erfc;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::PrivacyBudget;

/// Largest degree cap accepted by [`compute_rho`]; the max is an exhaustive scan.
pub const MAX_DELTA0: usize = 1_000_000;

const SIGMA_BRACKET: (f64, f64) = (1e-6, 1e6);
const SIGMA_MAX_ITERS: usize = 200;

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal quantile. Rejects `p` outside the open unit interval.
pub fn std_normal_inv_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param(format!("quantile argument must lie in (0, 1), got {p}")));
    }
    Ok(if p <= 0.5 {
        std_normal_inv_cdf_lower(p)
    } else {
        // 1 - p is exact for p in [0.5, 1).
        -std_normal_inv_cdf_lower(1.0 - p)
    })
}

/// `Φ⁻¹(1 − q)` computed from the upper-tail mass `q` without forming `1 − q`.
pub fn std_normal_upper_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::param(format!("tail mass must lie in (0, 1), got {q}")));
    }
    Ok(if q <= 0.5 {
        -std_normal_inv_cdf_lower(q)
    } else {
        std_normal_inv_cdf_lower(1.0 - q)
    })
}

/// Quantile for `p` in `(0, 0.5]`: a rational initial guess refined by two
/// Newton steps on `Φ`.
pub(crate) fn std_normal_inv_cdf_lower(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p <= 0.5);
    let mut x = acklam_initial(p);
    for _ in 0..2 {
        let pdf = std_normal_pdf(x);
        if pdf == 0.0 {
            break;
        }
        x -= (std_normal_cdf(x) - p) / pdf;
    }
    x
}

// Acklam's rational approximation, relative error about 1.15e-9.
fn acklam_initial(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Privacy-loss tail of the Gaussian mechanism: the smallest δ for which
/// noise `sigma` on a query of ℓ2 sensitivity `l2` is (ε, δ)-DP.
pub fn gaussian_mechanism_delta(epsilon: f64, sigma: f64, l2: f64) -> f64 {
    let a = l2 / (2.0 * sigma);
    let b = epsilon * sigma / l2;
    std_normal_cdf(a - b) - epsilon.exp() * std_normal_cdf(-a - b)
}

/// Smallest noise scale satisfying the Gaussian-mechanism condition for
/// `budget` at ℓ2 sensitivity `delta2`, by bisection on a fixed bracket.
pub fn solve_sigma(budget: PrivacyBudget, delta2: f64) -> Result<f64> {
    let PrivacyBudget { epsilon, delta } = budget;
    if !(epsilon.is_finite() && delta.is_finite() && delta2.is_finite()) {
        return Err(Error::param("sigma solver inputs must be finite"));
    }
    if !(delta2 > 0.0) {
        return Err(Error::param(format!("l2 sensitivity must be > 0, got {delta2}")));
    }
    let ok = |s: f64| gaussian_mechanism_delta(epsilon, s, delta2) <= delta;
    let (mut lo, mut hi) = SIGMA_BRACKET;
    if ok(lo) {
        return Ok(lo);
    }
    if !ok(hi) {
        return Err(Error::param(format!(
            "no sigma in [{lo:e}, {hi:e}] achieves ({epsilon}, {delta})-DP"
        )));
    }
    for _ in 0..SIGMA_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Upper bound `h(t)` on the weight a new user can put on each of its `t`
/// novel items.
#[derive(Clone)]
pub enum SensitivityProfile {
    /// `scale / sqrt(t)`.
    InvSqrt { scale: f64 },
    /// `h(t) = c` for every `t`.
    Constant(f64),
    Custom {
        name: String,
        h: Arc<dyn Fn(usize) -> f64 + Send + Sync>,
    },
}

impl SensitivityProfile {
    pub fn inv_sqrt(scale: f64) -> Self {
        SensitivityProfile::InvSqrt { scale }
    }

    pub fn custom(name: impl Into<String>, h: impl Fn(usize) -> f64 + Send + Sync + 'static) -> Self {
        SensitivityProfile::Custom {
            name: name.into(),
            h: Arc::new(h),
        }
    }

    #[inline]
    pub fn eval(&self, t: usize) -> f64 {
        match self {
            SensitivityProfile::InvSqrt { scale } => scale / (t as f64).sqrt(),
            SensitivityProfile::Constant(c) => *c,
            SensitivityProfile::Custom { h, .. } => h(t),
        }
    }

    /// True if `self(t) >= required(t)` on the whole grid `1..=delta0`.
    pub fn dominates(&self, required: &SensitivityProfile, delta0: usize) -> bool {
        (1..=delta0).all(|t| self.eval(t) >= required.eval(t))
    }

    pub fn describe(&self) -> String {
        match self {
            SensitivityProfile::InvSqrt { scale } if *scale == 1.0 => "1/sqrt(t)".to_string(),
            SensitivityProfile::InvSqrt { scale } => format!("{scale}/sqrt(t)"),
            SensitivityProfile::Constant(c) => format!("{c}"),
            SensitivityProfile::Custom { name, .. } => name.clone(),
        }
    }
}

impl fmt::Debug for SensitivityProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SensitivityProfile({})", self.describe())
    }
}

impl PartialEq for SensitivityProfile {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (SensitivityProfile::InvSqrt { scale: a }, SensitivityProfile::InvSqrt { scale: b }) => a == b,
            (SensitivityProfile::Constant(a), SensitivityProfile::Constant(b)) => a == b,
            (SensitivityProfile::Custom { h: a, .. }, SensitivityProfile::Custom { h: b, .. }) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl Serialize for SensitivityProfile {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.describe())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RhoCalibration {
    pub rho: f64,
    /// Novel-item count attaining the max (smallest on ties).
    pub argmax_t: usize,
}

/// Per-draw upper-tail mass `1 − (1 − δ/2)^{1/t}`, computed without cancellation.
#[inline]
pub fn per_draw_tail(delta: f64, t: usize) -> f64 {
    -((-0.5 * delta).ln_1p() / t as f64).exp_m1()
}

/// Release threshold: `max over t in 1..=delta0 of h(t) + sigma·Φ⁻¹((1 − δ/2)^{1/t})`.
pub fn compute_rho(sigma: f64, delta: f64, delta0: usize, profile: &SensitivityProfile) -> Result<RhoCalibration> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::param(format!("sigma must be finite and > 0, got {sigma}")));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::param(format!("delta must lie in (0, 1], got {delta}")));
    }
    if delta0 == 0 || delta0 > MAX_DELTA0 {
        return Err(Error::param(format!(
            "degree cap must lie in 1..={MAX_DELTA0}, got {delta0}"
        )));
    }
    let mut best = RhoCalibration {
        rho: f64::NEG_INFINITY,
        argmax_t: 0,
    };
    for t in 1..=delta0 {
        let h = profile.eval(t);
        if !(h >= 0.0 && h.is_finite()) {
            return Err(Error::param(format!(
                "sensitivity profile must be finite and >= 0, h({t}) = {h}"
            )));
        }
        let value = h + sigma * std_normal_upper_quantile(per_draw_tail(delta, t))?;
        if value > best.rho {
            best = RhoCalibration {
                rho: value,
                argmax_t: t,
            };
        }
    }
    Ok(best)
}

/// Noise scale, release threshold and adaptive threshold for one invocation
/// of the weight-and-threshold pipeline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationParams {
    pub sigma: f64,
    pub rho: f64,
    pub rho_argmax_t: usize,
    /// `rho + beta * sigma`.
    pub tau: f64,
    pub beta: f64,
    pub delta0: usize,
    #[serde(rename = "profile")]
    pub sensitivity_profile: SensitivityProfile,
}

/// Calibrates one pipeline invocation. Half of δ goes to the Gaussian
/// mechanism (at ℓ2 sensitivity 1), half to the novel-item union bound.
pub fn calibrate(
    budget: PrivacyBudget,
    delta0: usize,
    beta: f64,
    profile: SensitivityProfile,
) -> Result<CalibrationParams> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::param(format!("beta must be finite and >= 0, got {beta}")));
    }
    let half = PrivacyBudget::new(budget.epsilon, budget.delta / 2.0)?;
    let sigma = solve_sigma(half, 1.0)?;
    let RhoCalibration { rho, argmax_t } = compute_rho(sigma, budget.delta, delta0, &profile)?;
    Ok(CalibrationParams {
        sigma,
        rho,
        rho_argmax_t: argmax_t,
        tau: rho + beta * sigma,
        beta,
        delta0,
        sensitivity_profile: profile,
    })
}
