//! Differential-privacy mechanisms and Renyi-DP accounting.
//!
//! The accountant tracks Renyi divergence bounds for the Gaussian mechanism
//! and its Poisson-subsampled variant, composes them across rounds, and
//! converts the composed curve to an `(epsilon, delta)` guarantee. The
//! subsampled bound is the integer-order binomial expansion evaluated
//! entirely in log space so small sampling rates and large orders never
//! overflow.

use crate::error::{Error, Result};
use crate::numeric::{ParamVector, RngStream};
use serde::{Deserialize, Serialize};

/// Largest Renyi order tracked by the accountant.
pub const MAX_ALPHA: u32 = 256;

/// Orders used for full curves: 1.5 plus the integers 2..=256.
pub fn alpha_grid() -> Vec<f64> {
    let mut grid = vec![1.5];
    grid.extend((2..=MAX_ALPHA).map(f64::from));
    grid
}

/// Complete DP configuration for a two-stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    /// Target privacy budget.
    pub epsilon: f64,
    /// Failure probability; defaults to `1/|K|^1.1` for `|K|` clients.
    pub delta: f64,
    /// Poisson sampling rate per round.
    pub q: f64,
    /// Initialization-stage round count.
    pub t_in: u32,
    /// Training-stage round count.
    pub t_tr: u32,
    /// Training-stage clipping threshold.
    pub s: f64,
    /// Initialization-stage clipping threshold.
    pub s_in: f64,
    /// Noise multiplier; zero disables noise (no DP guarantee).
    pub z: f64,
}

impl PrivacySpec {
    /// Default `delta = 1 / |K|^1.1`.
    pub fn default_delta(num_clients: usize) -> f64 {
        1.0 / (num_clients as f64).powf(1.1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("epsilon must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter("delta must be in (0, 1)".into()));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::InvalidParameter("q must be in (0, 1]".into()));
        }
        if !(self.s > 0.0) || !(self.s_in > 0.0) {
            return Err(Error::InvalidParameter(
                "clipping thresholds must be positive".into(),
            ));
        }
        if !(self.z >= 0.0) {
            return Err(Error::InvalidParameter(
                "noise multiplier must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Renyi-DP of the Gaussian mechanism at sensitivity 1: `alpha / (2 z^2)`.
pub fn gaussian_rdp(z: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::InvalidParameter(format!(
            "Renyi order must exceed 1, got {alpha}"
        )));
    }
    if !(z > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise multiplier must be positive, got {z}"
        )));
    }
    Ok(alpha / (2.0 * z * z))
}

/// Renyi-DP upper bound for the Poisson-subsampled Gaussian mechanism at an
/// integer order, via the binomial expansion
///
/// ```text
/// eps'(alpha) = log( sum_{k=0}^{alpha} C(alpha,k) (1-q)^(alpha-k) q^k
///                    exp(k(k-1) / (2 z^2)) ) / (alpha - 1)
/// ```
///
/// evaluated in log space with a max-shifted log-sum-exp; at `q = 1` the
/// only surviving term reproduces the plain Gaussian value.
pub fn subsampled_gaussian_rdp(z: f64, q: f64, alpha: u32) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::InvalidParameter(format!(
            "integer Renyi order must be >= 2, got {alpha}"
        )));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "sampling rate must be in (0, 1], got {q}"
        )));
    }
    if !(z > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise multiplier must be positive, got {z}"
        )));
    }
    let ln_q = q.ln();
    let ln_1mq = if q < 1.0 {
        (1.0 - q).ln()
    } else {
        f64::NEG_INFINITY
    };
    let inv_2z2 = 1.0 / (2.0 * z * z);
    let mut terms = Vec::with_capacity(alpha as usize + 1);
    let mut ln_choose = 0.0;
    for k in 0..=alpha {
        let kf = f64::from(k);
        let mut t = ln_choose + kf * ln_q + kf * (kf - 1.0) * inv_2z2;
        if alpha - k > 0 {
            t += f64::from(alpha - k) * ln_1mq;
        }
        terms.push(t);
        if k < alpha {
            ln_choose += f64::from(alpha - k).ln() - f64::from(k + 1).ln();
        }
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    Ok((max + sum.ln()) / (f64::from(alpha) - 1.0))
}

/// A Renyi-DP curve: ordered `(alpha, eps')` points.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpCurve {
    points: Vec<(f64, f64)>,
}

impl RdpCurve {
    pub fn from_points(points: Vec<(f64, f64)>) -> Self {
        Self { points }
    }

    /// All-zero curve over the full order grid.
    pub fn zero() -> Self {
        Self {
            points: alpha_grid().into_iter().map(|a| (a, 0.0)).collect(),
        }
    }

    /// Gaussian-mechanism curve over the full order grid (fractional orders
    /// included; the closed form holds for any `alpha > 1`).
    pub fn gaussian(z: f64) -> Result<Self> {
        let points = alpha_grid()
            .into_iter()
            .map(|a| gaussian_rdp(z, a).map(|e| (a, e)))
            .collect::<Result<_>>()?;
        Ok(Self { points })
    }

    /// Subsampled-Gaussian curve; the binomial bound is defined at integer
    /// orders only, so the curve spans 2..=256.
    pub fn subsampled_gaussian(z: f64, q: f64) -> Result<Self> {
        let points = (2..=MAX_ALPHA)
            .map(|a| subsampled_gaussian_rdp(z, q, a).map(|e| (f64::from(a), e)))
            .collect::<Result<_>>()?;
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Sequential composition over `rounds` identical releases: pointwise
    /// multiplication of `eps'`.
    pub fn compose(&self, rounds: u32) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|&(a, e)| (a, e * f64::from(rounds)))
                .collect(),
        }
    }

    /// Pointwise sum over the orders both curves define.
    pub fn add(&self, other: &Self) -> Self {
        let mut points = Vec::new();
        for &(a, e) in &self.points {
            if let Some(&(_, eo)) = other.points.iter().find(|&&(ao, _)| ao == a) {
                points.push((a, e + eo));
            }
        }
        Self { points }
    }

    /// Converts the curve to `(epsilon, delta)`-DP:
    /// `min_alpha [ eps' + log((alpha-1)/alpha) - (log alpha + log delta)/(alpha-1) ]`,
    /// floored at zero.
    pub fn to_dp(&self, delta: f64) -> Result<f64> {
        if self.points.is_empty() {
            return Err(Error::InvalidParameter("empty RDP curve".into()));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "delta must be in (0, 1), got {delta}"
            )));
        }
        let ln_delta = delta.ln();
        let eps = self
            .points
            .iter()
            .map(|&(a, e)| e + ((a - 1.0) / a).ln() - (a.ln() + ln_delta) / (a - 1.0))
            .fold(f64::INFINITY, f64::min);
        Ok(eps.max(0.0))
    }
}

/// Free-function form of the RDP-to-DP conversion.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<f64> {
    curve.to_dp(delta)
}

const CALIBRATION_Z_MAX: f64 = 1e3;
const CALIBRATION_Z_MIN: f64 = 1e-6;

/// Smallest noise multiplier whose composed subsampled-Gaussian curve
/// converts to at most `epsilon` at `delta`.
///
/// Bisection keeps the invariant `spent(lo) > epsilon >= spent(hi)` and
/// stops once re-spending `hi` lands inside `[epsilon * 0.999, epsilon]`.
pub fn calibrate_z(epsilon: f64, delta: f64, q: f64, total_rounds: u32) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter("epsilon must be positive".into()));
    }
    if total_rounds == 0 {
        return Err(Error::InvalidParameter(
            "calibration needs at least one round".into(),
        ));
    }
    let spent = |z: f64| -> Result<f64> {
        RdpCurve::subsampled_gaussian(z, q)?
            .compose(total_rounds)
            .to_dp(delta)
    };
    let mut hi = CALIBRATION_Z_MAX;
    let mut spent_hi = spent(hi)?;
    if spent_hi > epsilon {
        return Err(Error::Infeasible(format!(
            "epsilon {epsilon} unreachable even at z = {CALIBRATION_Z_MAX} \
             (floor is {spent_hi:.6})"
        )));
    }
    let mut lo = CALIBRATION_Z_MIN;
    if spent(lo)? <= epsilon {
        return Ok(lo);
    }
    for _ in 0..200 {
        if spent_hi >= epsilon * (1.0 - 1e-3) {
            break;
        }
        let mid = (lo * hi).sqrt();
        let spent_mid = spent(mid)?;
        if spent_mid <= epsilon {
            hi = mid;
            spent_hi = spent_mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Local DP release: clip to `s`, then add i.i.d. `N(0, (z s)^2)` noise.
pub fn local_dp(delta: &ParamVector, z: f64, s: f64, stream: &mut RngStream) -> Result<ParamVector> {
    if z < 0.0 {
        return Err(Error::InvalidParameter(
            "noise multiplier must be non-negative".into(),
        ));
    }
    let mut out = delta.clip(s)?;
    if z > 0.0 {
        let noise = stream.gaussian_vec(out.len(), z * s);
        for (v, n) in out.values_mut().iter_mut().zip(&noise) {
            *v += n;
        }
    }
    Ok(out)
}

/// Distributed-DP secure sum: each client's contribution is its clipped
/// update plus an `N(0, (z s)^2 / K)` noise share, and only the sum of the
/// contributions leaves this function. Total noise variance is `(z s)^2`
/// per coordinate regardless of the client count.
///
/// Contributions are accumulated in input order; determinism comes from the
/// per-client streams, so any permutation of `(delta, stream)` pairs yields
/// the same sum up to floating-point addition order.
pub fn secure_sum_dp(
    deltas: &[ParamVector],
    z: f64,
    s: f64,
    streams: &mut [RngStream],
) -> Result<ParamVector> {
    if deltas.is_empty() {
        return Err(Error::NotEnough { need: 1, got: 0 });
    }
    if streams.len() != deltas.len() {
        return Err(Error::DimensionMismatch {
            expected: deltas.len(),
            got: streams.len(),
        });
    }
    let share_sigma = z * s / (deltas.len() as f64).sqrt();
    let mut sum = ParamVector::zeros(deltas[0].layout().clone());
    for (delta, stream) in deltas.iter().zip(streams.iter_mut()) {
        let mut contribution = delta.clip(s)?;
        if z > 0.0 {
            let noise = stream.gaussian_vec(contribution.len(), share_sigma);
            for (v, n) in contribution.values_mut().iter_mut().zip(&noise) {
                *v += n;
            }
        }
        sum.add_scaled_assign(&contribution, 1.0)?;
    }
    Ok(sum)
}

/// Total `(epsilon, delta)` budget of a run: `participations_stage1`
/// full-participation Gaussian releases composed with `rounds_stage2`
/// subsampled releases at rate `q`, converted at `spec.delta`.
///
/// Returns infinity when the configuration carries no noise.
pub fn spent_budget(
    spec: &PrivacySpec,
    participations_stage1: u32,
    rounds_stage2: u32,
) -> Result<f64> {
    if spec.z <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let mut curve = RdpCurve::zero();
    if participations_stage1 > 0 {
        curve = curve.add(&RdpCurve::gaussian(spec.z)?.compose(participations_stage1));
    }
    if rounds_stage2 > 0 {
        curve = curve.add(&RdpCurve::subsampled_gaussian(spec.z, spec.q)?.compose(rounds_stage2));
    }
    curve.to_dp(spec.delta)
}
