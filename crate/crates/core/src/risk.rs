//! Law-invariant risk measures on finite weighted samples of losses.
//!
//! Losses are "bigger is worse". All measures are evaluated either in closed
//! form on sorted order statistics or through their one-dimensional
//! variational representation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solve::golden_section_min;

const WEIGHT_TOL: f64 = 1e-12;
const OCE_TOL: f64 = 1e-10;

/// A finite loss distribution: values with probability weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl LossSample {
    /// Uniformly weighted sample.
    pub fn uniform(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSample("non-finite loss value".into()));
        }
        let w = 1.0 / values.len() as f64;
        let weights = vec![w; values.len()];
        Ok(Self { values, weights })
    }

    pub fn weighted(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample);
        }
        if values.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: values.len(),
                got: weights.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSample("non-finite loss value".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidSample("weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidSample(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { values, weights })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same weights, values transformed pointwise.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::weighted(self.values.iter().map(|&v| f(v)).collect(), self.weights.clone())
    }

    fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Indices sorted by ascending value (stable).
    fn ascending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[a].total_cmp(&self.values[b]));
        idx
    }
}

/// Concave nondecreasing utility defining an optimized certainty equivalent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilitySpec {
    /// `u(x) = x/(1−β)` for `x ≤ 0`, `0` otherwise. Its OCE is `CVaR_β`.
    PiecewiseLinearCvar { beta: f64 },
    /// `u(x) = (1 − e^{−γx})/γ`. Its OCE is the entropic risk measure.
    Exponential { gamma: f64 },
    /// Continuous piecewise-linear utility with `u(0) = 0`: slope
    /// `slopes[k]` on the k-th segment delimited by the sorted `breakpoints`
    /// (`slopes.len() == breakpoints.len() + 1`).
    CustomPwl { breakpoints: Vec<f64>, slopes: Vec<f64> },
}

impl UtilitySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            UtilitySpec::PiecewiseLinearCvar { beta } => check_beta(*beta),
            UtilitySpec::Exponential { gamma } => check_gamma(*gamma),
            UtilitySpec::CustomPwl { breakpoints, slopes } => {
                if slopes.len() != breakpoints.len() + 1 {
                    return Err(Error::InvalidParameter(
                        "custom utility needs one more slope than breakpoints".into(),
                    ));
                }
                if breakpoints.iter().any(|b| !b.is_finite())
                    || breakpoints.windows(2).any(|w| !(w[0] < w[1]))
                {
                    return Err(Error::InvalidParameter(
                        "breakpoints must be finite and strictly increasing".into(),
                    ));
                }
                if slopes.iter().any(|s| !(*s >= 0.0) || !s.is_finite())
                    || slopes.windows(2).any(|w| w[1] > w[0])
                {
                    return Err(Error::InvalidParameter(
                        "slopes must be nonnegative and nonincreasing".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Utility value `u(x)`.
    pub fn value(&self, x: f64) -> f64 {
        match self {
            UtilitySpec::PiecewiseLinearCvar { beta } => x.min(0.0) / (1.0 - beta),
            UtilitySpec::Exponential { gamma } => -(-gamma * x).exp_m1() / gamma,
            UtilitySpec::CustomPwl { breakpoints, slopes } => pwl_value(breakpoints, slopes, x),
        }
    }

    /// A supergradient of `u` at `x` (the left slope at kinks).
    pub fn slope(&self, x: f64) -> f64 {
        match self {
            UtilitySpec::PiecewiseLinearCvar { beta } => {
                if x <= 0.0 {
                    1.0 / (1.0 - beta)
                } else {
                    0.0
                }
            }
            UtilitySpec::Exponential { gamma } => (-gamma * x).exp(),
            UtilitySpec::CustomPwl { breakpoints, slopes } => {
                let k = breakpoints.iter().take_while(|&&b| b < x).count();
                slopes[k]
            }
        }
    }

    fn breakpoint_extent(&self) -> (f64, f64) {
        match self {
            UtilitySpec::CustomPwl { breakpoints, .. } if !breakpoints.is_empty() => (
                breakpoints[0].min(0.0),
                breakpoints[breakpoints.len() - 1].max(0.0),
            ),
            _ => (0.0, 0.0),
        }
    }
}

fn pwl_value(breakpoints: &[f64], slopes: &[f64], x: f64) -> f64 {
    // integrate the slope from 0 to x
    let mut knots = Vec::with_capacity(breakpoints.len() + 2);
    knots.push(f64::NEG_INFINITY);
    knots.extend_from_slice(breakpoints);
    knots.push(f64::INFINITY);
    let (lo, hi, sign) = if x >= 0.0 { (0.0, x, 1.0) } else { (x, 0.0, -1.0) };
    let mut acc = 0.0;
    for (k, s) in slopes.iter().enumerate() {
        let a = knots[k].max(lo);
        let b = knots[k + 1].min(hi);
        if b > a {
            acc += s * (b - a);
        }
    }
    sign * acc
}

/// Tagged description of a law-invariant risk measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskSpec {
    Mean,
    Cvar { beta: f64 },
    Entropic { gamma: f64 },
    Oce { utility: UtilitySpec },
    MeanUpperSemidev { eta: f64 },
    QuantileDeviation { eps1: f64, eps2: f64 },
    /// Mixture of CVaRs: `atoms` are `(weight, beta)` pairs.
    SpectralDiscrete { atoms: Vec<(f64, f64)> },
}

impl RiskSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            RiskSpec::Mean => Ok(()),
            RiskSpec::Cvar { beta } => check_beta(*beta),
            RiskSpec::Entropic { gamma } => check_gamma(*gamma),
            RiskSpec::Oce { utility } => utility.validate(),
            RiskSpec::MeanUpperSemidev { eta } => check_eta(*eta),
            RiskSpec::QuantileDeviation { eps1, eps2 } => check_qdev(*eps1, *eps2),
            RiskSpec::SpectralDiscrete { atoms } => check_atoms(atoms),
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::BetaOutOfRange(beta))
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::GammaOutOfRange(gamma))
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eta) {
        Ok(())
    } else {
        Err(Error::EtaOutOfRange(eta))
    }
}

fn check_qdev(eps1: f64, eps2: f64) -> Result<()> {
    if eps1 > 0.0 && eps2 > 0.0 && eps1.is_finite() && eps2.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "quantile deviation needs eps1, eps2 > 0, got ({eps1}, {eps2})"
        )))
    }
}

fn check_atoms(atoms: &[(f64, f64)]) -> Result<()> {
    if atoms.is_empty() {
        return Err(Error::InvalidParameter("spectral measure has no atoms".into()));
    }
    for &(w, b) in atoms {
        if !(w > 0.0) {
            return Err(Error::InvalidParameter(format!("spectral weight {w} must be > 0")));
        }
        check_beta(b)?;
    }
    let total: f64 = atoms.iter().map(|a| a.0).sum();
    if (total - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::InvalidParameter(format!(
            "spectral weights sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// Expected loss.
pub fn mean(sample: &LossSample) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok(sample.values.iter().zip(&sample.weights).map(|(v, w)| v * w).sum())
}

/// Lower β-quantile: the smallest order statistic whose cumulative weight
/// reaches β. It minimizes the Rockafellar–Uryasev objective.
pub fn value_at_risk(sample: &LossSample, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let order = sample.ascending();
    let mut cum = 0.0;
    for &i in &order {
        cum += sample.weights[i];
        if cum >= beta && sample.weights[i] > 0.0 {
            return Ok(sample.values[i]);
        }
    }
    Ok(sample.values[*order.last().expect("nonempty")])
}

/// `CVaR_β`, evaluated as `t* + E[(ξ − t*)_+]/(1−β)` at the β-quantile `t*`.
pub fn cvar(sample: &LossSample, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if beta == 0.0 {
        return mean(sample);
    }
    let t = value_at_risk(sample, beta)?;
    Ok(t + excess(sample, t) / (1.0 - beta))
}

fn excess(sample: &LossSample, t: f64) -> f64 {
    sample
        .values
        .iter()
        .zip(&sample.weights)
        .map(|(v, w)| w * (v - t).max(0.0))
        .sum()
}

/// Entropic risk `(1/γ) ln E[e^{γξ}]` with a max shift.
pub fn entropic(sample: &LossSample, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok(log_sum_exp_weighted(sample.values(), sample.weights(), gamma) / gamma)
}

/// `ln Σ w_i e^{γ v_i}` evaluated stably.
pub(crate) fn log_sum_exp_weighted(values: &[f64], weights: &[f64], gamma: f64) -> f64 {
    let m = values
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(v, _)| gamma * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (gamma * v - m).exp())
        .sum();
    m + s.ln()
}

/// Negative optimized certainty equivalent `inf_s { −s − E[u(−ξ − s)] }`,
/// minimized over `s` by golden-section search.
pub fn oce(sample: &LossSample, utility: &UtilitySpec) -> Result<f64> {
    utility.validate()?;
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    if let UtilitySpec::CustomPwl { slopes, .. } = utility {
        let (left, right) = (slopes[0], slopes[slopes.len() - 1]);
        if left < 1.0 || right > 1.0 {
            return Err(Error::OceUnbounded(format!(
                "outer slopes ({left}, {right}) must bracket 1"
            )));
        }
    }
    let objective = |s: f64| -> f64 {
        -s - sample
            .values
            .iter()
            .zip(&sample.weights)
            .map(|(v, w)| w * utility.value(-v - s))
            .sum::<f64>()
    };
    // A minimizer lies in [−max ξ − b_max, −min ξ − b_min].
    let (lo_v, hi_v) = sample.min_max();
    let (b_lo, b_hi) = utility.breakpoint_extent();
    let (lo, hi) = (-hi_v - b_hi - 1.0, -lo_v - b_lo + 1.0);
    let (_, value) = golden_section_min(objective, lo, hi, OCE_TOL)?;
    Ok(value)
}

/// `E[ξ] + η·E[(ξ − E[ξ])_+]` (order 1).
pub fn mean_upper_semidev(sample: &LossSample, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    let m = mean(sample)?;
    Ok(m + eta * excess(sample, m))
}

/// `min_t E[max{ε1(t−ξ), ε2(ξ−t)}]`, attained at the `ε2/(ε1+ε2)`-quantile.
pub fn quantile_deviation(sample: &LossSample, eps1: f64, eps2: f64) -> Result<f64> {
    check_qdev(eps1, eps2)?;
    let beta = eps2 / (eps1 + eps2);
    let t = value_at_risk(sample, beta)?;
    Ok(sample
        .values
        .iter()
        .zip(&sample.weights)
        .map(|(v, w)| w * (eps1 * (t - v)).max(eps2 * (v - t)))
        .sum())
}

/// `Σ_j w_j · CVaR_{β_j}`.
pub fn spectral_discrete(sample: &LossSample, atoms: &[(f64, f64)]) -> Result<f64> {
    check_atoms(atoms)?;
    atoms
        .iter()
        .map(|&(w, b)| cvar(sample, b).map(|c| w * c))
        .sum()
}

/// Dispatch on the risk kind.
pub fn evaluate(spec: &RiskSpec, sample: &LossSample) -> Result<f64> {
    match spec {
        RiskSpec::Mean => mean(sample),
        RiskSpec::Cvar { beta } => cvar(sample, *beta),
        RiskSpec::Entropic { gamma } => entropic(sample, *gamma),
        RiskSpec::Oce { utility } => oce(sample, utility),
        RiskSpec::MeanUpperSemidev { eta } => mean_upper_semidev(sample, *eta),
        RiskSpec::QuantileDeviation { eps1, eps2 } => quantile_deviation(sample, *eps1, *eps2),
        RiskSpec::SpectralDiscrete { atoms } => spectral_discrete(sample, atoms),
    }
}
