//! Newsvendor cost, synthetic demand generators, and conditional-optimum
//! oracles built on the truncated-normal conditional demand law.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{median_heuristic, KernelSpec};
use crate::objectives::{smooth_plus, zero_template, CostFn, EmpiricalSample, FitOptions, SaaKind, SaaProblem};
use crate::policy::{Basis, PolicySpec};
use crate::risk::{RiskSpec, UtilitySpec};
use crate::solve::golden_section_min;

pub use crate::normal::TruncNormal;

/// Unit holding cost `h` and backorder cost `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NvParams {
    pub h: f64,
    pub b: f64,
}

impl Default for NvParams {
    fn default() -> Self {
        Self { h: 0.2, b: 1.0 }
    }
}

impl NvParams {
    pub fn new(h: f64, b: f64) -> Result<Self> {
        if !(h > 0.0 && b > 0.0) || !h.is_finite() || !b.is_finite() {
            return Err(Error::InvalidParameter(format!("h and b must be > 0, got h={h}, b={b}")));
        }
        Ok(Self { h, b })
    }

    /// Critical ratio `b/(h+b)`.
    pub fn critical_ratio(&self) -> f64 {
        self.b / (self.h + self.b)
    }
}

/// `h(z−y)_+ + b(y−z)_+` and a subgradient in `z` (0 at `z = y`).
pub fn nv_cost(z: f64, y: f64, p: &NvParams) -> (f64, f64) {
    let d = z - y;
    if d > 0.0 {
        (p.h * d, p.h)
    } else if d < 0.0 {
        (-p.b * d, -p.b)
    } else {
        (0.0, 0.0)
    }
}

/// Newsvendor cost as a [`CostFn`] on scalar decisions and outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NvCost(pub NvParams);

impl CostFn for NvCost {
    fn eval(&self, z: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
        let (c, g) = nv_cost(z[0], y[0], &self.0);
        (c, vec![g])
    }

    fn eval_smoothed(&self, z: &[f64], y: &[f64], mu: f64) -> (f64, Vec<f64>) {
        let NvParams { h, b } = self.0;
        let (sp, ds) = smooth_plus(z[0] - y[0], mu);
        (b * (y[0] - z[0]) + (h + b) * sp, vec![-b + (h + b) * ds])
    }
}

pub fn trunc_normal_quantile(d: &TruncNormal, p: f64) -> Result<f64> {
    d.quantile(p)
}

pub fn trunc_normal_sample<R: rand::Rng + ?Sized>(d: &TruncNormal, rng: &mut R) -> f64 {
    d.sample(rng)
}

/// Demand-generating process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandModel {
    /// `X = exp(N(1, 0.5²))`, `Y = max{5X + ε + 100, 0}`, `ε ~ N(0, (20−X)²)`,
    /// all normals truncated at ±2σ.
    Linear,
    /// `Y = max{5e^{1+0.5X₁} + 20cos(2X₂) + ((2X₁+2X₂+24)/2)ε + 100, 0}` with
    /// `X₁, X₂, ε` iid `N(1, 0.5²)` truncated at ±2σ.
    Nonlinear,
}

fn unit_normal() -> TruncNormal {
    TruncNormal::new(1.0, 0.5).expect("valid constants")
}

impl DemandModel {
    pub fn dx(&self) -> usize {
        match self {
            DemandModel::Linear => 1,
            DemandModel::Nonlinear => 2,
        }
    }

    /// Per-coordinate covariate support.
    pub fn support(&self) -> Vec<(f64, f64)> {
        match self {
            DemandModel::Linear => vec![(0.0_f64.exp(), 2.0_f64.exp())],
            DemandModel::Nonlinear => vec![(0.0, 2.0); 2],
        }
    }

    /// Conditional law of `Y` given `X = x`. The clamp at zero never binds
    /// on the covariate support, so the law is an exact truncated normal.
    pub fn conditional(&self, x: &[f64]) -> Result<TruncNormal> {
        check_dim(self.dx(), x.len())?;
        match self {
            DemandModel::Linear => {
                let sigma = 20.0 - x[0];
                if !(sigma > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "covariate {} outside the model's range",
                        x[0]
                    )));
                }
                TruncNormal::new(5.0 * x[0] + 100.0, sigma)
            }
            DemandModel::Nonlinear => {
                let (a, s) = nonlinear_terms(x);
                let e = unit_normal();
                TruncNormal::new(a + s * e.mu, s * e.sigma)
            }
        }
    }

    /// `n` iid draws; deterministic given `seed`.
    pub fn generate(&self, n: usize, seed: u64) -> Result<EmpiricalSample> {
        if n == 0 {
            return Err(Error::EmptySample);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = unit_normal();
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            match self {
                DemandModel::Linear => {
                    let x = base.sample(&mut rng).exp();
                    let sigma = 20.0 - x;
                    assert!(sigma > 0.0, "noise scale must stay positive");
                    let eps = TruncNormal::new(0.0, sigma)?.sample(&mut rng);
                    xs.push(vec![x]);
                    ys.push(vec![(5.0 * x + eps + 100.0).max(0.0)]);
                }
                DemandModel::Nonlinear => {
                    let x = vec![base.sample(&mut rng), base.sample(&mut rng)];
                    let eps = base.sample(&mut rng);
                    let (a, s) = nonlinear_terms(&x);
                    xs.push(x);
                    ys.push(vec![(a + s * eps).max(0.0)]);
                }
            }
        }
        EmpiricalSample::new(xs, ys)
    }

    /// Evaluation grid: `k` equally spaced points per coordinate over the
    /// covariate support (a `k × k` product grid in two dimensions).
    pub fn grid(&self, k: usize) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = self
            .support()
            .into_iter()
            .map(|(lo, hi)| {
                if k == 1 {
                    vec![0.5 * (lo + hi)]
                } else {
                    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
                }
            })
            .collect();
        match axes.len() {
            1 => axes[0].iter().map(|v| vec![*v]).collect(),
            _ => {
                let mut out = Vec::with_capacity(k * k);
                for a in &axes[0] {
                    for b in &axes[1] {
                        out.push(vec![*a, *b]);
                    }
                }
                out
            }
        }
    }
}

fn nonlinear_terms(x: &[f64]) -> (f64, f64) {
    let a = 5.0 * (1.0 + 0.5 * x[0]).exp() + 20.0 * (2.0 * x[1]).cos() + 100.0;
    let s = (2.0 * x[0] + 2.0 * x[1] + 24.0) / 2.0;
    (a, s)
}

pub fn gen_linear(n: usize, seed: u64) -> Result<EmpiricalSample> {
    DemandModel::Linear.generate(n, seed)
}

pub fn gen_nonlinear(n: usize, seed: u64) -> Result<EmpiricalSample> {
    DemandModel::Nonlinear.generate(n, seed)
}

/// Risk-neutral conditional optimum `F⁻¹(b/(h+b))`.
pub fn oracle_rn(x: &[f64], model: DemandModel, p: &NvParams) -> Result<f64> {
    model.conditional(x)?.quantile(p.critical_ratio())
}

/// Conditional CVaR optimum `(z*, t*)` in closed form.
pub fn oracle_cvar(x: &[f64], beta: f64, model: DemandModel, p: &NvParams) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::BetaOutOfRange(beta));
    }
    let law = model.conditional(x)?;
    let NvParams { h, b } = *p;
    let lo = law.quantile(b * (1.0 - beta) / (h + b))?;
    let hi = law.quantile((h * beta + b) / (h + b))?;
    let z = h / (h + b) * lo + b / (h + b) * hi;
    let t = h * b / (h + b) * (hi - lo);
    Ok((z, t))
}

/// Conditional entropic optimum by golden-section search on a Monte Carlo
/// objective with common random numbers across `z`.
pub fn oracle_entropic(
    x: &[f64],
    gamma: f64,
    model: DemandModel,
    p: &NvParams,
    mc_n: usize,
    seed: u64,
) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::GammaOutOfRange(gamma));
    }
    if mc_n == 0 {
        return Err(Error::EmptySample);
    }
    let law = model.conditional(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ys: Vec<f64> = (0..mc_n).map(|_| law.sample(&mut rng)).collect();
    let (lo, hi) = law.support();
    let f = |z: f64| {
        let m = ys.iter().map(|y| gamma * nv_cost(z, *y, p).0).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = ys.iter().map(|y| (gamma * nv_cost(z, *y, p).0 - m).exp()).sum();
        (m + (s / mc_n as f64).ln()) / gamma
    };
    Ok(golden_section_min(f, lo, hi, 1e-9 * (1.0 + hi.abs()))?.0)
}

/// `E[f(Y)]` under a truncated normal by the midpoint rule on `m` quantile
/// levels.
pub fn expect_under(law: &TruncNormal, m: usize, f: impl Fn(f64) -> f64) -> Result<f64> {
    let mut acc = 0.0;
    for k in 0..m {
        acc += f(law.quantile((k as f64 + 0.5) / m as f64)?);
    }
    Ok(acc / m as f64)
}

const QUAD_LEVELS: usize = 4000;

/// Conditional entropic risk of the cost of decision `z` at covariate `x`.
pub fn conditional_entropic(x: &[f64], z: f64, gamma: f64, model: DemandModel, p: &NvParams) -> Result<f64> {
    let law = model.conditional(x)?;
    let (lo, hi) = law.support();
    let shift = gamma * nv_cost(z, lo, p).0.max(nv_cost(z, hi, p).0);
    let m = expect_under(&law, QUAD_LEVELS, |y| (gamma * nv_cost(z, y, p).0 - shift).exp())?;
    Ok((shift + m.ln()) / gamma)
}

/// Conditional CVaR of the cost of decision `z` at covariate `x`.
pub fn conditional_cvar(x: &[f64], z: f64, beta: f64, model: DemandModel, p: &NvParams) -> Result<f64> {
    let law = model.conditional(x)?;
    let (lo, hi) = law.support();
    let obj = |t: f64| {
        expect_under(&law, QUAD_LEVELS, |y| (nv_cost(z, y, p).0 - t).max(0.0))
            .map(|e| t + e / (1.0 - beta))
            .unwrap_or(f64::INFINITY)
    };
    let top = nv_cost(z, lo, p).0.max(nv_cost(z, hi, p).0);
    Ok(golden_section_min(obj, 0.0, top.max(1e-12), 1e-9 * (1.0 + top))?.1)
}

/// `Σ_j |g_j − z*_j| / Σ_j |z*_j|`.
pub fn relative_distance(policy: &[f64], oracle: &[f64]) -> Result<f64> {
    check_dim(oracle.len(), policy.len())?;
    let num: f64 = policy.iter().zip(oracle).map(|(g, z)| (g - z).abs()).sum();
    let den: f64 = oracle.iter().map(|z| z.abs()).sum();
    if den == 0.0 {
        return Err(Error::InvalidParameter("oracle decisions are all zero".into()));
    }
    Ok(num / den)
}

/// Risk models compared in the newsvendor experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NvObjective {
    RiskNeutral,
    ExAnteCvar { beta: f64 },
    ExpectedCvar { beta: f64 },
    Entropic { gamma: f64 },
    ExpectedEntropic { gamma: f64 },
}

impl NvObjective {
    pub fn name(&self) -> &'static str {
        match self {
            NvObjective::RiskNeutral => "rn",
            NvObjective::ExAnteCvar { .. } => "exante_cvar",
            NvObjective::ExpectedCvar { .. } => "expected_cvar",
            NvObjective::Entropic { .. } => "entropic",
            NvObjective::ExpectedEntropic { .. } => "expected_entropic",
        }
    }

    pub fn saa_kind(&self) -> SaaKind {
        match *self {
            NvObjective::RiskNeutral => SaaKind::ExAnte { risk: RiskSpec::Mean },
            NvObjective::ExAnteCvar { beta } => SaaKind::ExAnte { risk: RiskSpec::Cvar { beta } },
            NvObjective::ExpectedCvar { beta } => {
                SaaKind::ExpectedOce { utility: UtilitySpec::PiecewiseLinearCvar { beta } }
            }
            NvObjective::Entropic { gamma } => SaaKind::Entropic { gamma },
            NvObjective::ExpectedEntropic { gamma } => SaaKind::ExpectedOce { utility: UtilitySpec::Exponential { gamma } },
        }
    }

    fn needs_aux(&self) -> bool {
        matches!(self, NvObjective::ExpectedCvar { .. } | NvObjective::ExpectedEntropic { .. })
    }

    /// The conditionally optimal decision this objective targets: the
    /// risk-neutral quantile, the conditional CVaR optimum (for both CVaR
    /// forms) or the conditional entropic optimum (for both entropic forms).
    pub fn oracle(&self, x: &[f64], model: DemandModel, p: &NvParams, mc_n: usize, seed: u64) -> Result<f64> {
        match *self {
            NvObjective::RiskNeutral => oracle_rn(x, model, p),
            NvObjective::ExAnteCvar { beta } | NvObjective::ExpectedCvar { beta } => Ok(oracle_cvar(x, beta, model, p)?.0),
            NvObjective::Entropic { gamma } | NvObjective::ExpectedEntropic { gamma } => {
                oracle_entropic(x, gamma, model, p, mc_n, seed)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyClass {
    Ldr,
    Qdr,
    Rkhs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NvTrainConfig {
    pub params: NvParams,
    /// Regularization `λ = lambda0/√N`; applied to kernel policies only.
    pub lambda0: f64,
    /// Gaussian lengthscale as a multiple of the median pairwise distance.
    pub bandwidth_scale: f64,
    pub fit: FitOptions,
}

impl Default for NvTrainConfig {
    fn default() -> Self {
        Self { params: NvParams::default(), lambda0: 1e-3, bandwidth_scale: 0.5, fit: FitOptions::default() }
    }
}

/// Trained order-quantity rule for one objective and policy class.
pub fn train_policy(
    data: &EmpiricalSample,
    objective: NvObjective,
    class: PolicyClass,
    cfg: &NvTrainConfig,
) -> Result<PolicySpec> {
    let dx = data.dx();
    let aux = objective.needs_aux();
    let (template, lambda) = match class {
        PolicyClass::Ldr => (zero_template(&Basis::Affine { dx }, 1, aux, false), 0.0),
        PolicyClass::Qdr => (zero_template(&Basis::Quadratic { dx }, 1, aux, false), 0.0),
        PolicyClass::Rkhs => {
            let lengthscale = cfg.bandwidth_scale * median_heuristic(data.covariates());
            let basis = Basis::Kernel { kernel: KernelSpec::Gaussian { lengthscale }, centers: data.covariates().to_vec() };
            (zero_template(&basis, 1, aux, true), cfg.lambda0 / (data.len() as f64).sqrt())
        }
    };
    let cost = NvCost(cfg.params);
    let fit = SaaProblem::new(objective.saa_kind(), &cost, data, &template, lambda)?.fit(&cfg.fit)?;
    Ok(fit.policy)
}

/// How decisions are compared with oracle decisions over evaluation points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// `Σ_j |g_j − z*_j| / Σ_j |z*_j|`.
    #[default]
    RelativeL1,
    /// `(1/J) Σ_j |g_j − z*_j| / |z*_j|`.
    MeanRelative,
}

impl DistanceMetric {
    pub fn eval(&self, policy: &[f64], oracle: &[f64]) -> Result<f64> {
        match self {
            DistanceMetric::RelativeL1 => relative_distance(policy, oracle),
            DistanceMetric::MeanRelative => {
                check_dim(oracle.len(), policy.len())?;
                if oracle.is_empty() || oracle.iter().any(|z| *z == 0.0) {
                    return Err(Error::InvalidParameter("oracle decisions must be nonzero".into()));
                }
                let s: f64 = policy.iter().zip(oracle).map(|(g, z)| ((g - z) / z).abs()).sum();
                Ok(s / oracle.len() as f64)
            }
        }
    }
}

/// Relative distance of a policy's decisions to an objective's oracle over
/// evaluation points.
pub fn policy_distance(
    policy: &PolicySpec,
    objective: NvObjective,
    model: DemandModel,
    points: &[Vec<f64>],
    p: &NvParams,
    oracle_mc: usize,
) -> Result<f64> {
    let g = points.iter().map(|x| Ok(policy.evaluate(x)?.0[0])).collect::<Result<Vec<_>>>()?;
    let z = points
        .iter()
        .enumerate()
        .map(|(j, x)| objective.oracle(x, model, p, oracle_mc, j as u64))
        .collect::<Result<Vec<_>>>()?;
    relative_distance(&g, &z)
}
