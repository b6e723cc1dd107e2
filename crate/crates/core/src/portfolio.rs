//! Contextual mean-CVaR portfolio selection with 50 risky assets, implicit
//! cash, and a linear or polynomial factor model for returns.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{median_heuristic, KernelSpec};
use crate::normal::sample_std_normal;
use crate::objectives::{zero_template, CostFn, EmpiricalSample, FitOptions, SaaKind, SaaProblem};
use crate::policy::{Basis, FeasibleSet, PolicySpec};
use crate::risk::{self, LossSample, RiskSpec, UtilitySpec};

const N_FACTORS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PortfolioGenConfig {
    pub dx: usize,
    pub dy: usize,
    pub tau: f64,
    pub p_power: u32,
    pub seed: u64,
}

impl Default for PortfolioGenConfig {
    fn default() -> Self {
        Self { dx: 5, dy: 50, tau: 1.0, p_power: 1, seed: 0 }
    }
}

impl PortfolioGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.p_power < 1 || self.dx < 1 || self.dy < 1 {
            return Err(Error::InvalidParameter("p_power, dx and dy must be >= 1".into()));
        }
        Ok(())
    }
}

/// Return model `y = ((0.05/√dx)·Bx + 0.1^{1/p})^p + Lε₁ + 0.01τ·ε₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueModel {
    pub b: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub tau: f64,
    pub p_power: u32,
    /// Scale of the idiosyncratic noise; `0.01τ` for generated models.
    pub idio: f64,
}

impl TrueModel {
    pub fn draw(cfg: &PortfolioGenConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let b = DMatrix::from_fn(cfg.dy, cfg.dx, |_, _| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let s = 0.0025 * cfg.tau;
        let l = DMatrix::from_fn(cfg.dy, N_FACTORS, |_, _| rng.gen_range(-s..=s));
        Ok(Self { b, l, tau: cfg.tau, p_power: cfg.p_power, idio: 0.01 * cfg.tau })
    }

    pub fn dx(&self) -> usize {
        self.b.ncols()
    }

    pub fn dy(&self) -> usize {
        self.b.nrows()
    }

    /// Conditional mean return vector.
    pub fn mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dx(), x.len())?;
        let p = self.p_power as i32;
        let shift = 0.1_f64.powf(1.0 / self.p_power as f64);
        let lin = &self.b * DVector::from_column_slice(x) * (0.05 / (self.dx() as f64).sqrt());
        Ok(lin.iter().map(|v| (v + shift).powi(p)).collect())
    }

    /// Return covariance `LLᵀ + idio²·I`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose() + DMatrix::identity(self.dy(), self.dy()) * self.idio.powi(2)
    }

    pub fn sample_return(&self, x: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mut y = self.mean(x)?;
        let e1 = DVector::from_fn(N_FACTORS, |_, _| sample_std_normal(rng));
        let f = &self.l * e1;
        for (j, v) in y.iter_mut().enumerate() {
            *v += f[j] + self.idio * sample_std_normal(rng);
        }
        Ok(y)
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<EmpiricalSample> {
        if n == 0 {
            return Err(Error::EmptySample);
        }
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..self.dx()).map(|_| sample_std_normal(rng)).collect();
            ys.push(self.sample_return(&x, rng)?);
            xs.push(x);
        }
        EmpiricalSample::new(xs, ys)
    }
}

/// Training and test samples from one freshly drawn model.
pub fn gen_portfolio(
    cfg: &PortfolioGenConfig,
    n_train: usize,
    n_test: usize,
) -> Result<(EmpiricalSample, EmpiricalSample, TrueModel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = TrueModel::draw(cfg, &mut rng)?;
    let train = model.sample(n_train, &mut rng)?;
    let test = model.sample(n_test, &mut rng)?;
    Ok((train, test, model))
}

/// Negated portfolio return `−yᵀz` and its gradient `−y`.
pub fn neg_return_cost(z: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_dim(y.len(), z.len())?;
    let c = -z.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    Ok((c, y.iter().map(|v| -v).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NegReturn;

impl CostFn for NegReturn {
    fn eval(&self, z: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
        neg_return_cost(z, y).expect("decision and return dimensions agree")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PortfolioModel {
    Ew,
    Mc,
    Cmeac,
    Cmec,
}

impl PortfolioModel {
    pub const ALL: [PortfolioModel; 4] = [PortfolioModel::Ew, PortfolioModel::Mc, PortfolioModel::Cmeac, PortfolioModel::Cmec];

    pub fn name(&self) -> &'static str {
        match self {
            PortfolioModel::Ew => "EW",
            PortfolioModel::Mc => "MC",
            PortfolioModel::Cmeac => "CMEAC",
            PortfolioModel::Cmec => "CMEC",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PortfolioSolveConfig {
    pub beta: f64,
    pub eta: f64,
    /// Gaussian lengthscale; `bandwidth_scale` times the median pairwise
    /// distance of the training covariates when absent.
    pub lengthscale: Option<f64>,
    pub bandwidth_scale: f64,
    /// `λ = lambda0 / √N`.
    pub lambda0: f64,
    /// Same scaling for the auxiliary `t(·)` of CMEC; `lambda0` when absent.
    pub lambda0_aux: Option<f64>,
    pub penalty: f64,
    pub fit: FitOptions,
}

impl Default for PortfolioSolveConfig {
    fn default() -> Self {
        Self { beta: 0.9, eta: 1.0 / 3.0, lengthscale: None, bandwidth_scale: 0.7, lambda0: 1e-3, lambda0_aux: None, penalty: 100.0, fit: FitOptions::default() }
    }
}

impl PortfolioSolveConfig {
    pub fn validate(&self) -> Result<()> {
        RiskSpec::Cvar { beta: self.beta }.validate()?;
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::EtaOutOfRange(self.eta));
        }
        if !(self.lambda0 >= 0.0) || !(self.penalty >= 0.0) || self.lambda0_aux.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::InvalidParameter("lambda0 and penalty must be >= 0".into()));
        }
        if !(self.bandwidth_scale > 0.0 && self.bandwidth_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!("bandwidth_scale must be > 0, got {}", self.bandwidth_scale)));
        }
        if let Some(l) = self.lengthscale {
            KernelSpec::Gaussian { lengthscale: l }.validate()?;
        }
        Ok(())
    }

    pub fn lambda(&self, n: usize) -> f64 {
        self.lambda0 / (n as f64).sqrt()
    }

    pub fn aux_lambda(&self, n: usize) -> f64 {
        self.lambda0_aux.unwrap_or(self.lambda0) / (n as f64).sqrt()
    }
}

/// A trained portfolio rule together with its training diagnostics.
#[derive(Debug, Clone)]
pub struct TrainedPortfolio {
    pub model: PortfolioModel,
    pub policy: PolicySpec,
    /// Training objective value (0 for EW).
    pub objective: f64,
    /// Largest distance of a training decision to the feasible set.
    pub max_infeasibility: f64,
    pub lambda: f64,
    pub lengthscale: Option<f64>,
}

impl TrainedPortfolio {
    /// Deployed weights: the rule's output projected onto the capped simplex.
    pub fn decide(&self, x: &[f64]) -> Result<Vec<f64>> {
        deploy(&self.policy, x)
    }
}

pub fn deploy(policy: &PolicySpec, x: &[f64]) -> Result<Vec<f64>> {
    Ok(FeasibleSet::CappedSimplex { cap: 1.0 }.project(&policy.evaluate(x)?.0))
}

/// Constant rule on `dx` covariates.
fn constant_policy(dx: usize, z: &[f64]) -> PolicySpec {
    let coef_z = z
        .iter()
        .map(|v| {
            let mut row = vec![0.0; dx + 1];
            row[0] = *v;
            row
        })
        .collect();
    PolicySpec::Ldr { dx, coef_z, coef_s: None }
}

pub fn solve_model(model: PortfolioModel, train: &EmpiricalSample, cfg: &PortfolioSolveConfig) -> Result<TrainedPortfolio> {
    cfg.validate()?;
    let (dx, dy, n) = (train.dx(), train.dy(), train.len());
    let set = FeasibleSet::CappedSimplex { cap: 1.0 };
    let cvar = SaaKind::ExAnte { risk: RiskSpec::Cvar { beta: cfg.beta } };
    let train_kernel = |aux: bool, kind: SaaKind| -> Result<TrainedPortfolio> {
        let lengthscale = cfg.lengthscale.unwrap_or_else(|| cfg.bandwidth_scale * median_heuristic(train.covariates()));
        let basis = Basis::Kernel {
            kernel: KernelSpec::Gaussian { lengthscale },
            centers: train.covariates().to_vec(),
        };
        let template = zero_template(&basis, dy, aux, true);
        let lambda = cfg.lambda(n);
        let fit = SaaProblem::new(kind, &NegReturn, train, &template, lambda)?
            .with_aux_lambda(cfg.aux_lambda(n))?
            .with_mean_term(cfg.eta)
            .with_penalty(set.clone(), cfg.penalty)?
            .fit(&cfg.fit)?;
        Ok(TrainedPortfolio {
            model,
            max_infeasibility: max_infeasibility(&fit.policy, train)?,
            policy: fit.policy,
            objective: fit.value,
            lambda,
            lengthscale: Some(lengthscale),
        })
    };
    match model {
        PortfolioModel::Ew => Ok(TrainedPortfolio {
            model,
            policy: constant_policy(dx, &vec![1.0 / dy as f64; dy]),
            objective: 0.0,
            max_infeasibility: 0.0,
            lambda: 0.0,
            lengthscale: None,
        }),
        PortfolioModel::Mc => {
            let flat = train.without_covariates();
            let template = zero_template(&Basis::Affine { dx: 0 }, dy, false, false);
            let fit = SaaProblem::new(cvar, &NegReturn, &flat, &template, 0.0)?
                .with_mean_term(cfg.eta)
                .with_penalty(set, cfg.penalty)?
                .fit(&cfg.fit)?;
            let z = fit.policy.evaluate(&[])?.0;
            let policy = constant_policy(dx, &z);
            Ok(TrainedPortfolio {
                model,
                max_infeasibility: max_infeasibility(&policy, train)?,
                policy,
                objective: fit.value,
                lambda: 0.0,
                lengthscale: None,
            })
        }
        PortfolioModel::Cmeac => train_kernel(false, cvar),
        PortfolioModel::Cmec => {
            train_kernel(true, SaaKind::ExpectedOce { utility: UtilitySpec::PiecewiseLinearCvar { beta: cfg.beta } })
        }
    }
}

fn max_infeasibility(policy: &PolicySpec, data: &EmpiricalSample) -> Result<f64> {
    let set = FeasibleSet::CappedSimplex { cap: 1.0 };
    data.covariates()
        .iter()
        .map(|x| Ok(set.distance(&policy.evaluate(x)?.0)))
        .try_fold(0.0_f64, |m, d: Result<f64>| Ok(m.max(d?)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortfolioMetrics {
    pub expected_return: f64,
    pub cvar: f64,
    pub tradeoff: f64,
    pub relative_regret: f64,
    /// Test points left out of the regret average because no asset had a
    /// positive return.
    pub regret_skipped: usize,
}

/// Out-of-sample metrics of deployed (projected) decisions.
pub fn evaluate_metrics(policy: &PolicySpec, test: &EmpiricalSample, eta: f64, beta: f64) -> Result<PortfolioMetrics> {
    if test.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut returns = Vec::with_capacity(test.len());
    let mut regret = 0.0;
    let mut counted = 0usize;
    for (x, y) in test.covariates().iter().zip(test.outcomes()) {
        let z = deploy(policy, x)?;
        let r = -neg_return_cost(&z, y)?.0;
        returns.push(r);
        let best = y.iter().copied().fold(0.0_f64, f64::max);
        if best > 0.0 {
            regret += (best - r) / best;
            counted += 1;
        }
    }
    let expected_return = returns.iter().sum::<f64>() / returns.len() as f64;
    let losses = LossSample::uniform(returns.iter().map(|r| -r).collect())?;
    let cvar = risk::cvar(&losses, beta)?;
    Ok(PortfolioMetrics {
        expected_return,
        cvar,
        tradeoff: eta * expected_return - cvar,
        relative_regret: if counted > 0 { regret / counted as f64 } else { 0.0 },
        regret_skipped: test.len() - counted,
    })
}
