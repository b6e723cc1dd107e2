//! Regularized sample-average objectives over a policy parametrization.
//!
//! An objective's parameter vector is the template policy's
//! [`PolicySpec::flatten`] layout followed by any scalar auxiliary variables
//! the risk's variational form needs (one `t` for CVaR and quantile
//! deviation, one `t_j` per spectral atom). Auxiliary policy outputs are
//! parametrized as `t(x) = −s(x)`, the level a loss is measured against.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{cholesky_with_jitter, gram};
use crate::policy::{Basis, FeasibleSet, PolicySpec};
use crate::risk::{self, RiskSpec, UtilitySpec};
use crate::solve::{minimize, Objective, SolveConfig, SolveResult, StepSchedule};

/// Paired covariate/outcome observations with uniform weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalSample {
    covariates: Vec<Vec<f64>>,
    outcomes: Vec<Vec<f64>>,
}

impl EmpiricalSample {
    pub fn new(covariates: Vec<Vec<f64>>, outcomes: Vec<Vec<f64>>) -> Result<Self> {
        if covariates.is_empty() {
            return Err(Error::EmptySample);
        }
        check_dim(covariates.len(), outcomes.len())?;
        let dx = covariates[0].len();
        let dy = outcomes[0].len();
        for (x, y) in covariates.iter().zip(&outcomes) {
            check_dim(dx, x.len())?;
            check_dim(dy, y.len())?;
            if x.iter().chain(y).any(|v| !v.is_finite()) {
                return Err(Error::InvalidSample("non-finite observation".into()));
            }
        }
        Ok(Self { covariates, outcomes })
    }

    pub fn len(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.is_empty()
    }

    pub fn dx(&self) -> usize {
        self.covariates[0].len()
    }

    pub fn dy(&self) -> usize {
        self.outcomes[0].len()
    }

    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.covariates
    }

    pub fn outcomes(&self) -> &[Vec<f64>] {
        &self.outcomes
    }

    /// Same outcomes with covariates dropped, for context-free models.
    pub fn without_covariates(&self) -> Self {
        Self { covariates: vec![Vec::new(); self.len()], outcomes: self.outcomes.clone() }
    }

    /// CSV with header `x_1,…,x_dx,y` (or `y_1,…` for vector outcomes).
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.dx()).map(|j| format!("x_{j}")).collect();
        if self.dy() == 1 {
            header.push("y".into());
        } else {
            header.extend((1..=self.dy()).map(|j| format!("y_{j}")));
        }
        out.write_record(&header)?;
        for (x, y) in self.covariates.iter().zip(&self.outcomes) {
            out.write_record(x.iter().chain(y).map(|v| fmt_f64(*v)))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let dx = header.iter().filter(|h| h.starts_with("x_")).count();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Format(e.to_string())))
                .collect::<Result<_>>()?;
            xs.push(vals[..dx].to_vec());
            ys.push(vals[dx..].to_vec());
        }
        Self::new(xs, ys)
    }
}

/// Float formatting with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// A cost `c(z, y)` convex in `z`, with a subgradient in `z`.
pub trait CostFn: Send + Sync {
    fn eval(&self, z: &[f64], y: &[f64]) -> (f64, Vec<f64>);

    /// Smooth approximation with kinks rounded at width `mu`; costs without
    /// kinks return [`CostFn::eval`].
    fn eval_smoothed(&self, z: &[f64], y: &[f64], mu: f64) -> (f64, Vec<f64>) {
        let _ = mu;
        self.eval(z, y)
    }
}

/// Cost given by a closure.
pub struct FnCost<F>(pub F);

impl<F> CostFn for FnCost<F>
where
    F: Fn(&[f64], &[f64]) -> (f64, Vec<f64>) + Send + Sync,
{
    fn eval(&self, z: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
        (self.0)(z, y)
    }
}

/// Regret `c(z, y) − c(z*(y), y)` against a hindsight oracle `z*(y)`.
pub struct Regret<C, O> {
    pub cost: C,
    pub hindsight: O,
}

impl<C, O> CostFn for Regret<C, O>
where
    C: CostFn,
    O: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn eval(&self, z: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
        let (c, g) = self.cost.eval(z, y);
        let (c_star, _) = self.cost.eval(&(self.hindsight)(y), y);
        (c - c_star, g)
    }

    fn eval_smoothed(&self, z: &[f64], y: &[f64], mu: f64) -> (f64, Vec<f64>) {
        let (c, g) = self.cost.eval_smoothed(z, y, mu);
        let (c_star, _) = self.cost.eval_smoothed(&(self.hindsight)(y), y, mu);
        (c - c_star, g)
    }
}

/// `(u)_+` and its derivative, or the softplus `μ·ln(1 + e^{u/μ})` when
/// `mu > 0`.
pub fn smooth_plus(u: f64, mu: f64) -> (f64, f64) {
    if mu <= 0.0 {
        return if u > 0.0 { (u, 1.0) } else { (0.0, 0.0) };
    }
    let r = u / mu;
    if r > 0.0 {
        let e = (-r).exp();
        (u + mu * e.ln_1p(), 1.0 / (1.0 + e))
    } else {
        let e = r.exp();
        (mu * e.ln_1p(), e / (1.0 + e))
    }
}

/// Which risk-averse SAA problem to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SaaKind {
    /// Risk of the pooled cost sample.
    ExAnte { risk: RiskSpec },
    /// Mean over samples of the OCE integrand with auxiliary `t(x)`.
    ExpectedOce { utility: UtilitySpec },
    /// Entropic risk of the pooled cost sample.
    Entropic { gamma: f64 },
    /// Expected conditional mean-upper-semideviation in inf-sup form.
    ExpectedMeanSemidev { eta: f64 },
}

impl SaaKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            SaaKind::ExAnte { risk } => {
                risk.validate()?;
                match risk {
                    RiskSpec::Mean
                    | RiskSpec::Cvar { .. }
                    | RiskSpec::Entropic { .. }
                    | RiskSpec::SpectralDiscrete { .. }
                    | RiskSpec::QuantileDeviation { .. } => Ok(()),
                    other => Err(Error::RiskNotExAnteSolvable(format!("{other:?}"))),
                }
            }
            SaaKind::ExpectedOce { utility } => utility.validate(),
            SaaKind::Entropic { gamma } => RiskSpec::Entropic { gamma: *gamma }.validate(),
            SaaKind::ExpectedMeanSemidev { eta } => RiskSpec::MeanUpperSemidev { eta: *eta }.validate(),
        }
    }

    fn needs_aux(&self) -> bool {
        matches!(self, SaaKind::ExpectedOce { .. } | SaaKind::ExpectedMeanSemidev { .. })
    }

    /// Number of scalar variables appended after the policy coefficients.
    pub fn n_extra(&self) -> usize {
        match self {
            SaaKind::ExAnte { risk: RiskSpec::Cvar { .. } | RiskSpec::QuantileDeviation { .. } } => 1,
            SaaKind::ExAnte { risk: RiskSpec::SpectralDiscrete { atoms } } => atoms.len(),
            _ => 0,
        }
    }
}

#[derive(Clone)]
enum Reg {
    Identity,
    Matrix(DMatrix<f64>),
}

/// Linear map from coefficients to per-sample outputs `[z(x_i), t(x_i)]`.
#[derive(Clone)]
struct Design {
    feats: DMatrix<f64>,
    reg: Reg,
    p: usize,
    m: usize,
    dz: usize,
    bias: bool,
}

impl Design {
    fn build(template: &PolicySpec, data: &EmpiricalSample) -> Result<Design> {
        template.validate()?;
        let basis = template.basis();
        check_dim(basis.dx(), data.dx())?;
        let p = basis.len();
        let n = data.len();
        let mut feats = DMatrix::zeros(n, p);
        for (i, x) in data.covariates().iter().enumerate() {
            for (j, v) in basis.features(x)?.into_iter().enumerate() {
                feats[(i, j)] = v;
            }
        }
        let dz = template.dz();
        let m = dz + usize::from(template.has_aux());
        let (reg, bias) = match template {
            PolicySpec::Rkhs { kernel, centers, bias_z, bias_s, alpha_s, .. } => {
                let consistent = match bias_z {
                    Some(_) => bias_s.is_some() == alpha_s.is_some(),
                    None => bias_s.is_none(),
                };
                if !consistent {
                    return Err(Error::InvalidParameter(
                        "rkhs biases must cover every output column or none".into(),
                    ));
                }
                (Reg::Matrix(gram(kernel, centers)?.entries), bias_z.is_some())
            }
            _ => (Reg::Identity, false),
        };
        Ok(Design { feats, reg, p, m, dz, bias })
    }

    fn n_coef(&self) -> usize {
        self.m * self.p + if self.bias { self.m } else { 0 }
    }

    fn coef(&self, theta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.p, self.m, &theta[..self.p * self.m])
    }

    fn outputs(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut out = &self.feats * self.coef(theta);
        if self.bias {
            let b = &theta[self.p * self.m..self.n_coef()];
            for j in 0..self.m {
                out.column_mut(j).add_scalar_mut(b[j]);
            }
        }
        out
    }

    fn backprop(&self, d_out: &DMatrix<f64>, grad: &mut [f64]) {
        let gc = self.feats.tr_mul(d_out);
        grad[..self.p * self.m].copy_from_slice(gc.as_slice());
        if self.bias {
            for j in 0..self.m {
                grad[self.p * self.m + j] = d_out.column(j).sum();
            }
        }
    }

    /// `λ_z·‖decision coefficients‖² + λ_t·‖auxiliary coefficients‖²` in the
    /// design's norm.
    fn regularizer(&self, theta: &[f64], lambda: f64, lambda_aux: f64, grad: &mut [f64]) -> f64 {
        if lambda == 0.0 && lambda_aux == 0.0 {
            return 0.0;
        }
        let c = self.coef(theta);
        let rc = match &self.reg {
            Reg::Identity => c.clone(),
            Reg::Matrix(k) => k * &c,
        };
        let mut value = 0.0;
        for j in 0..self.m {
            let w = if j < self.dz { lambda } else { lambda_aux };
            for i in 0..self.p {
                grad[j * self.p + i] += 2.0 * w * rc[(i, j)];
                value += w * c[(i, j)] * rc[(i, j)];
            }
        }
        value
    }

    /// Reparametrize kernel coefficients by `α = L^{-T}β` with `K = LLᵀ`,
    /// so the regularizer becomes `‖β‖²`. Returns the factor `Lᵀ`.
    fn whiten(&mut self) -> Result<Option<DMatrix<f64>>> {
        let Reg::Matrix(k) = &self.reg else {
            return Ok(None);
        };
        let (chol, _) = cholesky_with_jitter(k)?;
        let l = chol.l();
        let ft = l
            .solve_lower_triangular(&self.feats.transpose())
            .ok_or(Error::NotPositiveDefinite(0.0))?;
        self.feats = ft.transpose();
        self.reg = Reg::Identity;
        Ok(Some(l.transpose()))
    }
}

/// A fully specified regularized SAA problem.
pub struct SaaProblem<'a> {
    pub kind: SaaKind,
    cost: &'a dyn CostFn,
    data: &'a EmpiricalSample,
    template: &'a PolicySpec,
    lambda: f64,
    lambda_aux: f64,
    mean_weight: f64,
    penalty: Option<(FeasibleSet, f64)>,
}

impl<'a> SaaProblem<'a> {
    pub fn new(
        kind: SaaKind,
        cost: &'a dyn CostFn,
        data: &'a EmpiricalSample,
        template: &'a PolicySpec,
        lambda: f64,
    ) -> Result<Self> {
        kind.validate()?;
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
        }
        if kind.needs_aux() && !template.has_aux() {
            return Err(Error::AuxiliaryRequired);
        }
        Ok(Self { kind, cost, data, template, lambda, lambda_aux: lambda, mean_weight: 0.0, penalty: None })
    }

    /// Regularization weight of the auxiliary output; defaults to `lambda`.
    pub fn with_aux_lambda(mut self, lambda_aux: f64) -> Result<Self> {
        if !(lambda_aux >= 0.0) || !lambda_aux.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda_aux}")));
        }
        self.lambda_aux = lambda_aux;
        Ok(self)
    }

    /// Adds `weight · (1/N) Σ c_i` to the objective.
    pub fn with_mean_term(mut self, weight: f64) -> Self {
        self.mean_weight = weight;
        self
    }

    /// Adds `mu · Σ_i dist(z(x_i), set)²` to the objective.
    pub fn with_penalty(mut self, set: FeasibleSet, mu: f64) -> Result<Self> {
        set.validate()?;
        if !(mu >= 0.0) {
            return Err(Error::InvalidParameter(format!("penalty must be >= 0, got {mu}")));
        }
        self.penalty = Some((set, mu));
        Ok(self)
    }

    pub fn n_policy_params(&self) -> usize {
        self.template.n_params()
    }

    pub fn dim(&self) -> usize {
        self.n_policy_params() + self.kind.n_extra()
    }

    /// The exact (unsmoothed) objective.
    pub fn objective(&self) -> Result<Objective<'a>> {
        self.objective_smoothed(0.0)
    }

    /// Objective with every `(·)_+` kink replaced by a softplus of width `mu`.
    pub fn objective_smoothed(&self, mu: f64) -> Result<Objective<'a>> {
        let design = Design::build(self.template, self.data)?;
        Ok(self.objective_from(design, mu))
    }

    fn objective_from(&self, design: Design, mu: f64) -> Objective<'a> {
        let eval = Evaluator {
            kind: self.kind.clone(),
            cost: self.cost,
            outcomes: self.data.outcomes(),
            groups: covariate_groups(self.data.covariates()),
            lambda: self.lambda,
            lambda_aux: self.lambda_aux,
            mean_weight: self.mean_weight,
            penalty: self.penalty.clone(),
            mu,
            design,
        };
        let dim = eval.design.n_coef() + self.kind.n_extra();
        let smooth = mu > 0.0 || matches!(self.kind, SaaKind::Entropic { .. });
        Objective::new(dim, smooth, move |theta: &[f64]| eval.eval(theta))
    }

    /// Realized costs `c(z(x_i), y_i)` under a policy.
    pub fn costs(&self, policy: &PolicySpec) -> Result<Vec<f64>> {
        self.data
            .covariates()
            .iter()
            .zip(self.data.outcomes())
            .map(|(x, y)| Ok(self.cost.eval(&policy.evaluate(x)?.0, y).0))
            .collect()
    }

    /// Train by L-BFGS on a sequence of smoothed problems, warm-started, in
    /// a whitened coordinate system for kernel policies.
    pub fn fit(&self, opts: &FitOptions) -> Result<Fit> {
        let mut design = Design::build(self.template, self.data)?;
        let exact = self.objective_from(Design::build(self.template, self.data)?, 0.0);
        let n_coef = design.n_coef();
        let theta = match &opts.init {
            Some(v) => {
                check_dim(self.dim(), v.len())?;
                v.clone()
            }
            None => self.default_init()?,
        };
        let lt = if opts.whiten { design.whiten()? } else { None };
        let to_white = |th: &[f64]| -> Vec<f64> {
            let mut out = th.to_vec();
            if let Some(lt) = &lt {
                let c = DMatrix::from_column_slice(design.p, design.m, &th[..design.p * design.m]);
                out[..design.p * design.m].copy_from_slice((lt * c).as_slice());
            }
            out
        };
        let from_white = |th: &[f64]| -> Result<Vec<f64>> {
            let mut out = th.to_vec();
            if let Some(lt) = &lt {
                let c = DMatrix::from_column_slice(design.p, design.m, &th[..design.p * design.m]);
                let a = lt.solve_upper_triangular(&c).ok_or(Error::NotPositiveDefinite(0.0))?;
                out[..design.p * design.m].copy_from_slice(a.as_slice());
            }
            Ok(out)
        };
        let scale = self.cost_scale(&theta)?;
        let mut white = to_white(&theta);
        let mut best = (exact.value(&theta)?, theta.clone());
        let mut last = None;
        let mut total_iters = 0;
        let mut stages: Vec<f64> = opts.smoothing.iter().map(|r| r * scale).collect();
        stages.push(0.0);
        for mu in stages {
            let obj = self.objective_from(design.clone(), mu);
            let r = minimize(&obj, &white, &opts.solver)?;
            total_iters += r.iterations;
            white = r.params.clone();
            let cand = from_white(&white)?;
            let v = exact.value(&cand)?;
            if v < best.0 {
                best = (v, cand);
            }
            last = Some(r);
        }
        let (value, theta) = best;
        let n_pol = self.n_policy_params();
        debug_assert_eq!(n_pol, n_coef);
        Ok(Fit {
            policy: self.template.unflatten(&theta[..n_pol])?,
            extra: theta[n_pol..].to_vec(),
            params: theta,
            value,
            iterations: total_iters,
            last: last.expect("at least one stage"),
        })
    }

    /// Zero policy coefficients, with constant auxiliary terms and appended
    /// scalars started at the mean cost of the zero policy.
    pub fn default_init(&self) -> Result<Vec<f64>> {
        let mut theta = vec![0.0; self.dim()];
        let zero = self.template.unflatten(&vec![0.0; self.n_policy_params()])?;
        let costs = self.costs(&zero)?;
        let c0 = costs.iter().sum::<f64>() / costs.len() as f64;
        for v in &mut theta[self.n_policy_params()..] {
            *v = c0;
        }
        if self.template.has_aux() {
            let p = self.template.basis().len();
            let dz = self.template.dz();
            match self.template {
                PolicySpec::Ldr { .. } | PolicySpec::Qdr { .. } => theta[dz * p] = c0,
                PolicySpec::Rkhs { bias_s: Some(_), .. } => theta[self.n_policy_params() - 1] = c0,
                PolicySpec::Rkhs { .. } => {}
            }
        }
        Ok(theta)
    }

    fn cost_scale(&self, theta: &[f64]) -> Result<f64> {
        let pol = self.template.unflatten(&theta[..self.n_policy_params()])?;
        let c = self.costs(&pol)?;
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        let mad = c.iter().map(|v| (v - mean).abs()).sum::<f64>() / c.len() as f64;
        Ok(if mad > 0.0 { mad } else { 1.0_f64.max(mean.abs()) })
    }
}

/// Options for [`SaaProblem::fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub solver: SolveConfig,
    /// Smoothing widths relative to the mean absolute deviation of the
    /// initial costs; a final exact stage always follows.
    pub smoothing: Vec<f64>,
    pub whiten: bool,
    pub init: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            solver: SolveConfig {
                schedule: StepSchedule::Lbfgs,
                max_iters: 2000,
                stall_tol: 1e-12,
                ..SolveConfig::default()
            },
            smoothing: vec![1e-1, 1e-2, 1e-3, 1e-4],
            whiten: true,
            init: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub policy: PolicySpec,
    /// Appended scalar variables (e.g. the ex-ante CVaR level `t`).
    pub extra: Vec<f64>,
    pub params: Vec<f64>,
    /// Exact objective value at `params`.
    pub value: f64,
    pub iterations: usize,
    pub last: SolveResult,
}

fn covariate_groups(xs: &[Vec<f64>]) -> Vec<usize> {
    let mut ids: HashMap<Vec<u64>, usize> = HashMap::new();
    xs.iter()
        .map(|x| {
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            let next = ids.len();
            *ids.entry(key).or_insert(next)
        })
        .collect()
}

struct Evaluator<'a> {
    kind: SaaKind,
    cost: &'a dyn CostFn,
    outcomes: &'a [Vec<f64>],
    groups: Vec<usize>,
    lambda: f64,
    lambda_aux: f64,
    mean_weight: f64,
    penalty: Option<(FeasibleSet, f64)>,
    mu: f64,
    design: Design,
}

impl Evaluator<'_> {
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let d = &self.design;
        let n = self.outcomes.len();
        let nf = n as f64;
        let n_coef = d.n_coef();
        let extra = &theta[n_coef..];
        let out = d.outputs(theta);
        let mut costs = Vec::with_capacity(n);
        let mut cgrads = Vec::with_capacity(n);
        let mut z = vec![0.0; d.dz];
        for i in 0..n {
            for t in 0..d.dz {
                z[t] = out[(i, t)];
            }
            let (c, g) = if self.mu > 0.0 {
                self.cost.eval_smoothed(&z, &self.outcomes[i], self.mu)
            } else {
                self.cost.eval(&z, &self.outcomes[i])
            };
            costs.push(c);
            cgrads.push(g);
        }
        // dV/dc_i, dV/dt(x_i), dV/d(extra)
        let mut wc = vec![0.0; n];
        let mut wt = vec![0.0; n];
        let mut gextra = vec![0.0; extra.len()];
        let mu = self.mu;
        let mut value = match &self.kind {
            SaaKind::ExAnte { risk } => match risk {
                RiskSpec::Mean => {
                    wc.iter_mut().for_each(|w| *w = 1.0 / nf);
                    costs.iter().sum::<f64>() / nf
                }
                RiskSpec::Cvar { beta } => {
                    cvar_terms(&costs, extra[0], *beta, 1.0, mu, &mut wc, &mut gextra[0])
                }
                RiskSpec::Entropic { gamma } => entropic_terms(&costs, *gamma, &mut wc),
                RiskSpec::QuantileDeviation { eps1, eps2 } => {
                    let t = extra[0];
                    let mut v = 0.0;
                    for i in 0..n {
                        let (sp, ds) = smooth_plus(costs[i] - t, mu);
                        v += eps1 * (t - costs[i]) + (eps1 + eps2) * sp;
                        wc[i] = (-eps1 + (eps1 + eps2) * ds) / nf;
                        gextra[0] += (eps1 - (eps1 + eps2) * ds) / nf;
                    }
                    v / nf
                }
                RiskSpec::SpectralDiscrete { atoms } => {
                    let mut v = 0.0;
                    for (j, (w, beta)) in atoms.iter().enumerate() {
                        v += cvar_terms(&costs, extra[j], *beta, *w, mu, &mut wc, &mut gextra[j]);
                    }
                    v
                }
                _ => unreachable!("validated at construction"),
            },
            SaaKind::Entropic { gamma } => {
                let v = risk::log_sum_exp_weighted(&costs, &vec![1.0 / nf; n], *gamma) / gamma;
                let m = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = costs.iter().map(|c| (gamma * (c - m)).exp()).collect();
                let s: f64 = e.iter().sum();
                for i in 0..n {
                    wc[i] = e[i] / s;
                }
                v
            }
            SaaKind::ExpectedOce { utility } => {
                let mut v = 0.0;
                for i in 0..n {
                    let t = out[(i, d.dz)];
                    let (vi, dc) = match utility {
                        UtilitySpec::PiecewiseLinearCvar { beta } => {
                            let (sp, ds) = smooth_plus(costs[i] - t, mu);
                            (t + sp / (1.0 - beta), ds / (1.0 - beta))
                        }
                        UtilitySpec::Exponential { gamma } => {
                            let e = (gamma * (costs[i] - t)).exp();
                            (t + (e - 1.0) / gamma, e)
                        }
                        UtilitySpec::CustomPwl { .. } => {
                            (t - utility.value(t - costs[i]), utility.slope(t - costs[i]))
                        }
                    };
                    v += vi;
                    wc[i] = dc / nf;
                    wt[i] = (1.0 - dc) / nf;
                }
                v / nf
            }
            SaaKind::ExpectedMeanSemidev { eta } => {
                let n_groups = self.groups.iter().copied().max().map_or(0, |g| g + 1);
                let mut gap = vec![0.0; n_groups];
                let mut v = 0.0;
                for i in 0..n {
                    let t = out[(i, d.dz)];
                    let (sp, ds) = smooth_plus(costs[i] - t, mu);
                    v += costs[i] + eta * sp;
                    wc[i] = (1.0 + eta * ds) / nf;
                    wt[i] = -eta * ds / nf;
                    gap[self.groups[i]] += t - costs[i];
                }
                // inner sup over s(x) ∈ [0,1], one value per distinct covariate
                let s: Vec<(f64, f64)> = gap.iter().map(|g| smooth_plus(*g, mu)).collect();
                for i in 0..n {
                    let ds = s[self.groups[i]].1;
                    wc[i] -= eta * ds / nf;
                    wt[i] += eta * ds / nf;
                }
                (v + eta * s.iter().map(|p| p.0).sum::<f64>()) / nf
            }
        };
        if self.mean_weight != 0.0 {
            value += self.mean_weight * costs.iter().sum::<f64>() / nf;
            wc.iter_mut().for_each(|w| *w += self.mean_weight / nf);
        }
        let mut d_out = DMatrix::zeros(n, d.m);
        for i in 0..n {
            for t in 0..d.dz {
                d_out[(i, t)] = wc[i] * cgrads[i][t];
            }
            if d.m > d.dz {
                d_out[(i, d.dz)] = wt[i];
            }
        }
        if let Some((set, weight)) = &self.penalty {
            for i in 0..n {
                for t in 0..d.dz {
                    z[t] = out[(i, t)];
                }
                let proj = set.project(&z);
                for t in 0..d.dz {
                    let r = z[t] - proj[t];
                    value += weight * r * r;
                    d_out[(i, t)] += 2.0 * weight * r;
                }
            }
        }
        let mut grad = vec![0.0; theta.len()];
        d.backprop(&d_out, &mut grad);
        value += d.regularizer(theta, self.lambda, self.lambda_aux, &mut grad);
        grad[n_coef..].copy_from_slice(&gextra);
        (value, grad)
    }
}

/// `w·(t + 1/((1−β)N) Σ (c_i − t)_+)`, accumulating cost weights and `dV/dt`.
fn cvar_terms(
    costs: &[f64],
    t: f64,
    beta: f64,
    w: f64,
    mu: f64,
    wc: &mut [f64],
    gt: &mut f64,
) -> f64 {
    let nf = costs.len() as f64;
    let k = w / ((1.0 - beta) * nf);
    let mut v = 0.0;
    *gt += w;
    for (i, c) in costs.iter().enumerate() {
        let (sp, ds) = smooth_plus(c - t, mu);
        v += t + sp / (1.0 - beta);
        wc[i] += k * ds;
        *gt -= k * ds;
    }
    w * (v / nf)
}

fn entropic_terms(costs: &[f64], gamma: f64, wc: &mut [f64]) -> f64 {
    let sample = risk::LossSample::uniform(costs.to_vec()).expect("costs are finite and nonempty");
    let v = risk::entropic(&sample, gamma).expect("gamma validated");
    for (w, c) in wc.iter_mut().zip(costs) {
        *w = (gamma * (c - v)).exp() / costs.len() as f64;
    }
    v
}

/// `evaluate(risk, {c(g(x_i), y_i)}) + λ·regularizer`, with CVaR, quantile
/// deviation and spectral risks in variational form over appended scalars.
pub fn exante_objective<'a>(
    risk: &RiskSpec,
    cost: &'a dyn CostFn,
    data: &'a EmpiricalSample,
    template: &'a PolicySpec,
    lambda: f64,
) -> Result<Objective<'a>> {
    SaaProblem::new(SaaKind::ExAnte { risk: risk.clone() }, cost, data, template, lambda)?.objective()
}

/// `(1/N) Σ_i [t(x_i) − u(t(x_i) − c_i)] + λ·regularizer`; the template must
/// carry an auxiliary output.
pub fn expected_oce_objective<'a>(
    utility: &UtilitySpec,
    cost: &'a dyn CostFn,
    data: &'a EmpiricalSample,
    template: &'a PolicySpec,
    lambda: f64,
) -> Result<Objective<'a>> {
    SaaProblem::new(SaaKind::ExpectedOce { utility: utility.clone() }, cost, data, template, lambda)?
        .objective()
}

/// `(1/γ)·ln((1/N) Σ e^{γ c_i}) + λ·regularizer`.
pub fn entropic_objective<'a>(
    gamma: f64,
    cost: &'a dyn CostFn,
    data: &'a EmpiricalSample,
    template: &'a PolicySpec,
    lambda: f64,
) -> Result<Objective<'a>> {
    SaaProblem::new(SaaKind::Entropic { gamma }, cost, data, template, lambda)?.objective()
}

/// Expected mean-upper-semideviation in inf-sup form with the inner sup
/// over `s(x) ∈ [0,1]` taken in closed form per distinct covariate.
pub fn expected_mean_semidev_objective<'a>(
    eta: f64,
    cost: &'a dyn CostFn,
    data: &'a EmpiricalSample,
    template: &'a PolicySpec,
    lambda: f64,
) -> Result<Objective<'a>> {
    SaaProblem::new(SaaKind::ExpectedMeanSemidev { eta }, cost, data, template, lambda)?.objective()
}

/// Policy template with every coefficient zero.
pub fn zero_template(basis: &Basis, dz: usize, aux: bool, bias: bool) -> PolicySpec {
    let p = basis.len();
    match basis {
        Basis::Affine { dx } => PolicySpec::Ldr {
            dx: *dx,
            coef_z: vec![vec![0.0; p]; dz],
            coef_s: aux.then(|| vec![0.0; p]),
        },
        Basis::Quadratic { dx } => PolicySpec::Qdr {
            dx: *dx,
            coef_z: vec![vec![0.0; p]; dz],
            coef_s: aux.then(|| vec![0.0; p]),
        },
        Basis::Kernel { kernel, centers } => PolicySpec::Rkhs {
            kernel: *kernel,
            centers: centers.clone(),
            alpha_z: vec![vec![0.0; dz]; p],
            alpha_s: aux.then(|| vec![0.0; p]),
            bias_z: bias.then(|| vec![0.0; dz]),
            bias_s: (bias && aux).then_some(0.0),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nv() -> FnCost<impl Fn(&[f64], &[f64]) -> (f64, Vec<f64>) + Send + Sync> {
        FnCost(|z: &[f64], y: &[f64]| {
            let d = z[0] - y[0];
            if d > 0.0 {
                (0.2 * d, vec![0.2])
            } else if d < 0.0 {
                (-d, vec![-1.0])
            } else {
                (0.0, vec![0.0])
            }
        })
    }

    fn sq() -> FnCost<impl Fn(&[f64], &[f64]) -> (f64, Vec<f64>) + Send + Sync> {
        FnCost(|z: &[f64], y: &[f64]| ((z[0] - y[0]).powi(2), vec![2.0 * (z[0] - y[0])]))
    }

    fn constant_cost(k: f64) -> FnCost<impl Fn(&[f64], &[f64]) -> (f64, Vec<f64>) + Send + Sync> {
        FnCost(move |z: &[f64], _y: &[f64]| (k, vec![0.0; z.len()]))
    }

    fn random_data(seed: u64, n: usize) -> EmpiricalSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(0.0..2.0)]).collect();
        let ys = xs.iter().map(|x| vec![3.0 * x[0] + rng.gen_range(-1.0..1.0)]).collect();
        EmpiricalSample::new(xs, ys).unwrap()
    }

    #[test]
    fn mean_single_pair() {
        let data = EmpiricalSample::new(vec![vec![2.0]], vec![vec![7.0]]).unwrap();
        let tpl = PolicySpec::ldr(1.0, vec![2.0]);
        let cost = nv();
        let obj = exante_objective(&RiskSpec::Mean, &cost, &data, &tpl, 0.0).unwrap();
        assert_eq!(obj.value(&[1.0, 2.0]).unwrap(), 2.0);
    }

    #[test]
    fn cvar_constant_cost() {
        let data = random_data(1, 10);
        let tpl = PolicySpec::ldr(0.0, vec![0.0]);
        let cost = constant_cost(4.0);
        let prob = SaaProblem::new(
            SaaKind::ExAnte { risk: RiskSpec::Cvar { beta: 0.9 } },
            &cost,
            &data,
            &tpl,
            0.0,
        )
        .unwrap();
        let fit = prob.fit(&FitOptions::default()).unwrap();
        assert!((fit.value - 4.0).abs() < 1e-8, "{}", fit.value);
        let obj = prob.objective().unwrap();
        assert!((obj.value(&[0.0, 0.0, 4.0]).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn entropic_delegation() {
        let data = EmpiricalSample::new(vec![vec![0.0], vec![0.0]], vec![vec![0.0], vec![1.0]]).unwrap();
        let tpl = PolicySpec::ldr(0.0, vec![0.0]);
        let target = 2.0_f64.ln() / 0.5;
        let cost = FnCost(move |z: &[f64], y: &[f64]| (y[0] * target + 0.0 * z[0], vec![0.0]));
        let obj = entropic_objective(0.5, &cost, &data, &tpl, 0.0).unwrap();
        let sample = risk::LossSample::uniform(vec![0.0, target]).unwrap();
        let expect = risk::entropic(&sample, 0.5).unwrap();
        assert!((obj.value(&[0.0, 0.0]).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn delegation_identity_random() {
        let data = random_data(2, 30);
        let tpl = PolicySpec::ldr(0.0, vec![0.0]);
        let cost = nv();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lambda = 0.05;
        for risk in [
            RiskSpec::Mean,
            RiskSpec::Cvar { beta: 0.8 },
            RiskSpec::Entropic { gamma: 0.7 },
            RiskSpec::QuantileDeviation { eps1: 1.0, eps2: 3.0 },
            RiskSpec::SpectralDiscrete { atoms: vec![(0.3, 0.0), (0.7, 0.9)] },
        ] {
            let prob =
                SaaProblem::new(SaaKind::ExAnte { risk: risk.clone() }, &cost, &data, &tpl, lambda).unwrap();
            let obj = prob.objective().unwrap();
            for _ in 0..5 {
                let th = [rng.gen_range(-1.0..2.0), rng.gen_range(0.0..4.0)];
                let pol = tpl.unflatten(&th).unwrap();
                let costs = risk::LossSample::uniform(prob.costs(&pol).unwrap()).unwrap();
                let reg = lambda * (th[0] * th[0] + th[1] * th[1]);
                let expect = risk::evaluate(&risk, &costs).unwrap() + reg;
                let mut params = th.to_vec();
                match &risk {
                    RiskSpec::Cvar { beta } => params.push(risk::value_at_risk(&costs, *beta).unwrap()),
                    RiskSpec::QuantileDeviation { eps1, eps2 } => params
                        .push(risk::value_at_risk(&costs, eps2 / (eps1 + eps2)).unwrap()),
                    RiskSpec::SpectralDiscrete { atoms } => {
                        for (_, b) in atoms {
                            params.push(risk::value_at_risk(&costs, *b).unwrap());
                        }
                    }
                    _ => {}
                }
                let got = obj.value(&params).unwrap();
                assert!((got - expect).abs() < 1e-10, "{risk:?}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn rejects_semidev_exante_and_missing_aux() {
        let data = random_data(3, 5);
        let tpl = PolicySpec::ldr(0.0, vec![0.0]);
        let cost = nv();
        let err = exante_objective(&RiskSpec::MeanUpperSemidev { eta: 0.5 }, &cost, &data, &tpl, 0.0)
            .unwrap_err();
        assert!(err.to_string().starts_with("risk-not-ex-ante-solvable"));
        let err = expected_oce_objective(
            &UtilitySpec::PiecewiseLinearCvar { beta: 0.9 },
            &cost,
            &data,
            &tpl,
            0.0,
        )
        .unwrap_err();
        assert_eq!(err, Error::AuxiliaryRequired);
    }

    fn ldr_aux() -> PolicySpec {
        zero_template(&Basis::Affine { dx: 1 }, 1, true, false)
    }

    #[test]
    fn expected_cvar_constant_cost() {
        let data = random_data(4, 8);
        let cost = constant_cost(3.0);
        let tpl = ldr_aux();
        let obj = expected_oce_objective(
            &UtilitySpec::PiecewiseLinearCvar { beta: 0.9 },
            &cost,
            &data,
            &tpl,
            0.0,
        )
        .unwrap();
        assert!((obj.value(&[0.0, 0.0, 3.0, 0.0]).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn expected_entropic_single_sample() {
        let data = EmpiricalSample::new(vec![vec![1.0]], vec![vec![5.0]]).unwrap();
        let cost = nv();
        let tpl = ldr_aux();
        let gamma = 0.8;
        let obj =
            expected_oce_objective(&UtilitySpec::Exponential { gamma }, &cost, &data, &tpl, 0.0).unwrap();
        // z = 2 gives cost 3, whose entropic value is 3 itself
        let v = obj.value(&[2.0, 0.0, 3.0, 0.0]).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn expected_oce_zero_params_with_regularizer() {
        let data = random_data(6, 7);
        let cost = nv();
        let tpl = ldr_aux();
        let beta = 0.5;
        let obj = expected_oce_objective(
            &UtilitySpec::PiecewiseLinearCvar { beta },
            &cost,
            &data,
            &tpl,
            3.0,
        )
        .unwrap();
        let u = UtilitySpec::PiecewiseLinearCvar { beta };
        let expect: f64 = data
            .outcomes()
            .iter()
            .map(|y| -u.value(-cost.eval(&[0.0], y).0))
            .sum::<f64>()
            / 7.0;
        assert!((obj.value(&[0.0; 4]).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn frozen_aux_matches_exante_cvar() {
        let data = random_data(7, 25);
        let cost = nv();
        let beta = 0.9;
        let tpl_aux = ldr_aux();
        let tpl = PolicySpec::ldr(0.0, vec![0.0]);
        let exp =
            expected_oce_objective(&UtilitySpec::PiecewiseLinearCvar { beta }, &cost, &data, &tpl_aux, 0.0)
                .unwrap();
        let ea = exante_objective(&RiskSpec::Cvar { beta }, &cost, &data, &tpl, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let (a, b, t) = (rng.gen_range(-2.0..2.0), rng.gen_range(0.0..4.0), rng.gen_range(0.0..5.0));
            assert_eq!(exp.value(&[a, b, t, 0.0]).unwrap(), ea.value(&[a, b, t]).unwrap());
        }
    }

    #[test]
    fn monotone_in_lambda() {
        let data = random_data(9, 12);
        let cost = nv();
        let tpl = PolicySpec::ldr(0.0, vec![0.0]);
        let th = [0.4, 2.5];
        let mut prev = f64::NEG_INFINITY;
        for lambda in [0.0, 0.01, 0.1, 1.0, 10.0] {
            let v = entropic_objective(0.5, &cost, &data, &tpl, lambda).unwrap().value(&th).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn semidev_reductions() {
        let data = random_data(10, 9);
        let cost = nv();
        let tpl = ldr_aux();
        let th = [0.5, 2.0, 1.0, 0.3];
        let sd = expected_mean_semidev_objective(0.0, &cost, &data, &tpl, 0.0).unwrap();
        let plain = PolicySpec::ldr(0.0, vec![0.0]);
        let mean = exante_objective(&RiskSpec::Mean, &cost, &data, &plain, 0.0).unwrap();
        assert!((sd.value(&th).unwrap() - mean.value(&th[..2]).unwrap()).abs() < 1e-12);
        let k = constant_cost(2.5);
        let sd = expected_mean_semidev_objective(0.7, &k, &data, &tpl, 0.0).unwrap();
        assert!((sd.value(&[0.0, 0.0, 2.5, 0.0]).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn semidev_single_context_is_exact() {
        let data = EmpiricalSample::new(vec![vec![1.0]; 2], vec![vec![0.0], vec![2.0]]).unwrap();
        let cost = FnCost(|z: &[f64], y: &[f64]| (y[0] + 0.0 * z[0], vec![0.0]));
        let tpl = ldr_aux();
        let eta = 1.0;
        let prob =
            SaaProblem::new(SaaKind::ExpectedMeanSemidev { eta }, &cost, &data, &tpl, 0.0).unwrap();
        let fit = prob.fit(&FitOptions::default()).unwrap();
        let direct =
            risk::mean_upper_semidev(&risk::LossSample::uniform(vec![0.0, 2.0]).unwrap(), eta).unwrap();
        assert!((fit.value - direct).abs() < 1e-8, "{} vs {direct}", fit.value);
    }

    fn fd_check(obj: &Objective<'_>, th: &[f64]) {
        let (_, g) = obj.eval(th).unwrap();
        let h = 1e-6;
        for k in 0..th.len() {
            let mut a = th.to_vec();
            let mut b = th.to_vec();
            a[k] += h;
            b[k] -= h;
            let fd = (obj.value(&a).unwrap() - obj.value(&b).unwrap()) / (2.0 * h);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-3);
            assert!(rel < 1e-4, "coord {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let data = random_data(11, 15);
        let cost = sq();
        let ker = Basis::Kernel {
            kernel: KernelSpec::Gaussian { lengthscale: 0.7 },
            centers: data.covariates()[..6].to_vec(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let kinds = [
            SaaKind::Entropic { gamma: 0.3 },
            SaaKind::ExAnte { risk: RiskSpec::Entropic { gamma: 0.3 } },
            SaaKind::ExpectedOce { utility: UtilitySpec::Exponential { gamma: 0.4 } },
            SaaKind::ExAnte { risk: RiskSpec::Mean },
        ];
        for kind in kinds {
            for tpl in [
                zero_template(&Basis::Affine { dx: 1 }, 1, true, false),
                zero_template(&Basis::Quadratic { dx: 1 }, 1, true, false),
                zero_template(&ker, 1, true, true),
            ] {
                let prob = SaaProblem::new(kind.clone(), &cost, &data, &tpl, 0.1)
                    .unwrap()
                    .with_penalty(FeasibleSet::Box { lower: vec![0.0], upper: vec![2.0] }, 5.0)
                    .unwrap();
                let obj = prob.objective().unwrap();
                for _ in 0..20 {
                    let th: Vec<f64> = (0..obj.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    fd_check(&obj, &th);
                }
            }
        }
        // smoothed nonsmooth objectives are differentiable everywhere
        let cost = nv();
        let tpl = zero_template(&Basis::Affine { dx: 1 }, 1, true, false);
        for kind in [
            SaaKind::ExpectedOce { utility: UtilitySpec::PiecewiseLinearCvar { beta: 0.9 } },
            SaaKind::ExAnte { risk: RiskSpec::Cvar { beta: 0.9 } },
            SaaKind::ExpectedMeanSemidev { eta: 0.5 },
        ] {
            let obj = SaaProblem::new(kind, &cost, &data, &tpl, 0.1)
                .unwrap()
                .objective_smoothed(0.5)
                .unwrap();
            for _ in 0..20 {
                let th: Vec<f64> = (0..obj.dim()).map(|_| rng.gen_range(-1.0..3.0)).collect();
                fd_check(&obj, &th);
            }
        }
    }

    #[test]
    fn whitened_fit_matches_plain_fit() {
        let data = random_data(13, 20);
        let cost = sq();
        let ker = Basis::Kernel {
            kernel: KernelSpec::Gaussian { lengthscale: 0.5 },
            centers: data.covariates().to_vec(),
        };
        let tpl = zero_template(&ker, 1, false, true);
        let prob = SaaProblem::new(SaaKind::ExAnte { risk: RiskSpec::Mean }, &cost, &data, &tpl, 0.01)
            .unwrap();
        let a = prob.fit(&FitOptions::default()).unwrap();
        let b = prob.fit(&FitOptions { whiten: false, ..FitOptions::default() }).unwrap();
        assert!((a.value - b.value).abs() < 1e-6 * (1.0 + b.value.abs()), "{} {}", a.value, b.value);
    }

    #[test]
    fn csv_roundtrip() {
        let data = random_data(14, 5);
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x_1,y\n"));
        assert_eq!(EmpiricalSample::read_csv(&buf[..]).unwrap(), data);
    }
}
