//! Declarative experiment runner behind the `ctxrisk` binary: one JSON
//! config per experiment, per-trial CSV rows, aggregate JSON, plot data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Error;
use crate::nested::{
    self, check_contextual_consistency, counterexample_ex_ante_cvar, nested_optimizers, DiscreteJoint,
    ExAnteEvaluator, RiskTable, TabularPolicy,
};
use crate::newsvendor::{
    oracle_cvar, oracle_entropic, oracle_rn, train_policy, DemandModel, DistanceMetric, NvCost, NvObjective,
    NvTrainConfig, PolicyClass,
};
use crate::objectives::fmt_f64;
use crate::policy::PolicySpec;
use crate::portfolio::{evaluate_metrics, gen_portfolio, solve_model, PortfolioGenConfig, PortfolioModel, PortfolioSolveConfig};
use crate::risk::RiskSpec;

/// One experiment, selected by the `experiment` field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment")]
pub enum ExperimentConfig {
    NvLinearPolicies(NvPoliciesConfig),
    NvSaaLinear(NvSaaConfig),
    NvSaaRkhs(NvSaaConfig),
    NestedDemo(NestedDemoConfig),
    Portfolio(PortfolioExperimentConfig),
}

/// Policies from every risk model on one linear-newsvendor dataset, compared
/// with the three conditional-optimum baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NvPoliciesConfig {
    pub seed: u64,
    pub trials: usize,
    pub n: usize,
    pub beta: f64,
    pub gamma: f64,
    pub class: PolicyClass,
    pub grid_points: usize,
    pub oracle_mc: usize,
    pub metric: DistanceMetric,
    pub train: NvTrainConfig,
}

impl Default for NvPoliciesConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: 1,
            n: 5000,
            beta: 0.9,
            gamma: 0.5,
            class: PolicyClass::Ldr,
            grid_points: 200,
            oracle_mc: 20_000,
            metric: DistanceMetric::RelativeL1,
            train: NvTrainConfig::default(),
        }
    }
}

/// SAA convergence study. Unset fields take experiment-specific defaults
/// (see [`NvSaaConfig::resolve`]).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NvSaaConfig {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub sample_sizes: Option<Vec<usize>>,
    pub objectives: Option<Vec<NvObjective>>,
    pub classes: Option<Vec<PolicyClass>>,
    /// Evaluation points per covariate axis.
    pub grid_points: Option<usize>,
    /// Points per axis for the emitted policy curves.
    pub curve_points: Option<usize>,
    pub oracle_mc: Option<usize>,
    pub metric: Option<DistanceMetric>,
    pub train: Option<NvTrainConfig>,
}

/// [`NvSaaConfig`] with every field filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NvSaaResolved {
    pub model: DemandModel,
    pub seed: u64,
    pub trials: usize,
    pub sample_sizes: Vec<usize>,
    pub objectives: Vec<NvObjective>,
    pub classes: Vec<PolicyClass>,
    pub grid_points: usize,
    pub curve_points: usize,
    pub oracle_mc: usize,
    pub metric: DistanceMetric,
    pub train: NvTrainConfig,
}

impl NvSaaConfig {
    /// Linear model: LDR, N ∈ {10, 100, 1000}, expected CVaR and entropic.
    /// Nonlinear model: LDR/QDR/RKHS, N ∈ {25, …, 800}, expected CVaR.
    pub fn resolve(&self, model: DemandModel) -> NvSaaResolved {
        let linear = model == DemandModel::Linear;
        NvSaaResolved {
            model,
            seed: self.seed.unwrap_or(1),
            trials: self.trials.unwrap_or(20),
            sample_sizes: self
                .sample_sizes
                .clone()
                .unwrap_or_else(|| if linear { vec![10, 100, 1000] } else { vec![25, 50, 100, 200, 400, 800] }),
            objectives: self.objectives.clone().unwrap_or_else(|| {
                if linear {
                    vec![NvObjective::ExpectedCvar { beta: 0.9 }, NvObjective::Entropic { gamma: 0.5 }]
                } else {
                    vec![NvObjective::ExpectedCvar { beta: 0.9 }]
                }
            }),
            classes: self.classes.clone().unwrap_or_else(|| {
                if linear {
                    vec![PolicyClass::Ldr]
                } else {
                    vec![PolicyClass::Ldr, PolicyClass::Qdr, PolicyClass::Rkhs]
                }
            }),
            grid_points: self.grid_points.unwrap_or(if linear { 50 } else { 10 }),
            curve_points: self.curve_points.unwrap_or(if linear { 200 } else { 15 }),
            oracle_mc: self.oracle_mc.unwrap_or(20_000),
            metric: self.metric.unwrap_or_default(),
            train: self.train.clone().unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NestedDemoConfig {
    pub seed: u64,
    /// Random policy pairs per consistency check.
    pub consistency_trials: usize,
    /// Random instances for the strictly-monotone outer-risk check.
    pub random_instances: usize,
    pub outer_gamma: f64,
}

impl Default for NestedDemoConfig {
    fn default() -> Self {
        Self { seed: 1, consistency_trials: 200, random_instances: 20, outer_gamma: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortfolioExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub etas: Vec<f64>,
    pub taus: Vec<f64>,
    pub powers: Vec<u32>,
    pub n_train: Vec<usize>,
    pub n_test: usize,
    pub models: Vec<PortfolioModel>,
    /// Solver and kernel settings; `eta` is overridden per grid cell.
    pub solve: PortfolioSolveConfig,
}

impl Default for PortfolioExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: 10,
            etas: vec![1.0 / 3.0],
            taus: vec![1.0],
            powers: vec![1],
            n_train: vec![100],
            n_test: 10_000,
            models: PortfolioModel::ALL.to_vec(),
            solve: PortfolioSolveConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::NvLinearPolicies(_) => "NvLinearPolicies",
            ExperimentConfig::NvSaaLinear(_) => "NvSaaLinear",
            ExperimentConfig::NvSaaRkhs(_) => "NvSaaRkhs",
            ExperimentConfig::NestedDemo(_) => "NestedDemo",
            ExperimentConfig::Portfolio(_) => "Portfolio",
        }
    }

    pub fn from_json(s: &str) -> Result<Self, Vec<String>> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| vec![e.to_string()])?;
        let problems = cfg.validate();
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(problems)
        }
    }

    /// Range checks; each problem is reported as `field.path: message`.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Problems::default();
        match self {
            ExperimentConfig::NvLinearPolicies(c) => {
                v.at_least("trials", c.trials, 1);
                v.at_least("n", c.n, 2);
                v.beta("beta", c.beta);
                v.positive("gamma", c.gamma);
                v.at_least("grid_points", c.grid_points, 1);
                v.at_least("oracle_mc", c.oracle_mc, 1);
                v.train("train", &c.train);
            }
            ExperimentConfig::NvSaaLinear(c) => v.saa(&c.resolve(DemandModel::Linear)),
            ExperimentConfig::NvSaaRkhs(c) => v.saa(&c.resolve(DemandModel::Nonlinear)),
            ExperimentConfig::NestedDemo(c) => {
                v.at_least("consistency_trials", c.consistency_trials, 1);
                v.at_least("random_instances", c.random_instances, 1);
                v.positive("outer_gamma", c.outer_gamma);
            }
            ExperimentConfig::Portfolio(c) => {
                v.at_least("trials", c.trials, 1);
                v.nonempty("etas", c.etas.len());
                for (i, e) in c.etas.iter().enumerate() {
                    if !(*e >= 0.0 && e.is_finite()) {
                        v.push(format!("etas[{i}]"), format!("must be >= 0, got {e}"));
                    }
                }
                v.nonempty("taus", c.taus.len());
                for (i, t) in c.taus.iter().enumerate() {
                    v.positive(&format!("taus[{i}]"), *t);
                }
                v.nonempty("powers", c.powers.len());
                for (i, p) in c.powers.iter().enumerate() {
                    v.at_least(&format!("powers[{i}]"), *p as usize, 1);
                }
                v.nonempty("n_train", c.n_train.len());
                for (i, n) in c.n_train.iter().enumerate() {
                    v.at_least(&format!("n_train[{i}]"), *n, 2);
                }
                v.at_least("n_test", c.n_test, 1);
                v.nonempty("models", c.models.len());
                if let Err(e) = c.solve.validate() {
                    v.push("solve".into(), e.to_string());
                }
            }
        }
        v.0
    }
}

#[derive(Default)]
struct Problems(Vec<String>);

impl Problems {
    fn push(&mut self, path: String, msg: String) {
        self.0.push(format!("{path}: {msg}"));
    }

    fn at_least(&mut self, path: &str, v: usize, min: usize) {
        if v < min {
            self.push(path.into(), format!("must be >= {min}, got {v}"));
        }
    }

    fn nonempty(&mut self, path: &str, len: usize) {
        if len == 0 {
            self.push(path.into(), "must not be empty".into());
        }
    }

    fn positive(&mut self, path: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.push(path.into(), format!("must be > 0, got {v}"));
        }
    }

    fn beta(&mut self, path: &str, v: f64) {
        if !(0.0..1.0).contains(&v) {
            self.push(path.into(), format!("must lie in [0, 1), got {v}"));
        }
    }

    fn train(&mut self, path: &str, t: &NvTrainConfig) {
        if let Err(e) = crate::newsvendor::NvParams::new(t.params.h, t.params.b) {
            self.push(format!("{path}.params"), e.to_string());
        }
        if !(t.lambda0 >= 0.0) {
            self.push(format!("{path}.lambda0"), format!("must be >= 0, got {}", t.lambda0));
        }
        self.positive(&format!("{path}.bandwidth_scale"), t.bandwidth_scale);
        if let Err(e) = t.fit.solver.validate() {
            self.push(format!("{path}.fit.solver"), e.to_string());
        }
    }

    fn objective(&mut self, path: &str, o: &NvObjective) {
        match *o {
            NvObjective::RiskNeutral => {}
            NvObjective::ExAnteCvar { beta } | NvObjective::ExpectedCvar { beta } => self.beta(&format!("{path}.beta"), beta),
            NvObjective::Entropic { gamma } | NvObjective::ExpectedEntropic { gamma } => {
                self.positive(&format!("{path}.gamma"), gamma)
            }
        }
    }

    fn saa(&mut self, c: &NvSaaResolved) {
        self.at_least("trials", c.trials, 1);
        self.nonempty("sample_sizes", c.sample_sizes.len());
        for (i, n) in c.sample_sizes.iter().enumerate() {
            self.at_least(&format!("sample_sizes[{i}]"), *n, 2);
        }
        self.nonempty("objectives", c.objectives.len());
        for (i, o) in c.objectives.iter().enumerate() {
            self.objective(&format!("objectives[{i}]"), o);
        }
        self.nonempty("classes", c.classes.len());
        self.at_least("grid_points", c.grid_points, 1);
        self.at_least("curve_points", c.curve_points, 1);
        self.at_least("oracle_mc", c.oracle_mc, 1);
        self.train("train", &c.train);
    }
}

/// A CSV cell; floats are written with 17 significant digits.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => fmt_f64(*v),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn to_csv(&self) -> Result<String, Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::render))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    fn col(&self, name: &str) -> usize {
        self.header.iter().position(|h| h == name).expect("column exists")
    }
}

/// Mean and five-number summary of one metric within one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub group: BTreeMap<String, String>,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Groups rows by the rendered `group_cols` (in order of first appearance)
/// and summarizes each `metric_cols` column.
pub fn aggregate(table: &Table, group_cols: &[&str], metric_cols: &[&str]) -> Vec<Aggregate> {
    let gi: Vec<usize> = group_cols.iter().map(|c| table.col(c)).collect();
    let mut order: Vec<Vec<String>> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (r, row) in table.rows.iter().enumerate() {
        let key: Vec<String> = gi.iter().map(|&i| row[i].render()).collect();
        match order.iter().position(|k| *k == key) {
            Some(p) => members[p].push(r),
            None => {
                order.push(key);
                members.push(vec![r]);
            }
        }
    }
    let mut out = Vec::new();
    for (key, rows) in order.iter().zip(&members) {
        for m in metric_cols {
            let mi = table.col(m);
            let vals: Vec<f64> = rows
                .iter()
                .map(|&r| match &table.rows[r][mi] {
                    Cell::Float(v) => *v,
                    Cell::Int(v) => *v as f64,
                    Cell::Text(_) => f64::NAN,
                })
                .collect();
            let mut sorted = vals.clone();
            sorted.sort_by(f64::total_cmp);
            out.push(Aggregate {
                group: group_cols.iter().map(|c| c.to_string()).zip(key.iter().cloned()).collect(),
                metric: m.to_string(),
                n: vals.len(),
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                min: sorted[0],
                q1: quantile_sorted(&sorted, 0.25),
                median: quantile_sorted(&sorted, 0.5),
                q3: quantile_sorted(&sorted, 0.75),
                max: sorted[sorted.len() - 1],
            });
        }
    }
    out
}

fn boxplot_table(aggs: &[Aggregate], group_cols: &[&str]) -> Table {
    let mut header: Vec<&str> = group_cols.to_vec();
    header.extend(["metric", "n", "min", "q1", "median", "q3", "max", "mean"]);
    let mut t = Table::new(&header);
    for a in aggs {
        let mut row: Vec<Cell> = group_cols.iter().map(|c| Cell::Text(a.group[*c].clone())).collect();
        row.push(a.metric.as_str().into());
        row.push(a.n.into());
        for v in [a.min, a.q1, a.median, a.q3, a.max, a.mean] {
            row.push(v.into());
        }
        t.rows.push(row);
    }
    t
}

/// Everything a run writes.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub results: Table,
    pub summary: Value,
    pub plots: Vec<(String, Table)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    Config(Vec<String>),
    Trial { trial: usize, error: Error },
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Trial { .. } => 3,
            RunError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(p) => write!(f, "invalid config:\n  {}", p.join("\n  ")),
            RunError::Trial { trial, error } => write!(f, "trial {trial} failed: {error}"),
            RunError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

fn summary(cfg: &ExperimentConfig, aggs: &[Aggregate], extra: Value) -> Value {
    json!({
        "experiment": cfg.name(),
        "config": cfg,
        "aggregates": aggs,
        "extra": extra,
    })
}

/// Runs the experiment on the current rayon pool. Trials are seeded
/// `seed + trial` and rows are ordered by trial index.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(RunError::Config(problems));
    }
    match cfg {
        ExperimentConfig::NvLinearPolicies(c) => run_nv_policies(cfg, c),
        ExperimentConfig::NvSaaLinear(c) => run_nv_saa(cfg, &c.resolve(DemandModel::Linear)),
        ExperimentConfig::NvSaaRkhs(c) => run_nv_saa(cfg, &c.resolve(DemandModel::Nonlinear)),
        ExperimentConfig::NestedDemo(c) => run_nested(cfg, c),
        ExperimentConfig::Portfolio(c) => run_portfolio(cfg, c),
    }
}

fn trial_err(trial: usize) -> impl Fn(Error) -> RunError {
    move |error| RunError::Trial { trial, error }
}

fn oracle_values(
    objective: NvObjective,
    model: DemandModel,
    points: &[Vec<f64>],
    train: &NvTrainConfig,
    mc: usize,
) -> Result<Vec<f64>, Error> {
    points
        .par_iter()
        .enumerate()
        .map(|(j, x)| objective.oracle(x, model, &train.params, mc, j as u64))
        .collect()
}

fn decisions(policy: &PolicySpec, points: &[Vec<f64>]) -> Result<Vec<f64>, Error> {
    points.iter().map(|x| Ok(policy.evaluate(x)?.0[0])).collect()
}

fn run_nv_policies(cfg: &ExperimentConfig, c: &NvPoliciesConfig) -> Result<RunOutput, RunError> {
    let model = DemandModel::Linear;
    let objectives = [
        NvObjective::RiskNeutral,
        NvObjective::ExAnteCvar { beta: c.beta },
        NvObjective::ExpectedCvar { beta: c.beta },
        NvObjective::Entropic { gamma: c.gamma },
        NvObjective::ExpectedEntropic { gamma: c.gamma },
    ];
    let grid = model.grid(c.grid_points);
    let p = c.train.params;
    let base = |e| RunError::Trial { trial: 0, error: e };
    let z_rn = grid.iter().map(|x| oracle_rn(x, model, &p)).collect::<Result<Vec<_>, _>>().map_err(base)?;
    let z_cvar =
        grid.iter().map(|x| Ok(oracle_cvar(x, c.beta, model, &p)?.0)).collect::<Result<Vec<_>, Error>>().map_err(base)?;
    let z_ent = grid
        .par_iter()
        .enumerate()
        .map(|(j, x)| oracle_entropic(x, c.gamma, model, &p, c.oracle_mc, j as u64))
        .collect::<Result<Vec<_>, _>>()
        .map_err(base)?;
    let per_trial = (0..c.trials)
        .into_par_iter()
        .map(|trial| {
            let seed = c.seed + trial as u64;
            let err = trial_err(trial);
            let data = model.generate(c.n, seed).map_err(&err)?;
            objectives
                .iter()
                .map(|o| {
                    let pol = train_policy(&data, *o, c.class, &c.train).map_err(&err)?;
                    let g = decisions(&pol, &grid).map_err(&err)?;
                    let d = [&z_rn, &z_cvar, &z_ent]
                        .iter()
                        .map(|z| c.metric.eval(&g, z))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(&err)?;
                    Ok((g, d))
                })
                .collect::<Result<Vec<_>, RunError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut results = Table::new(&["trial", "policy", "N", "seed", "distance_rn", "distance_cvar", "distance_entropic"]);
    for (trial, rows) in per_trial.iter().enumerate() {
        for (o, (_, d)) in objectives.iter().zip(rows) {
            results.rows.push(vec![
                trial.into(),
                o.name().into(),
                c.n.into(),
                (c.seed + trial as u64).into(),
                d[0].into(),
                d[1].into(),
                d[2].into(),
            ]);
        }
    }
    let mut header = vec!["x"];
    header.extend(objectives.iter().map(|o| o.name()));
    header.extend(["oracle_rn", "oracle_cvar", "oracle_entropic"]);
    let mut curves = Table::new(&header);
    for (j, x) in grid.iter().enumerate() {
        let mut row: Vec<Cell> = vec![x[0].into()];
        row.extend(per_trial[0].iter().map(|(g, _)| Cell::from(g[j])));
        row.extend([z_rn[j].into(), z_cvar[j].into(), z_ent[j].into()]);
        curves.rows.push(row);
    }
    let groups = ["policy"];
    let aggs = aggregate(&results, &groups, &["distance_rn", "distance_cvar", "distance_entropic"]);
    let plots = vec![("policies.csv".into(), curves), ("boxplot.csv".into(), boxplot_table(&aggs, &groups))];
    Ok(RunOutput { summary: summary(cfg, &aggs, json!({})), results, plots })
}

fn run_nv_saa(cfg: &ExperimentConfig, c: &NvSaaResolved) -> Result<RunOutput, RunError> {
    let grid = c.model.grid(c.grid_points);
    let curve_grid = c.model.grid(c.curve_points);
    let base = |e| RunError::Trial { trial: 0, error: e };
    let oracles = c
        .objectives
        .iter()
        .map(|o| oracle_values(*o, c.model, &grid, &c.train, c.oracle_mc))
        .collect::<Result<Vec<_>, _>>()
        .map_err(base)?;
    let per_trial = (0..c.trials)
        .into_par_iter()
        .map(|trial| {
            let seed = c.seed + trial as u64;
            let err = trial_err(trial);
            let mut rows = Vec::new();
            for &n in &c.sample_sizes {
                let data = c.model.generate(n, seed).map_err(&err)?;
                for (oi, o) in c.objectives.iter().enumerate() {
                    for class in &c.classes {
                        let pol = train_policy(&data, *o, *class, &c.train).map_err(&err)?;
                        let d = c.metric.eval(&decisions(&pol, &grid).map_err(&err)?, &oracles[oi]).map_err(&err)?;
                        let curve = if trial == 0 { Some(decisions(&pol, &curve_grid).map_err(&err)?) } else { None };
                        rows.push((n, oi, *class, d, curve));
                    }
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    let mut results = Table::new(&["trial", "objective", "class", "N", "seed", "distance"]);
    let mut cols: Vec<String> = (1..=c.model.dx()).map(|i| format!("x_{i}")).collect();
    cols.extend(["objective", "class", "N", "z", "oracle"].map(String::from));
    let mut curves = Table { header: cols, rows: Vec::new() };
    let curve_oracles = c
        .objectives
        .iter()
        .map(|o| oracle_values(*o, c.model, &curve_grid, &c.train, c.oracle_mc))
        .collect::<Result<Vec<_>, _>>()
        .map_err(base)?;
    for (trial, rows) in per_trial.iter().enumerate() {
        for (n, oi, class, d, curve) in rows {
            results.rows.push(vec![
                trial.into(),
                c.objectives[*oi].name().into(),
                class_name(*class).into(),
                (*n).into(),
                (c.seed + trial as u64).into(),
                (*d).into(),
            ]);
            if let Some(z) = curve {
                for (j, x) in curve_grid.iter().enumerate() {
                    let mut row: Vec<Cell> = x.iter().map(|v| Cell::from(*v)).collect();
                    row.extend([
                        c.objectives[*oi].name().into(),
                        class_name(*class).into(),
                        (*n).into(),
                        z[j].into(),
                        curve_oracles[*oi][j].into(),
                    ]);
                    curves.rows.push(row);
                }
            }
        }
    }
    let groups = ["objective", "class", "N"];
    let aggs = aggregate(&results, &groups, &["distance"]);
    let plots = vec![("boxplot.csv".into(), boxplot_table(&aggs, &groups)), ("curves.csv".into(), curves)];
    Ok(RunOutput { summary: summary(cfg, &aggs, json!({ "resolved": c })), results, plots })
}

fn class_name(c: PolicyClass) -> &'static str {
    match c {
        PolicyClass::Ldr => "ldr",
        PolicyClass::Qdr => "qdr",
        PolicyClass::Rkhs => "rkhs",
    }
}

fn run_nested(cfg: &ExperimentConfig, c: &NestedDemoConfig) -> Result<RunOutput, RunError> {
    let base = |e| RunError::Trial { trial: 0, error: e };
    let (instance, findings) = counterexample_ex_ante_cvar().map_err(base)?;
    let cost = NvCost::default();
    let cvar = RiskSpec::Cvar { beta: findings.beta };
    let outer = RiskSpec::Entropic { gamma: c.outer_gamma };
    let grid = instance.default_grid();
    let table = RiskTable::build(&instance, &cvar, &cost, grid.clone()).map_err(base)?;
    let (_, ea_opt) =
        nested::brute_force_optimizers(&instance, &grid, |p| nested::exante_risk(&instance, &cvar, &cost, p))
            .map_err(base)?;
    let anchor = TabularPolicy { z: ea_opt[0].iter().map(|&j| grid[j].clone()).collect(), t: None };
    let ce_report = check_contextual_consistency(
        &instance,
        &ExAnteEvaluator::Pooled { rho: cvar.clone() },
        &cvar,
        &cost,
        c.consistency_trials,
        c.seed,
        &[anchor],
    )
    .map_err(base)?;

    let per_instance = (0..c.random_instances)
        .into_par_iter()
        .map(|trial| {
            let seed = c.seed + trial as u64;
            let err = trial_err(trial);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let contexts = 2 + (seed % 4) as usize;
            let joint = DiscreteJoint::random(&mut rng, contexts).map_err(&err)?;
            let inner = RiskSpec::Cvar { beta: 0.7 };
            let t = RiskTable::build(&joint, &inner, &cost, joint.default_grid()).map_err(&err)?;
            let opt = nested_optimizers(&joint, &outer, &t).map_err(&err)?;
            let ties: usize = opt.conditional_argmin.iter().map(|a| a.len() - 1).sum();
            let mean_opt = nested_optimizers(&joint, &RiskSpec::Mean, &t).map_err(&err)?;
            let ent = RiskSpec::Entropic { gamma: 0.1 };
            let pol = TabularPolicy { z: (0..contexts).map(|k| t.grid[t.argmin(k)[0]].clone()).collect(), t: None };
            let tower = (nested::nested_risk(&joint, &ent, &ent, &cost, &pol).map_err(&err)?
                - nested::exante_risk(&joint, &ent, &cost, &pol).map_err(&err)?)
            .abs();
            let nm = check_contextual_consistency(
                &joint,
                &ExAnteEvaluator::Nested { rho1: RiskSpec::Mean },
                &inner,
                &cost,
                c.consistency_trials,
                seed,
                &[],
            )
            .map_err(&err)?;
            let pe = check_contextual_consistency(
                &joint,
                &ExAnteEvaluator::Pooled { rho: ent.clone() },
                &ent,
                &cost,
                c.consistency_trials,
                seed,
                &[],
            )
            .map_err(&err)?;
            Ok(vec![
                ("entropic_outer_matches_conditional", seed, f64::from(u8::from(opt.matches_conditional()))),
                ("conditional_ties", seed, ties as f64),
                ("mean_outer_matches_conditional", seed, f64::from(u8::from(mean_opt.matches_conditional()))),
                ("entropic_tower_abs_diff", seed, tower),
                ("nested_mean_violations", seed, nm.violations.len() as f64),
                ("pooled_entropic_violations", seed, pe.violations.len() as f64),
            ])
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    let mut results = Table::new(&["trial", "check", "seed", "value"]);
    for (trial, rows) in per_instance.iter().enumerate() {
        for (name, seed, v) in rows {
            results.rows.push(vec![trial.into(), (*name).into(), (*seed).into(), (*v).into()]);
        }
    }
    let mut psi = Table::new(&["context", "z", "psi", "conditional_min"]);
    for k in 0..instance.len() {
        for (j, z) in grid.iter().enumerate() {
            psi.rows.push(vec![k.into(), z[0].into(), table.psi[k][j].into(), table.min(k).into()]);
        }
    }
    let aggs = aggregate(&results, &["check"], &["value"]);
    let extra = json!({
        "counterexample": {
            "instance": instance,
            "findings": findings,
            "exante_cvar_consistency": { "pairs": ce_report.pairs, "violations": ce_report.violations.len() },
        }
    });
    Ok(RunOutput { summary: summary(cfg, &aggs, extra), results, plots: vec![("conditional_risk.csv".into(), psi)] })
}

fn run_portfolio(cfg: &ExperimentConfig, c: &PortfolioExperimentConfig) -> Result<RunOutput, RunError> {
    let mut cells = Vec::new();
    for &eta in &c.etas {
        for &tau in &c.taus {
            for &p in &c.powers {
                for &n in &c.n_train {
                    for trial in 0..c.trials {
                        cells.push((eta, tau, p, n, trial));
                    }
                }
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(eta, tau, p, n, trial)| {
            let seed = c.seed + trial as u64;
            let err = trial_err(trial);
            let g = PortfolioGenConfig { tau, p_power: p, seed, ..Default::default() };
            let (train, test, _) = gen_portfolio(&g, n, c.n_test).map_err(&err)?;
            let solve = PortfolioSolveConfig { eta, ..c.solve.clone() };
            c.models
                .iter()
                .map(|m| {
                    let t = solve_model(*m, &train, &solve).map_err(&err)?;
                    let r = evaluate_metrics(&t.policy, &test, eta, solve.beta).map_err(&err)?;
                    Ok(vec![
                        trial.into(),
                        m.name().into(),
                        eta.into(),
                        tau.into(),
                        p.into(),
                        n.into(),
                        r.expected_return.into(),
                        r.cvar.into(),
                        r.tradeoff.into(),
                        r.relative_regret.into(),
                        seed.into(),
                        t.lambda.into(),
                    ])
                })
                .collect::<Result<Vec<Vec<Cell>>, RunError>>()
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    let mut results =
        Table::new(&["trial", "model", "eta", "tau", "p", "N", "E", "CVaR", "tradeoff", "regret", "seed", "lambda"]);
    results.rows = rows.into_iter().flatten().collect();
    let groups = ["model", "eta", "tau", "p", "N"];
    let aggs = aggregate(&results, &groups, &["E", "CVaR", "tradeoff", "regret"]);
    let plots = vec![("boxplot.csv".into(), boxplot_table(&aggs, &groups))];
    Ok(RunOutput { summary: summary(cfg, &aggs, json!({})), results, plots })
}

/// Writes `results.csv`, `summary.json` and `plotdata/*.csv` under `out`.
pub fn write_output(out: &Path, output: &RunOutput) -> Result<(), RunError> {
    let io = |e: std::io::Error| RunError::Io(e.to_string());
    let fmt = |e: Error| RunError::Io(e.to_string());
    fs::create_dir_all(out.join("plotdata")).map_err(io)?;
    fs::write(out.join("results.csv"), output.results.to_csv().map_err(fmt)?).map_err(io)?;
    let s = serde_json::to_string_pretty(&output.summary).map_err(|e| RunError::Io(e.to_string()))?;
    fs::write(out.join("summary.json"), s + "\n").map_err(io)?;
    for (name, t) in &output.plots {
        fs::write(out.join("plotdata").join(name), t.to_csv().map_err(fmt)?).map_err(io)?;
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::Config(vec![format!("{}: {e}", path.display())]))?;
    ExperimentConfig::from_json(&text).map_err(RunError::Config)
}

#[derive(Debug, Parser)]
#[command(name = "ctxrisk", version, about = "Risk-averse contextual optimization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment config and write its result files.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads for trials (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
}

/// Parses arguments, executes the command and returns the process exit
/// code; diagnostics go to standard error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Validate { config } => load_config(&config).map(|c| {
            println!("ok: {}", c.name());
        }),
        Command::Run { config, out, threads } => load_config(&config).and_then(|c| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.unwrap_or(0))
                .build()
                .map_err(|e| RunError::Config(vec![format!("threads: {e}")]))?;
            let output = pool.install(|| run_experiment(&c))?;
            write_output(&out, &output)?;
            println!("{}: wrote {}", c.name(), out.display());
            Ok(())
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_negative_eta_with_path() {
        let e = ExperimentConfig::from_json(r#"{"experiment":"Portfolio","etas":[-1]}"#).unwrap_err();
        assert!(e.iter().any(|m| m.starts_with("etas[0]:")), "{e:?}");
    }

    #[test]
    fn unknown_experiment_lists_names() {
        let e = ExperimentConfig::from_json(r#"{"experiment":"Nope"}"#).unwrap_err();
        for n in ["NvLinearPolicies", "NvSaaLinear", "NvSaaRkhs", "NestedDemo", "Portfolio"] {
            assert!(e[0].contains(n), "{e:?}");
        }
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"experiment":"NestedDemo","bogus":1}"#).is_err());
    }

    #[test]
    fn defaults_are_valid() {
        for name in ["NvLinearPolicies", "NvSaaLinear", "NvSaaRkhs", "NestedDemo", "Portfolio"] {
            let c = ExperimentConfig::from_json(&format!(r#"{{"experiment":"{name}"}}"#)).unwrap();
            assert_eq!(c.name(), name);
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_eq!(quantile_sorted(&v, 0.25), 1.75);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
    }
}
