//! Exact conditional and nested risk on finite joint distributions of a
//! scalar covariate and a scalar outcome.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::newsvendor::{NvCost, NvParams};
use crate::objectives::CostFn;
use crate::risk::{self, LossSample, RiskSpec};
use crate::solve::golden_section_min;

const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub y: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub x: f64,
    pub p: f64,
    pub cond: Vec<Atom>,
}

/// Finite-support law of `(X, Y)` given as `P_X` and the conditionals
/// `P_{Y|X=x}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    contexts: Vec<Context>,
}

impl DiscreteJoint {
    pub fn new(contexts: Vec<Context>) -> Result<Self> {
        if contexts.is_empty() {
            return Err(Error::EmptySample);
        }
        let total: f64 = contexts.iter().map(|c| c.p).sum();
        if contexts.iter().any(|c| !(c.p > 0.0) || !c.x.is_finite()) || (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidSample(format!(
                "context probabilities must be > 0 and sum to 1, got {total}"
            )));
        }
        for (k, c) in contexts.iter().enumerate() {
            let q: f64 = c.cond.iter().map(|a| a.q).sum();
            if c.cond.is_empty()
                || c.cond.iter().any(|a| !(a.q >= 0.0) || !a.y.is_finite())
                || (q - 1.0).abs() > PROB_TOL
            {
                return Err(Error::InvalidSample(format!(
                    "conditional {k} must have nonnegative weights summing to 1, got {q}"
                )));
            }
        }
        Ok(Self { contexts })
    }

    pub fn contexts(&self) -> &[Context] {
        &self.contexts
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            contexts: Vec<Context>,
        }
        let raw: Raw = serde_json::from_str(s)?;
        Self::new(raw.contexts)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn context(&self, k: usize) -> Result<&Context> {
        self.contexts.get(k).ok_or(Error::IndexOutOfRange { index: k, len: self.len() })
    }

    /// Smallest and largest outcome over all conditionals.
    pub fn outcome_range(&self) -> (f64, f64) {
        let ys = self.contexts.iter().flat_map(|c| c.cond.iter().map(|a| a.y));
        ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)))
    }

    /// 201 equally spaced scalar decisions over the outcome range widened
    /// by 10% on each side.
    pub fn default_grid(&self) -> Vec<Vec<f64>> {
        let (lo, hi) = self.outcome_range();
        let pad = if hi > lo { 0.1 * (hi - lo) } else { 0.1 * lo.abs().max(1.0) };
        linspace(lo - pad, hi + pad, 201).into_iter().map(|v| vec![v]).collect()
    }

    /// Cost distribution in context `k` under decision `z`.
    pub fn conditional_costs(&self, k: usize, cost: &dyn CostFn, z: &[f64]) -> Result<LossSample> {
        let c = self.context(k)?;
        let values = c.cond.iter().map(|a| cost.eval(z, &[a.y]).0).collect();
        let weights = c.cond.iter().map(|a| a.q).collect();
        LossSample::weighted(values, weights)
    }

    /// Pooled cost distribution under a tabular policy.
    pub fn joint_costs(&self, cost: &dyn CostFn, policy: &TabularPolicy) -> Result<LossSample> {
        policy.check(self)?;
        let mut values = Vec::new();
        let mut weights = Vec::new();
        for (c, z) in self.contexts.iter().zip(&policy.z) {
            for a in &c.cond {
                values.push(cost.eval(z, &[a.y]).0);
                weights.push(c.p * a.q);
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        LossSample::weighted(values, weights)
    }

    /// Seeded random instance with `contexts` contexts and 2–6 atoms each,
    /// outcomes in `[0, 100]`.
    pub fn random(rng: &mut impl Rng, contexts: usize) -> Result<Self> {
        let ps = normalized(rng, contexts);
        let ctx = ps
            .into_iter()
            .enumerate()
            .map(|(k, p)| {
                let m = rng.gen_range(2..=6);
                let qs = normalized(rng, m);
                let cond = qs.into_iter().map(|q| Atom { y: rng.gen_range(0.0..100.0), q }).collect();
                Context { x: k as f64, p, cond }
            })
            .collect();
        Self::new(ctx)
    }
}

fn normalized(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// One decision per context, with an optional auxiliary value per context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub z: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<Vec<f64>>,
}

impl TabularPolicy {
    pub fn constant(n: usize, z: Vec<f64>) -> Self {
        Self { z: vec![z; n], t: None }
    }

    fn check(&self, joint: &DiscreteJoint) -> Result<()> {
        if self.z.len() != joint.len() {
            return Err(Error::DimensionMismatch { expected: joint.len(), got: self.z.len() });
        }
        Ok(())
    }
}

/// `ρ₂` of the cost in context `k` under decision `z`.
pub fn conditional_risk(
    joint: &DiscreteJoint,
    k: usize,
    rho2: &RiskSpec,
    cost: &dyn CostFn,
    z: &[f64],
) -> Result<f64> {
    risk::evaluate(rho2, &joint.conditional_costs(k, cost, z)?)
}

/// How [`solve_conditional`] searches decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecisionSearch {
    /// Golden-section search over scalar decisions in `[lo, hi]`.
    Golden { lo: f64, hi: f64, tol: f64 },
    /// Exhaustive search over explicit decisions.
    Grid { points: Vec<Vec<f64>> },
    /// Exhaustive search over [`DiscreteJoint::default_grid`].
    DefaultGrid,
}

/// Per-context minimizers of `ρ₂` and the optimal values `ψ(x)`.
pub fn solve_conditional(
    joint: &DiscreteJoint,
    rho2: &RiskSpec,
    cost: &dyn CostFn,
    search: &DecisionSearch,
) -> Result<(TabularPolicy, Vec<f64>)> {
    rho2.validate()?;
    let mut zs = Vec::with_capacity(joint.len());
    let mut psi = Vec::with_capacity(joint.len());
    match search {
        DecisionSearch::Golden { lo, hi, tol } => {
            for k in 0..joint.len() {
                let f = |z: f64| conditional_risk(joint, k, rho2, cost, &[z]).unwrap_or(f64::INFINITY);
                let (z, v) = golden_section_min(f, *lo, *hi, *tol)?;
                zs.push(vec![z]);
                psi.push(v);
            }
        }
        DecisionSearch::Grid { .. } | DecisionSearch::DefaultGrid => {
            let grid = match search {
                DecisionSearch::Grid { points } => points.clone(),
                _ => joint.default_grid(),
            };
            let table = RiskTable::build(joint, rho2, cost, grid)?;
            for k in 0..joint.len() {
                let j = table.argmin(k)[0];
                zs.push(table.grid[j].clone());
                psi.push(table.psi[k][j]);
            }
        }
    }
    Ok((TabularPolicy { z: zs, t: None }, psi))
}

/// `ρ₁` over contexts of the conditional risks `ρ₂` under `policy`.
pub fn nested_risk(
    joint: &DiscreteJoint,
    rho1: &RiskSpec,
    rho2: &RiskSpec,
    cost: &dyn CostFn,
    policy: &TabularPolicy,
) -> Result<f64> {
    policy.check(joint)?;
    let psi = (0..joint.len())
        .map(|k| conditional_risk(joint, k, rho2, cost, &policy.z[k]))
        .collect::<Result<Vec<_>>>()?;
    outer_risk(joint, rho1, psi)
}

fn outer_risk(joint: &DiscreteJoint, rho1: &RiskSpec, psi: Vec<f64>) -> Result<f64> {
    let w = joint.contexts.iter().map(|c| c.p).collect();
    risk::evaluate(rho1, &LossSample::weighted(psi, w)?)
}

/// `ρ` of the pooled cost distribution.
pub fn exante_risk(
    joint: &DiscreteJoint,
    rho: &RiskSpec,
    cost: &dyn CostFn,
    policy: &TabularPolicy,
) -> Result<f64> {
    risk::evaluate(rho, &joint.joint_costs(cost, policy)?)
}

/// Conditional risks `ψ_k(z_j)` of every grid decision in every context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTable {
    pub grid: Vec<Vec<f64>>,
    /// `psi[k][j]`: context `k`, grid point `j`.
    pub psi: Vec<Vec<f64>>,
}

const TIE_TOL: f64 = 1e-12;

impl RiskTable {
    pub fn build(joint: &DiscreteJoint, rho2: &RiskSpec, cost: &dyn CostFn, grid: Vec<Vec<f64>>) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::EmptyGrid);
        }
        let psi = (0..joint.len())
            .map(|k| {
                grid.par_iter()
                    .map(|z| conditional_risk(joint, k, rho2, cost, z))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, psi })
    }

    pub fn min(&self, k: usize) -> f64 {
        self.psi[k].iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Grid indices attaining the minimum in context `k` (up to rounding).
    pub fn argmin(&self, k: usize) -> Vec<usize> {
        let m = self.min(k);
        let tol = TIE_TOL * (1.0 + m.abs());
        (0..self.grid.len()).filter(|&j| self.psi[k][j] <= m + tol).collect()
    }
}

/// Structure of the nested optimizers on a decision grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedOptimum {
    pub value: f64,
    pub conditional_min: Vec<f64>,
    /// Per context, the grid indices minimizing the conditional risk.
    pub conditional_argmin: Vec<Vec<usize>>,
    /// Per context, the grid indices used by at least one nested optimizer.
    pub support: Vec<Vec<usize>>,
}

impl NestedOptimum {
    /// True when every nested optimizer is conditionally optimal in every
    /// context.
    pub fn matches_conditional(&self) -> bool {
        self.support == self.conditional_argmin
    }

    /// Largest conditional suboptimality among nested optimizers, with its
    /// context.
    pub fn worst_suboptimality(&self, table: &RiskTable) -> (f64, usize) {
        let mut worst = (0.0, 0);
        for (k, idx) in self.support.iter().enumerate() {
            for &j in idx {
                let gap = table.psi[k][j] - self.conditional_min[k];
                if gap > worst.0 {
                    worst = (gap, k);
                }
            }
        }
        worst
    }
}

/// Nested optimizers of `ρ₁ ∘ ρ₂` over tabular policies on a grid.
///
/// For a monotone `ρ₁` the optimum is attained by the per-context minima,
/// and a grid point belongs to some optimizer exactly when swapping it into
/// that optimizer keeps the optimal value; this enumerates every
/// single-context deviation, which covers all optimal tuples.
pub fn nested_optimizers(joint: &DiscreteJoint, rho1: &RiskSpec, table: &RiskTable) -> Result<NestedOptimum> {
    let kn = joint.len();
    let mins: Vec<f64> = (0..kn).map(|k| table.min(k)).collect();
    let value = outer_risk(joint, rho1, mins.clone())?;
    let tol = TIE_TOL * (1.0 + value.abs());
    let support = (0..kn)
        .map(|k| {
            let vals = (0..table.grid.len())
                .into_par_iter()
                .map(|j| {
                    let mut psi = mins.clone();
                    psi[k] = table.psi[k][j];
                    outer_risk(joint, rho1, psi)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((0..vals.len()).filter(|&j| vals[j] <= value + tol).collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    Ok(NestedOptimum {
        value,
        conditional_argmin: (0..kn).map(|k| table.argmin(k)).collect(),
        conditional_min: mins,
        support,
    })
}

/// Every tabular policy on the grid, as index tuples, in lexicographic
/// order. Fails when the product exceeds `limit`.
pub fn enumerate_tuples(grid_len: usize, contexts: usize, limit: usize) -> Result<Vec<Vec<usize>>> {
    let total = (grid_len as f64).powi(contexts as i32);
    if total > limit as f64 {
        return Err(Error::InvalidParameter(format!(
            "{total} tabular policies exceed the enumeration limit {limit}"
        )));
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut cur = vec![0; contexts];
    loop {
        out.push(cur.clone());
        let mut k = contexts;
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            cur[k] += 1;
            if cur[k] < grid_len {
                break;
            }
            cur[k] = 0;
        }
    }
}

const ENUM_LIMIT: usize = 5_000_000;

/// Minimum of a policy functional over all tabular policies on the grid
/// and every minimizing tuple.
pub fn brute_force_optimizers(
    joint: &DiscreteJoint,
    grid: &[Vec<f64>],
    f: impl Fn(&TabularPolicy) -> Result<f64> + Sync,
) -> Result<(f64, Vec<Vec<usize>>)> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let tuples = enumerate_tuples(grid.len(), joint.len(), ENUM_LIMIT)?;
    let vals = tuples
        .par_iter()
        .map(|tu| f(&TabularPolicy { z: tu.iter().map(|&j| grid[j].clone()).collect(), t: None }))
        .collect::<Result<Vec<_>>>()?;
    let best = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = TIE_TOL * (1.0 + best.abs());
    let argmins = tuples.into_iter().zip(&vals).filter(|(_, v)| **v <= best + tol).map(|(t, _)| t).collect();
    Ok((best, argmins))
}

/// Ex-ante risk evaluator compared against conditional dominance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExAnteEvaluator {
    /// `ρ₁ ∘ ρ₂` with the module's `ρ₂`.
    Nested { rho1: RiskSpec },
    /// `ρ` of the pooled cost distribution.
    Pooled { rho: RiskSpec },
}

impl ExAnteEvaluator {
    pub fn evaluate(
        &self,
        joint: &DiscreteJoint,
        rho2: &RiskSpec,
        cost: &dyn CostFn,
        policy: &TabularPolicy,
    ) -> Result<f64> {
        match self {
            ExAnteEvaluator::Nested { rho1 } => nested_risk(joint, rho1, rho2, cost, policy),
            ExAnteEvaluator::Pooled { rho } => exante_risk(joint, rho, cost, policy),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub better: TabularPolicy,
    pub worse: TabularPolicy,
    pub risk_better: f64,
    pub risk_worse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub pairs: usize,
    pub violations: Vec<Violation>,
}

/// Tests Definition-3 style consistency: for pairs where `g1` is
/// conditionally no worse than `g2` in every context, the ex-ante risk of
/// `g1` must not exceed that of `g2` by more than 1e-10.
///
/// `g2` is either one of `anchors` or drawn uniformly on the default grid's
/// span; `g1` moves each context of `g2` toward the conditional optimum by a
/// random fraction (the whole way with probability 1/2), which by convexity
/// of `ρ₂` in `z` cannot increase any conditional risk.
pub fn check_contextual_consistency(
    joint: &DiscreteJoint,
    rho_ea: &ExAnteEvaluator,
    rho2: &RiskSpec,
    cost: &dyn CostFn,
    trials: usize,
    seed: u64,
    anchors: &[TabularPolicy],
) -> Result<ConsistencyReport> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    let (opt, _) = solve_conditional(joint, rho2, cost, &DecisionSearch::DefaultGrid)?;
    let grid = joint.default_grid();
    let (lo, hi) = (grid[0][0], grid[grid.len() - 1][0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = Vec::new();
    let mut pairs = 0;
    for trial in 0..trials + anchors.len() {
        let worse = match anchors.get(trial) {
            Some(a) => a.clone(),
            None => TabularPolicy {
                z: (0..joint.len()).map(|_| vec![rng.gen_range(lo..hi)]).collect(),
                t: None,
            },
        };
        let better = TabularPolicy {
            z: worse
                .z
                .iter()
                .zip(&opt.z)
                .map(|(w, o)| {
                    let lam = if rng.gen_bool(0.5) { 1.0 } else { rng.gen::<f64>() };
                    w.iter().zip(o).map(|(a, b)| a + lam * (b - a)).collect()
                })
                .collect(),
            t: None,
        };
        let dominated = (0..joint.len()).try_fold(true, |acc, k| -> Result<bool> {
            Ok(acc
                && conditional_risk(joint, k, rho2, cost, &better.z[k])?
                    <= conditional_risk(joint, k, rho2, cost, &worse.z[k])? + TIE_TOL)
        })?;
        if !dominated {
            continue;
        }
        pairs += 1;
        let rb = rho_ea.evaluate(joint, rho2, cost, &better)?;
        let rw = rho_ea.evaluate(joint, rho2, cost, &worse)?;
        if rb > rw + 1e-10 {
            violations.push(Violation { better, worse, risk_better: rb, risk_worse: rw });
        }
    }
    Ok(ConsistencyReport { pairs, violations })
}

/// Evidence produced by [`counterexample_ex_ante_cvar`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleFindings {
    pub beta: f64,
    pub grid_points: usize,
    pub exante_cvar_value: f64,
    pub exante_optimizers: usize,
    /// Minimum over ex-ante CVaR optimizers of their largest conditional
    /// CVaR suboptimality across contexts.
    pub exante_margin: f64,
    pub exante_margin_context: usize,
    pub nested_cvar_value: f64,
    /// Nested CVaR of the conditionally optimal policy.
    pub conditional_policy_nested_value: f64,
    pub conditional_attains_nested: bool,
    /// Largest conditional suboptimality among nested-CVaR optimizers.
    pub nested_margin: f64,
    pub nested_margin_context: usize,
    pub nested_margin_probability: f64,
    /// Whether every nested optimizer under an entropic outer risk is
    /// conditionally optimal in every context.
    pub entropic_outer_consistent: bool,
}

/// Built-in two-context newsvendor instance (h = 0.2, b = 1, β = 0.9).
pub fn counterexample_instance() -> DiscreteJoint {
    let ctx = |x: f64, p: f64, atoms: &[(f64, f64)]| Context {
        x,
        p,
        cond: atoms.iter().map(|&(y, q)| Atom { y, q }).collect(),
    };
    DiscreteJoint::new(vec![
        ctx(0.0, 0.9, &[(70.0, 0.6), (75.0, 0.4)]),
        ctx(1.0, 0.1, &[(55.0, 0.4), (90.0, 0.4), (150.0, 0.2)]),
    ])
    .expect("built-in instance is valid")
}

pub const COUNTEREXAMPLE_BETA: f64 = 0.9;

/// Ex-ante CVaR and nested CVaR on the built-in instance, with margins of
/// conditional suboptimality measured on the default decision grid.
pub fn counterexample_ex_ante_cvar() -> Result<(DiscreteJoint, CounterexampleFindings)> {
    let joint = counterexample_instance();
    let beta = COUNTEREXAMPLE_BETA;
    let cost = NvCost(NvParams::default());
    let cvar = RiskSpec::Cvar { beta };
    let grid = joint.default_grid();
    let table = RiskTable::build(&joint, &cvar, &cost, grid.clone())?;

    let (ea_value, ea_opt) = brute_force_optimizers(&joint, &grid, |pol| exante_risk(&joint, &cvar, &cost, pol))?;
    let mut exante_margin = f64::INFINITY;
    let mut exante_margin_context = 0;
    for tuple in &ea_opt {
        let (gap, k) = tuple
            .iter()
            .enumerate()
            .map(|(k, &j)| (table.psi[k][j] - table.min(k), k))
            .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a });
        if gap < exante_margin {
            exante_margin = gap;
            exante_margin_context = k;
        }
    }

    let nested = nested_optimizers(&joint, &cvar, &table)?;
    let (cond_policy, _) = solve_conditional(&joint, &cvar, &cost, &DecisionSearch::DefaultGrid)?;
    let cond_nested = nested_risk(&joint, &cvar, &cvar, &cost, &cond_policy)?;
    let (nested_margin, nested_margin_context) = nested.worst_suboptimality(&table);
    let entropic = nested_optimizers(&joint, &RiskSpec::Entropic { gamma: 0.5 }, &table)?;

    let findings = CounterexampleFindings {
        beta,
        grid_points: grid.len(),
        exante_cvar_value: ea_value,
        exante_optimizers: ea_opt.len(),
        exante_margin,
        exante_margin_context,
        nested_cvar_value: nested.value,
        conditional_policy_nested_value: cond_nested,
        conditional_attains_nested: (cond_nested - nested.value).abs() <= TIE_TOL * (1.0 + nested.value.abs()),
        nested_margin,
        nested_margin_context,
        nested_margin_probability: joint.contexts[nested_margin_context].p,
        entropic_outer_consistent: entropic.matches_conditional(),
    };
    Ok((joint, findings))
}
