//! First-order minimization of convex, possibly nonsmooth objectives over a
//! flat parameter vector, plus one-dimensional golden-section search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

type Oracle<'a> = dyn Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync + 'a;

/// A value-and-subgradient oracle on `R^dim`.
pub struct Objective<'a> {
    dim: usize,
    oracle: Box<Oracle<'a>>,
    smooth: bool,
}

impl<'a> Objective<'a> {
    pub fn new(
        dim: usize,
        smooth: bool,
        oracle: impl Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync + 'a,
    ) -> Self {
        Self { dim, oracle: Box::new(oracle), smooth }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_smooth(&self) -> bool {
        self.smooth
    }

    /// Value and subgradient at `params`.
    pub fn eval(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(self.dim, params.len())?;
        let (v, g) = (self.oracle)(params);
        check_dim(self.dim, g.len())?;
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::ObjectiveNonFinite { iterate: params.to_vec() });
        }
        Ok((v, g))
    }

    pub fn value(&self, params: &[f64]) -> Result<f64> {
        Ok(self.eval(params)?.0)
    }
}

impl std::fmt::Debug for Objective<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Objective")
            .field("dim", &self.dim)
            .field("smooth", &self.smooth)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// Subgradient steps of length `a/√k`.
    Diminishing,
    /// Subgradient steps of fixed length `a`.
    Constant,
    /// Gradient descent with backtracking line search.
    Armijo,
    /// Limited-memory BFGS with backtracking line search.
    Lbfgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    pub max_iters: usize,
    /// Step constant `a`; `None` selects `1/(1+‖g(init)‖)`.
    pub step0: Option<f64>,
    pub schedule: StepSchedule,
    /// Minimum best-value improvement over a 50-iteration window.
    pub stall_tol: f64,
    pub seed: u64,
    /// Weight of the quadratic feasibility penalty used by training objectives.
    pub penalty: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            step0: None,
            schedule: StepSchedule::Diminishing,
            stall_tol: 1e-10,
            seed: 0,
            penalty: 100.0,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if let Some(a) = self.step0 {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidParameter(format!("step0 must be > 0, got {a}")));
            }
        }
        if !(self.stall_tol >= 0.0) {
            return Err(Error::InvalidParameter("stall_tol must be >= 0".into()));
        }
        if !(self.penalty >= 0.0) {
            return Err(Error::InvalidParameter("penalty must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub params: Vec<f64>,
    pub value: f64,
    /// Best value seen after each iteration; `trace[0]` is the initial value.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const STALL_WINDOW: usize = 50;

struct Tracker {
    best_x: Vec<f64>,
    best_f: f64,
    trace: Vec<f64>,
    tol: f64,
}

impl Tracker {
    fn new(x: &[f64], f: f64, tol: f64) -> Self {
        Self { best_x: x.to_vec(), best_f: f, trace: vec![f], tol }
    }

    fn record(&mut self, x: &[f64], f: f64) {
        if f < self.best_f {
            self.best_f = f;
            self.best_x.copy_from_slice(x);
        }
        self.trace.push(self.best_f);
    }

    fn stalled(&self) -> bool {
        let n = self.trace.len();
        n > STALL_WINDOW && self.trace[n - 1 - STALL_WINDOW] - self.trace[n - 1] < self.tol
    }

    fn finish(self, converged: bool) -> SolveResult {
        SolveResult {
            iterations: self.trace.len() - 1,
            params: self.best_x,
            value: self.best_f,
            trace: self.trace,
            converged,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `obj` from `init`. The objective is assumed convex; the result
/// is the best iterate seen and is a deterministic function of the inputs.
///
/// Subgradient schedules run for `max_iters` and report convergence when the
/// final stall window shows no improvement; the line-search schedules stop
/// as soon as a window stalls.
pub fn minimize(obj: &Objective<'_>, init: &[f64], cfg: &SolveConfig) -> Result<SolveResult> {
    cfg.validate()?;
    check_dim(obj.dim(), init.len())?;
    match cfg.schedule {
        StepSchedule::Diminishing | StepSchedule::Constant => subgradient(obj, init, cfg),
        StepSchedule::Armijo => armijo(obj, init, cfg),
        StepSchedule::Lbfgs => lbfgs(obj, init, cfg),
    }
}

fn subgradient(obj: &Objective<'_>, init: &[f64], cfg: &SolveConfig) -> Result<SolveResult> {
    let mut x = init.to_vec();
    let (f0, mut g) = obj.eval(&x)?;
    let a = cfg.step0.unwrap_or(1.0 / (1.0 + norm(&g)));
    let mut tr = Tracker::new(&x, f0, cfg.stall_tol);
    for k in 1..=cfg.max_iters {
        let step = match cfg.schedule {
            StepSchedule::Diminishing => a / (k as f64).sqrt(),
            _ => a,
        };
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= step * gi;
        }
        let (f, gk) = obj.eval(&x)?;
        g = gk;
        tr.record(&x, f);
    }
    let converged = tr.stalled();
    Ok(tr.finish(converged))
}

/// Evaluation at a line-search trial point; a non-finite value rejects the
/// step instead of aborting.
fn trial_eval(obj: &Objective<'_>, x: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
    match obj.eval(x) {
        Ok(v) => Ok(Some(v)),
        Err(Error::ObjectiveNonFinite { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

fn armijo(obj: &Objective<'_>, init: &[f64], cfg: &SolveConfig) -> Result<SolveResult> {
    let mut x = init.to_vec();
    let (mut f, mut g) = obj.eval(&x)?;
    let mut t = cfg.step0.unwrap_or(1.0 / (1.0 + norm(&g)));
    let mut tr = Tracker::new(&x, f, cfg.stall_tol);
    let mut trial = vec![0.0; x.len()];
    for _ in 0..cfg.max_iters {
        let gg = dot(&g, &g);
        if gg == 0.0 {
            return Ok(tr.finish(true));
        }
        t *= 2.0;
        let accepted = loop {
            for i in 0..x.len() {
                trial[i] = x[i] - t * g[i];
            }
            if let Some((ft, gt)) = trial_eval(obj, &trial)? {
                if ft <= f - ARMIJO_C * t * gg {
                    break Some((ft, gt));
                }
            }
            t *= 0.5;
            if t < MIN_STEP {
                break None;
            }
        };
        match accepted {
            Some((ft, gt)) => {
                x.copy_from_slice(&trial);
                f = ft;
                g = gt;
                tr.record(&x, f);
                if tr.stalled() {
                    return Ok(tr.finish(true));
                }
            }
            None => return Ok(tr.finish(true)),
        }
    }
    Ok(tr.finish(false))
}

const LBFGS_MEMORY: usize = 10;

fn lbfgs(obj: &Objective<'_>, init: &[f64], cfg: &SolveConfig) -> Result<SolveResult> {
    let n = init.len();
    let mut x = init.to_vec();
    let (mut f, mut g) = obj.eval(&x)?;
    let mut tr = Tracker::new(&x, f, cfg.stall_tol);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(LBFGS_MEMORY);
    let mut trial = vec![0.0; n];
    let first_step = cfg.step0.unwrap_or(1.0 / (1.0 + norm(&g)));
    for _ in 0..cfg.max_iters {
        if norm(&g) == 0.0 {
            return Ok(tr.finish(true));
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &d);
            for i in 0..n {
                d[i] -= a * y[i];
            }
            alphas.push(a);
        }
        let scale = hist.back().map_or(first_step, |(s, y, _)| dot(s, y) / dot(y, y));
        for v in d.iter_mut() {
            *v *= scale;
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for i in 0..n {
                d[i] += (a - b) * s[i];
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hist.clear();
            d = g.iter().map(|v| -first_step * v).collect();
            slope = dot(&g, &d);
        }
        let mut t = 1.0;
        let accepted = loop {
            for i in 0..n {
                trial[i] = x[i] + t * d[i];
            }
            if let Some((ft, gt)) = trial_eval(obj, &trial)? {
                if ft <= f + ARMIJO_C * t * slope {
                    break Some((ft, gt));
                }
            }
            t *= 0.5;
            if t < MIN_STEP {
                break None;
            }
        };
        let Some((ft, gt)) = accepted else {
            if hist.is_empty() {
                return Ok(tr.finish(true));
            }
            hist.clear();
            continue;
        };
        let s: Vec<f64> = (0..n).map(|i| trial[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gt[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if hist.len() == LBFGS_MEMORY {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        x.copy_from_slice(&trial);
        f = ft;
        g = gt;
        tr.record(&x, f);
        if tr.stalled() {
            return Ok(tr.finish(true));
        }
    }
    Ok(tr.finish(false))
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Minimizer of a unimodal `f` on `[lo, hi]` to within `tol`.
pub fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    Ok(golden_section_min(f, lo, hi, tol)?.0)
}

/// Golden-section search returning `(argmin, min value)`.
pub fn golden_section_min(
    f: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidParameter(format!("golden section needs lo < hi, got [{lo}, {hi}]")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be > 0, got {tol}")));
    }
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        if c >= d {
            break;
        }
    }
    let mid = 0.5 * (a + b);
    let mut best = (mid, f(mid));
    for cand in [(c, fc), (d, fd), (lo, f(lo)), (hi, f(hi))] {
        if cand.1 < best.1 {
            best = cand;
        }
    }
    Ok(best)
}
