//! Decision rules mapping covariates to decisions, and feasibility
//! projections applied at deployment.
//!
//! Every policy is linear in its coefficients over a fixed basis
//! (affine, full quadratic, or kernel sections at a set of centers), with
//! `d_z` decision outputs and an optional scalar auxiliary output `s(·)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::KernelSpec;

/// Basis functions a policy is linear over.
#[derive(Debug, Clone, PartialEq)]
pub enum Basis {
    /// `{1, x_1, …, x_d}`
    Affine { dx: usize },
    /// `{1, x_j, x_j², x_j·x_k (j<k)}`
    Quadratic { dx: usize },
    /// `{k(c_1, x), …, k(c_n, x)}`
    Kernel { kernel: KernelSpec, centers: Vec<Vec<f64>> },
}

impl Basis {
    pub fn dx(&self) -> usize {
        match self {
            Basis::Affine { dx } | Basis::Quadratic { dx } => *dx,
            Basis::Kernel { centers, .. } => centers.first().map_or(0, Vec::len),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Basis::Affine { dx } => 1 + dx,
            Basis::Quadratic { dx } => 1 + dx + dx * (dx + 1) / 2,
            Basis::Kernel { centers, .. } => centers.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dx(), x.len())?;
        let mut out = Vec::with_capacity(self.len());
        match self {
            Basis::Affine { .. } => {
                out.push(1.0);
                out.extend_from_slice(x);
            }
            Basis::Quadratic { dx } => {
                out.push(1.0);
                out.extend_from_slice(x);
                for j in 0..*dx {
                    out.push(x[j] * x[j]);
                }
                for j in 0..*dx {
                    for k in (j + 1)..*dx {
                        out.push(x[j] * x[k]);
                    }
                }
            }
            Basis::Kernel { kernel, centers } => {
                out.extend(centers.iter().map(|c| kernel.eval_unchecked(c, x)));
            }
        }
        Ok(out)
    }
}

/// A decision rule. JSON form is tagged by `kind`; arrays are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    /// Linear decision rule: `coef_z[t] = [intercept_t, slope_t1, …]`.
    Ldr {
        dx: usize,
        coef_z: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        coef_s: Option<Vec<f64>>,
    },
    /// Quadratic decision rule over the full degree-2 monomial basis.
    Qdr {
        dx: usize,
        coef_z: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        coef_s: Option<Vec<f64>>,
    },
    /// Representer form `z_t(x) = Σ_i k(c_i, x)·alpha_z[i][t] (+ bias_z[t])`.
    Rkhs {
        kernel: KernelSpec,
        centers: Vec<Vec<f64>>,
        alpha_z: Vec<Vec<f64>>,
        #[serde(default)]
        alpha_s: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias_z: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias_s: Option<f64>,
    },
}

impl PolicySpec {
    /// Single-output LDR `z = intercept + slope·x`.
    pub fn ldr(intercept: f64, slope: Vec<f64>) -> Self {
        let dx = slope.len();
        let mut row = vec![intercept];
        row.extend(slope);
        PolicySpec::Ldr { dx, coef_z: vec![row], coef_s: None }
    }

    pub fn basis(&self) -> Basis {
        match self {
            PolicySpec::Ldr { dx, .. } => Basis::Affine { dx: *dx },
            PolicySpec::Qdr { dx, .. } => Basis::Quadratic { dx: *dx },
            PolicySpec::Rkhs { kernel, centers, .. } => Basis::Kernel {
                kernel: *kernel,
                centers: centers.clone(),
            },
        }
    }

    pub fn dz(&self) -> usize {
        match self {
            PolicySpec::Ldr { coef_z, .. } | PolicySpec::Qdr { coef_z, .. } => coef_z.len(),
            PolicySpec::Rkhs { alpha_z, .. } => alpha_z.first().map_or(0, Vec::len),
        }
    }

    pub fn has_aux(&self) -> bool {
        match self {
            PolicySpec::Ldr { coef_s, .. } | PolicySpec::Qdr { coef_s, .. } => coef_s.is_some(),
            PolicySpec::Rkhs { alpha_s, .. } => alpha_s.is_some(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let basis = self.basis();
        let p = basis.len();
        if self.dz() == 0 {
            return Err(Error::InvalidParameter("policy needs at least one decision output".into()));
        }
        match self {
            PolicySpec::Ldr { coef_z, coef_s, .. } | PolicySpec::Qdr { coef_z, coef_s, .. } => {
                for row in coef_z {
                    check_dim(p, row.len())?;
                }
                if let Some(s) = coef_s {
                    check_dim(p, s.len())?;
                }
            }
            PolicySpec::Rkhs { kernel, centers, alpha_z, alpha_s, bias_z, .. } => {
                kernel.validate()?;
                if centers.is_empty() {
                    return Err(Error::InvalidParameter("rkhs policy needs centers".into()));
                }
                let dx = centers[0].len();
                for c in centers {
                    check_dim(dx, c.len())?;
                }
                check_dim(centers.len(), alpha_z.len())?;
                let dz = self.dz();
                for row in alpha_z {
                    check_dim(dz, row.len())?;
                }
                if let Some(s) = alpha_s {
                    check_dim(centers.len(), s.len())?;
                }
                if let Some(b) = bias_z {
                    check_dim(dz, b.len())?;
                }
            }
        }
        Ok(())
    }

    /// Decision `z(x)` and auxiliary `s(x)` when present.
    pub fn evaluate(&self, x: &[f64]) -> Result<(Vec<f64>, Option<f64>)> {
        let phi = self.basis().features(x)?;
        let dot = |c: &[f64]| -> f64 { c.iter().zip(&phi).map(|(a, b)| a * b).sum() };
        match self {
            PolicySpec::Ldr { coef_z, coef_s, .. } | PolicySpec::Qdr { coef_z, coef_s, .. } => {
                Ok((coef_z.iter().map(|r| dot(r)).collect(), coef_s.as_deref().map(dot)))
            }
            PolicySpec::Rkhs { alpha_z, alpha_s, bias_z, bias_s, .. } => {
                let dz = self.dz();
                let mut z = vec![0.0; dz];
                for (row, k) in alpha_z.iter().zip(&phi) {
                    for t in 0..dz {
                        z[t] += k * row[t];
                    }
                }
                if let Some(b) = bias_z {
                    for t in 0..dz {
                        z[t] += b[t];
                    }
                }
                let s = alpha_s.as_deref().map(|a| dot(a) + bias_s.unwrap_or(0.0));
                Ok((z, s))
            }
        }
    }

    /// Coefficients as one vector: decision columns first, then the
    /// auxiliary column, then (RKHS only) decision biases and the auxiliary
    /// bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match self {
            PolicySpec::Ldr { coef_z, coef_s, .. } | PolicySpec::Qdr { coef_z, coef_s, .. } => {
                for row in coef_z {
                    out.extend_from_slice(row);
                }
                if let Some(s) = coef_s {
                    out.extend_from_slice(s);
                }
            }
            PolicySpec::Rkhs { alpha_z, alpha_s, bias_z, bias_s, .. } => {
                for t in 0..self.dz() {
                    out.extend(alpha_z.iter().map(|row| row[t]));
                }
                if let Some(s) = alpha_s {
                    out.extend_from_slice(s);
                }
                if let Some(b) = bias_z {
                    out.extend_from_slice(b);
                }
                if let Some(b) = bias_s {
                    out.push(*b);
                }
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.flatten().len()
    }

    /// Rebuild a policy with this one's structure from a parameter vector.
    pub fn unflatten(&self, params: &[f64]) -> Result<PolicySpec> {
        check_dim(self.n_params(), params.len())?;
        let mut it = params.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        Ok(match self {
            PolicySpec::Ldr { dx, coef_z, coef_s } | PolicySpec::Qdr { dx, coef_z, coef_s } => {
                let p = self.basis().len();
                let new_z: Vec<Vec<f64>> = coef_z.iter().map(|_| take(p)).collect();
                let new_s = coef_s.as_ref().map(|_| take(p));
                if matches!(self, PolicySpec::Ldr { .. }) {
                    PolicySpec::Ldr { dx: *dx, coef_z: new_z, coef_s: new_s }
                } else {
                    PolicySpec::Qdr { dx: *dx, coef_z: new_z, coef_s: new_s }
                }
            }
            PolicySpec::Rkhs { kernel, centers, alpha_z, alpha_s, bias_z, bias_s } => {
                let n = centers.len();
                let dz = self.dz();
                let cols: Vec<Vec<f64>> = (0..dz).map(|_| take(n)).collect();
                let new_alpha_z = (0..alpha_z.len())
                    .map(|i| (0..dz).map(|t| cols[t][i]).collect())
                    .collect();
                let new_alpha_s = alpha_s.as_ref().map(|_| take(n));
                let new_bias_z = bias_z.as_ref().map(|_| take(dz));
                let new_bias_s = bias_s.map(|_| take(1)[0]);
                PolicySpec::Rkhs {
                    kernel: *kernel,
                    centers: centers.clone(),
                    alpha_z: new_alpha_z,
                    alpha_s: new_alpha_s,
                    bias_z: new_bias_z,
                    bias_s: new_bias_s,
                }
            }
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: PolicySpec = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// Feasible region for decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeasibleSet {
    Unconstrained,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// `{z ≥ 0, Σ z ≤ cap}`
    CappedSimplex { cap: f64 },
}

impl FeasibleSet {
    pub fn validate(&self) -> Result<()> {
        match self {
            FeasibleSet::Unconstrained => Ok(()),
            FeasibleSet::Box { lower, upper } => {
                check_dim(lower.len(), upper.len())?;
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
                    return Err(Error::InvalidParameter("box needs lower <= upper".into()));
                }
                Ok(())
            }
            FeasibleSet::CappedSimplex { cap } => {
                if *cap > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!("simplex cap must be > 0, got {cap}")))
                }
            }
        }
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        match self {
            FeasibleSet::Unconstrained => v.to_vec(),
            FeasibleSet::Box { lower, upper } => v
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(x, (l, u))| x.clamp(*l, *u))
                .collect(),
            FeasibleSet::CappedSimplex { cap } => project_capped_simplex(v, *cap),
        }
    }

    /// Distance from `v` to the set.
    pub fn distance(&self, v: &[f64]) -> f64 {
        let p = self.project(v);
        v.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

fn project_capped_simplex(v: &[f64], cap: f64) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    if sum <= cap * (1.0 + 1e-12) {
        return clipped;
    }
    let mut u = clipped.clone();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        acc += uj;
        let cand = (acc - cap) / (j + 1) as f64;
        if uj - cand > 0.0 {
            theta = cand;
        } else {
            break;
        }
    }
    clipped.iter().map(|x| (x - theta).max(0.0)).collect()
}
