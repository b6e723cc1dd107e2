//! Kernels, Gram matrices and RKHS norms of representer-form functions.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(−‖x−x'‖² / (2ℓ²))`
    Gaussian { lengthscale: f64 },
    /// `⟨x, x'⟩ + bias`
    Linear { bias: f64 },
    /// `(⟨x, x'⟩ + bias)^degree`
    Polynomial { degree: u32, bias: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { lengthscale } if !(lengthscale > 0.0 && lengthscale.is_finite()) => {
                Err(Error::InvalidParameter(format!("lengthscale must be > 0, got {lengthscale}")))
            }
            KernelSpec::Linear { bias } if !(bias >= 0.0) => {
                Err(Error::InvalidParameter(format!("kernel bias must be >= 0, got {bias}")))
            }
            KernelSpec::Polynomial { degree, bias } if degree < 1 || !(bias >= 0.0) => Err(
                Error::InvalidParameter(format!("polynomial kernel needs degree >= 1 and bias >= 0, got ({degree}, {bias})")),
            ),
            _ => Ok(()),
        }
    }

    /// Kernel value without dimension checks.
    #[inline]
    pub(crate) fn eval_unchecked(&self, x1: &[f64], x2: &[f64]) -> f64 {
        match *self {
            KernelSpec::Gaussian { lengthscale } => {
                let d2: f64 = x1.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * lengthscale * lengthscale)).exp()
            }
            KernelSpec::Linear { bias } => dot(x1, x2) + bias,
            KernelSpec::Polynomial { degree, bias } => (dot(x1, x2) + bias).powi(degree as i32),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn kernel_eval(spec: &KernelSpec, x1: &[f64], x2: &[f64]) -> Result<f64> {
    check_dim(x1.len(), x2.len())?;
    Ok(spec.eval_unchecked(x1, x2))
}

/// Symmetric kernel matrix over a set of centers.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
    pub centers: Vec<Vec<f64>>,
}

impl GramMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Cholesky factor of `K + jitter·I`, escalating the jitter from 1e-10
    /// by ×10 up to 1e-6. Returns the factorization and the jitter used.
    pub fn cholesky(&self) -> Result<(Cholesky<f64, Dyn>, f64)> {
        cholesky_with_jitter(&self.entries)
    }

    /// PSD check through [`GramMatrix::cholesky`].
    pub fn is_psd(&self) -> bool {
        self.cholesky().is_ok()
    }
}

pub(crate) fn cholesky_with_jitter(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let mut jitter = 1e-10;
    while jitter <= 1e-6 * (1.0 + 1e-9) {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite(1e-6))
}

/// Cross-kernel matrix `[k(a_i, b_j)]`.
pub fn cross_kernel(spec: &KernelSpec, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let dim = a.first().or(b.first()).map_or(0, Vec::len);
    for x in a.iter().chain(b) {
        check_dim(dim, x.len())?;
    }
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| spec.eval_unchecked(&a[i], &b[j])))
}

pub fn gram(spec: &KernelSpec, centers: &[Vec<f64>]) -> Result<GramMatrix> {
    if centers.is_empty() {
        return Err(Error::InvalidParameter("gram matrix needs at least one center".into()));
    }
    let mut entries = cross_kernel(spec, centers, centers)?;
    // exact symmetry
    let n = entries.nrows();
    for i in 0..n {
        for j in 0..i {
            entries[(i, j)] = entries[(j, i)];
        }
    }
    Ok(GramMatrix { entries, centers: centers.to_vec() })
}

/// `Σ_t α_tᵀ K α_t` over the columns of `alpha` (n × d).
pub fn rkhs_norm_sq(alpha: &DMatrix<f64>, k: &GramMatrix) -> Result<f64> {
    check_dim(k.dim(), alpha.nrows())?;
    let ka = &k.entries * alpha;
    Ok(alpha.component_mul(&ka).sum())
}

/// Median pairwise Euclidean distance; falls back to 1 when all points
/// coincide.
pub fn median_heuristic(points: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in 0..i {
            let s: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2])
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}
