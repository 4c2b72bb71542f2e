//! Location/scatter parameters `θ = (μ, Σ)` with `Σ` carried by its Cholesky factor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of an elliptical distribution. `Σ` is always SPD.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticalParams {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl EllipticalParams {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let p = mu.len();
        if p == 0 {
            return Err(Error::InvalidArgument("empty location vector".into()));
        }
        if sigma.nrows() != p || sigma.ncols() != p {
            return Err(Error::DimensionMismatch { expected: p, found: sigma.nrows() });
        }
        let scale = sigma.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let asym = (&sigma - sigma.transpose()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !scale.is_finite() || asym > 1e-9 * scale.max(1e-300) {
            return Err(Error::NotPositiveDefinite);
        }
        let sym = (&sigma + sigma.transpose()) * 0.5;
        let chol = sym.clone().cholesky().ok_or(Error::NotPositiveDefinite)?.l();
        Self::assemble(mu, sym, chol)
    }

    /// Builds `Σ = L Lᵀ` from a lower-triangular factor with positive diagonal.
    pub fn from_cholesky(mu: DVector<f64>, l: DMatrix<f64>) -> Result<Self> {
        let p = mu.len();
        if l.nrows() != p || l.ncols() != p {
            return Err(Error::DimensionMismatch { expected: p, found: l.nrows() });
        }
        let l = l.lower_triangle();
        if (0..p).any(|i| !(l[(i, i)] > 0.0 && l[(i, i)].is_finite())) {
            return Err(Error::NotPositiveDefinite);
        }
        let sigma = &l * l.transpose();
        Self::assemble(mu, sigma, l)
    }

    fn assemble(mu: DVector<f64>, sigma: DMatrix<f64>, chol: DMatrix<f64>) -> Result<Self> {
        let log_det = 2.0 * (0..mu.len()).map(|i| chol[(i, i)].ln()).sum::<f64>();
        if !log_det.is_finite() || mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self { mu, sigma, chol, log_det })
    }

    /// `(0, I)` in dimension `p`.
    pub fn standard(p: usize) -> Self {
        Self::new(DVector::zeros(p), DMatrix::identity(p, p)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Lower Cholesky factor `L` with `Σ = L Lᵀ`.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `log |Σ|`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Scale `ς² = |Σ|^{1/p}`.
    pub fn scale(&self) -> f64 {
        (self.log_det / self.dim() as f64).exp()
    }

    /// Shape `Ξ = Σ / |Σ|^{1/p}`, which has unit determinant.
    pub fn shape(&self) -> DMatrix<f64> {
        &self.sigma / self.scale()
    }

    pub fn mahalanobis_sq(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        let d = x - &self.mu;
        let z = self
            .chol
            .solve_lower_triangular(&d)
            .ok_or(Error::NotPositiveDefinite)?;
        Ok(z.norm_squared())
    }

    /// Image under `x ↦ A x + b`: `(Aμ + b, AΣAᵀ)`.
    pub fn affine(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Self> {
        let mu = a * &self.mu + b;
        let sigma = a * &self.sigma * a.transpose();
        Self::new(mu, (&sigma + sigma.transpose()) * 0.5)
    }

    /// Number of unconstrained coordinates in dimension `p`.
    pub fn n_unconstrained(p: usize) -> usize {
        p + p * (p + 1) / 2
    }

    /// Unconstrained coordinates: `μ`, then the rows of `L` (lower triangle,
    /// row-major) with diagonal entries replaced by their logarithms.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let p = self.dim();
        let mut v = Vec::with_capacity(Self::n_unconstrained(p));
        v.extend(self.mu.iter());
        for i in 0..p {
            for j in 0..=i {
                let lij = self.chol[(i, j)];
                v.push(if i == j { lij.ln() } else { lij });
            }
        }
        v
    }

    pub fn from_unconstrained(p: usize, v: &[f64]) -> Result<Self> {
        if v.len() != Self::n_unconstrained(p) {
            return Err(Error::DimensionMismatch {
                expected: Self::n_unconstrained(p),
                found: v.len(),
            });
        }
        let mu = DVector::from_column_slice(&v[..p]);
        let mut l = DMatrix::zeros(p, p);
        let mut k = p;
        for i in 0..p {
            for j in 0..=i {
                l[(i, j)] = if i == j { v[k].exp() } else { v[k] };
                k += 1;
            }
        }
        Self::from_cholesky(mu, l)
    }

    /// `(μ, vech Σ)` flattened; vech runs over the lower triangle row by row.
    pub fn natural_coords(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.mu.iter().copied().collect();
        v.extend(vech(&self.sigma));
        v
    }
}

/// Lower triangle of a square matrix, row by row: `(0,0), (1,0), (1,1), (2,0), …`.
pub fn vech(m: &DMatrix<f64>) -> Vec<f64> {
    let p = m.nrows();
    let mut v = Vec::with_capacity(p * (p + 1) / 2);
    for i in 0..p {
        for j in 0..=i {
            v.push(m[(i, j)]);
        }
    }
    v
}

/// Position of `(i, j)`, `i ≥ j`, in [`vech`] order.
pub fn vech_index(i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    i * (i + 1) / 2 + j
}

pub fn vech_len(p: usize) -> usize {
    p * (p + 1) / 2
}

/// Serializable view of parameters for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsReport {
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
}

impl From<&EllipticalParams> for ParamsReport {
    fn from(t: &EllipticalParams) -> Self {
        let p = t.dim();
        ParamsReport {
            mu: t.mu.iter().copied().collect(),
            sigma: (0..p).map(|i| (0..p).map(|j| t.sigma[(i, j)]).collect()).collect(),
        }
    }
}
