//! Elliptical densities and a compact per-point evaluator used in the inner loops.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::family::RadialFamily;
use crate::params::EllipticalParams;

/// `log f_θ(x) = -½ log|Σ| + log g((x-μ)ᵀΣ⁻¹(x-μ))`.
pub fn log_density(family: &RadialFamily, theta: &EllipticalParams, x: &DVector<f64>) -> Result<f64> {
    let s = theta.mahalanobis_sq(x)?;
    Ok(-0.5 * theta.log_det() + family.log_g(s, theta.dim()))
}

/// `(x-μ)ᵀΣ⁻¹(x-μ)`.
pub fn mahalanobis_sq(theta: &EllipticalParams, x: &DVector<f64>) -> Result<f64> {
    theta.mahalanobis_sq(x)
}

/// Flattened copy of `θ` for tight loops over many points.
#[derive(Debug, Clone)]
pub(crate) struct Kernel {
    pub p: usize,
    pub family: RadialFamily,
    pub mu: Vec<f64>,
    /// Row-major lower Cholesky factor.
    pub l: Vec<f64>,
    /// `log_norm(p) - ½ log|Σ|`.
    pub log_const: f64,
}

impl Kernel {
    pub fn new(family: &RadialFamily, theta: &EllipticalParams) -> Self {
        let p = theta.dim();
        let c = theta.cholesky();
        let mut l = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..=i {
                l[i * p + j] = c[(i, j)];
            }
        }
        Kernel {
            p,
            family: *family,
            mu: theta.mu().iter().copied().collect(),
            l,
            log_const: family.log_norm(p) - 0.5 * theta.log_det(),
        }
    }

    /// `z = L⁻¹(y-μ)`; returns `‖z‖²`.
    #[inline]
    pub fn standardize(&self, y: &[f64], z: &mut [f64]) -> f64 {
        let p = self.p;
        let mut s = 0.0;
        for i in 0..p {
            let mut acc = y[i] - self.mu[i];
            let row = &self.l[i * p..i * p + i];
            for (j, lij) in row.iter().enumerate() {
                acc -= lij * z[j];
            }
            let zi = acc / self.l[i * p + i];
            z[i] = zi;
            s += zi * zi;
        }
        s
    }

    /// `v = L⁻ᵀ z`, so that `v = Σ⁻¹(y-μ)` after [`Kernel::standardize`].
    #[inline]
    pub fn back_substitute(&self, z: &[f64], v: &mut [f64]) {
        let p = self.p;
        for i in (0..p).rev() {
            let mut acc = z[i];
            for k in i + 1..p {
                acc -= self.l[k * p + i] * v[k];
            }
            v[i] = acc / self.l[i * p + i];
        }
    }

    #[inline]
    pub fn log_f(&self, y: &[f64], z: &mut [f64]) -> (f64, f64) {
        let s = self.standardize(y, z);
        (self.log_const + self.family.log_kernel(s, self.p), s)
    }

    /// Adds `w ∇ log f(y)` (unconstrained coordinates) into `grad`.
    /// `z` must hold `L⁻¹(y-μ)` and `s = ‖z‖²`.
    #[inline]
    pub fn add_gradient(&self, z: &[f64], s: f64, w: f64, v: &mut [f64], grad: &mut [f64]) {
        let p = self.p;
        self.back_substitute(z, v);
        let u = self.family.weight(s, p);
        for i in 0..p {
            grad[i] += w * u * v[i];
        }
        let mut k = p;
        for i in 0..p {
            for j in 0..=i {
                if i == j {
                    grad[k] += w * (u * v[i] * z[i] * self.l[i * p + i] - 1.0);
                } else {
                    grad[k] += w * u * v[i] * z[j];
                }
                k += 1;
            }
        }
    }
}

/// Iterator-free view of a point cloud stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    p: usize,
    data: Vec<f64>,
}

impl PointCloud {
    pub fn new(p: usize) -> Self {
        PointCloud { p, data: Vec::new() }
    }

    pub fn with_capacity(p: usize, n: usize) -> Self {
        PointCloud { p, data: Vec::with_capacity(p * n) }
    }

    pub fn from_points(p: usize, points: &[DVector<f64>]) -> Result<Self> {
        let mut c = Self::with_capacity(p, points.len());
        for x in points {
            if x.len() != p {
                return Err(Error::DimensionMismatch { expected: p, found: x.len() });
            }
            c.data.extend(x.iter());
        }
        Ok(c)
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        if self.p == 0 {
            0
        } else {
            self.data.len() / self.p
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.p);
        self.data.extend_from_slice(x);
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.p.max(1))
    }

    pub fn to_vectors(&self) -> Vec<DVector<f64>> {
        self.iter().map(DVector::from_column_slice).collect()
    }
}
