//! Closed ellipsoids `E(c, S, r) = {x : (x-c)ᵀS⁻¹(x-c) ≤ r²}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{ln_unit_ball_volume, RadialFamily};
use crate::params::EllipticalParams;

#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    center: DVector<f64>,
    shape: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det_shape: f64,
    radius: f64,
}

impl Ellipsoid {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidArgument(format!("ellipsoid radius must be positive, got {radius}")));
        }
        // Reuse the SPD checks of the parameter type.
        let t = EllipticalParams::new(center, shape)?;
        Ok(Self::from_params(&t, radius))
    }

    /// `E(μ, Σ, r)` built from the parameters of a distribution.
    pub fn from_params(theta: &EllipticalParams, radius: f64) -> Self {
        Ellipsoid {
            center: theta.mu().clone(),
            shape: theta.sigma().clone(),
            chol: theta.cholesky().clone(),
            log_det_shape: theta.log_det(),
            radius,
        }
    }

    /// One-dimensional interval `[lo, hi]`.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::InvalidArgument(format!("empty interval [{lo}, {hi}]")));
        }
        Self::new(DVector::from_element(1, 0.5 * (lo + hi)), DMatrix::identity(1, 1), 0.5 * (hi - lo))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn log_det_shape(&self) -> f64 {
        self.log_det_shape
    }

    /// `(x-c)ᵀS⁻¹(x-c)`.
    pub fn distance_sq(&self, x: &[f64]) -> f64 {
        let p = self.dim();
        debug_assert_eq!(x.len(), p);
        let mut z = vec![0.0; p];
        let mut s = 0.0;
        for i in 0..p {
            let mut acc = x[i] - self.center[i];
            for (j, zj) in z.iter().enumerate().take(i) {
                acc -= self.chol[(i, j)] * zj;
            }
            z[i] = acc / self.chol[(i, i)];
            s += z[i] * z[i];
        }
        s
    }

    /// Closed membership test.
    pub fn contains(&self, x: &[f64]) -> bool {
        self.distance_sq(x) <= self.radius * self.radius
    }

    pub fn contains_vector(&self, x: &DVector<f64>) -> Result<bool> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        Ok(self.contains(x.as_slice()))
    }

    pub fn log_volume(&self) -> f64 {
        let p = self.dim() as f64;
        p * self.radius.ln() + 0.5 * self.log_det_shape + ln_unit_ball_volume(self.dim())
    }

    /// `r^p |S|^{1/2} V_p`.
    pub fn volume(&self) -> f64 {
        self.log_volume().exp()
    }

    /// Same center and shape, new radius.
    pub fn with_radius(&self, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidArgument(format!("ellipsoid radius must be positive, got {radius}")));
        }
        let mut e = self.clone();
        e.radius = radius;
        Ok(e)
    }

    /// Image under `x ↦ A x + b`.
    pub fn affine(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Self> {
        let t = EllipticalParams::new(self.center.clone(), self.shape.clone())?.affine(a, b)?;
        Ok(Self::from_params(&t, self.radius))
    }

    /// Unit-radius representation `(c, r² S)`.
    pub fn as_params(&self) -> EllipticalParams {
        EllipticalParams::from_cholesky(self.center.clone(), &self.chol * self.radius)
            .expect("ellipsoid factor is valid")
    }

    /// Parameters centred on the region with `P_θ(A) = coverage` under `family`.
    pub fn aligned_params(&self, family: &RadialFamily, coverage: f64) -> Result<EllipticalParams> {
        if !(coverage > 0.0 && coverage < 1.0) {
            return Err(Error::InvalidArgument(format!("coverage must lie in (0,1), got {coverage}")));
        }
        let q = family.radius_quantile(coverage, self.dim());
        EllipticalParams::from_cholesky(self.center.clone(), &self.chol * (self.radius / q))
    }

    /// If `θ` shares the center and `Σ = k S`, returns the radius of `A` in
    /// `θ`-standardized units, `r / √k`.
    pub fn aligned_radius(&self, theta: &EllipticalParams) -> Option<f64> {
        const TOL: f64 = 1e-9;
        let p = self.dim();
        if theta.dim() != p {
            return None;
        }
        let scale = self.shape.diagonal().iter().map(|v| v.abs()).sum::<f64>() / p as f64;
        let k = theta.sigma().trace() / self.shape.trace();
        let cscale = self.radius * scale.sqrt() * k.sqrt();
        if (theta.mu() - &self.center).amax() > TOL * cscale.max(f64::MIN_POSITIVE) {
            return None;
        }
        let dev = (theta.sigma() - &self.shape * k).amax();
        if dev > TOL * k * self.shape.amax() {
            return None;
        }
        Some(self.radius / k.sqrt())
    }
}

/// Serializable view of an ellipsoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidReport {
    pub center: Vec<f64>,
    pub shape: Vec<Vec<f64>>,
    pub radius: f64,
}

impl From<&Ellipsoid> for EllipsoidReport {
    fn from(e: &Ellipsoid) -> Self {
        let p = e.dim();
        EllipsoidReport {
            center: e.center.iter().copied().collect(),
            shape: (0..p).map(|i| (0..p).map(|j| e.shape[(i, j)]).collect()).collect(),
            radius: e.radius,
        }
    }
}
