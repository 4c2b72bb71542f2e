//! Radial generators of the supported elliptical families.
//!
//! An elliptical density has the form `|Σ|^{-1/2} g((x-μ)ᵀΣ⁻¹(x-μ))`. Here `g`
//! carries its own dimension-dependent normalization, so `exp(log_g)` composed
//! with the quadratic form is a proper density on ℝᵖ.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

/// Radial generator `g` of an elliptical family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RadialFamily {
    Gaussian,
    StudentT { nu: f64 },
}

impl RadialFamily {
    pub fn student_t(nu: f64) -> Result<Self> {
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "degrees of freedom must be positive, got {nu}"
            )));
        }
        Ok(RadialFamily::StudentT { nu })
    }

    /// Degrees of freedom, `None` for the Gaussian.
    pub fn nu(&self) -> Option<f64> {
        match *self {
            RadialFamily::Gaussian => None,
            RadialFamily::StudentT { nu } => Some(nu),
        }
    }

    /// Log normalizing constant of `g` in dimension `p`.
    pub fn log_norm(&self, p: usize) -> f64 {
        let pf = p as f64;
        match *self {
            RadialFamily::Gaussian => -0.5 * pf * (2.0 * PI).ln(),
            RadialFamily::StudentT { nu } => {
                ln_gamma(0.5 * (nu + pf)) - ln_gamma(0.5 * nu) - 0.5 * pf * (nu * PI).ln()
            }
        }
    }

    /// `log g(s)` including the normalization.
    #[inline]
    pub fn log_g(&self, s: f64, p: usize) -> f64 {
        self.log_norm(p) + self.log_kernel(s, p)
    }

    /// Unnormalized part of `log g(s)`.
    #[inline]
    pub fn log_kernel(&self, s: f64, p: usize) -> f64 {
        match *self {
            RadialFamily::Gaussian => -0.5 * s,
            RadialFamily::StudentT { nu } => -0.5 * (nu + p as f64) * (s / nu).ln_1p(),
        }
    }

    /// `d/ds log g(s)`.
    #[inline]
    pub fn dlog_g(&self, s: f64, p: usize) -> f64 {
        match *self {
            RadialFamily::Gaussian => -0.5,
            RadialFamily::StudentT { nu } => -0.5 * (nu + p as f64) / (nu + s),
        }
    }

    /// `-2 d/ds log g(s)`: the weight attached to an observation with squared
    /// Mahalanobis distance `s` in the score equations. Identically 1 for the Gaussian.
    #[inline]
    pub fn weight(&self, s: f64, p: usize) -> f64 {
        -2.0 * self.dlog_g(s, p)
    }

    /// CDF of the Mahalanobis radius `R = ‖Σ^{-1/2}(X-μ)‖`.
    pub fn radius_cdf(&self, r: f64, p: usize) -> f64 {
        if r.is_nan() {
            return f64::NAN;
        }
        if r <= 0.0 {
            return 0.0;
        }
        if (r * r).is_infinite() {
            return 1.0;
        }
        let pf = p as f64;
        match *self {
            // R² ~ χ²_p
            RadialFamily::Gaussian => gamma_lr(0.5 * pf, 0.5 * r * r),
            // R²/p ~ F(p, ν)
            RadialFamily::StudentT { nu } => beta_reg(0.5 * pf, 0.5 * nu, r * r / (r * r + nu)),
        }
    }

    /// Survival function of the Mahalanobis radius, accurate in the far tail.
    pub fn radius_sf(&self, r: f64, p: usize) -> f64 {
        if r.is_nan() {
            return f64::NAN;
        }
        if r <= 0.0 {
            return 1.0;
        }
        if (r * r).is_infinite() {
            return 0.0;
        }
        let pf = p as f64;
        match *self {
            RadialFamily::Gaussian => gamma_ur(0.5 * pf, 0.5 * r * r),
            RadialFamily::StudentT { nu } => beta_reg(0.5 * nu, 0.5 * pf, nu / (r * r + nu)),
        }
    }

    /// Log density of the Mahalanobis radius.
    pub fn ln_radius_pdf(&self, r: f64, p: usize) -> f64 {
        if r <= 0.0 {
            return if p == 1 {
                (2.0f64).ln() + self.log_g(0.0, p)
            } else {
                f64::NEG_INFINITY
            };
        }
        let pf = p as f64;
        std::f64::consts::LN_2 + 0.5 * pf * PI.ln() - ln_gamma(0.5 * pf)
            + (pf - 1.0) * r.ln()
            + self.log_g(r * r, p)
    }

    /// Radius `r` with `radius_cdf(r, p) = u`.
    pub fn radius_quantile(&self, u: f64, p: usize) -> f64 {
        self.solve_radius(u, 1.0 - u, p)
    }

    /// Radius `r` with `radius_sf(r, p) = tail`, accurate for tiny tails.
    pub fn radius_quantile_sf(&self, tail: f64, p: usize) -> f64 {
        self.solve_radius(1.0 - tail, tail, p)
    }

    // `lower + upper = 1`; whichever is smaller is solved for in log space.
    fn solve_radius(&self, lower: f64, upper: f64, p: usize) -> f64 {
        if lower <= 0.0 {
            return 0.0;
        }
        if upper <= 0.0 {
            return f64::INFINITY;
        }
        let use_lower = lower <= upper;
        if p == 2 {
            // R² is exponential (Gaussian) or a Pareto-type law (t) in the plane
            let ln_upper = if use_lower { (-lower).ln_1p() } else { upper.ln() };
            let r2 = match *self {
                RadialFamily::Gaussian => -2.0 * ln_upper,
                RadialFamily::StudentT { nu } => nu * (-2.0 / nu * ln_upper).exp_m1(),
            };
            return r2.sqrt();
        }
        let (target, eval): (f64, Box<dyn Fn(f64) -> (f64, f64)>) = if use_lower {
            (
                lower.ln(),
                Box::new(move |r: f64| {
                    let c = self.radius_cdf(r, p);
                    let d = (self.ln_radius_pdf(r, p) - c.ln()).exp();
                    (c.ln(), d)
                }),
            )
        } else {
            (
                upper.ln(),
                Box::new(move |r: f64| {
                    let s = self.radius_sf(r, p);
                    let d = -(self.ln_radius_pdf(r, p) - s.ln()).exp();
                    (s.ln(), d)
                }),
            )
        };
        // residual(r) = h(r) - target; increasing in r for the lower branch,
        // decreasing for the upper one.
        let sign = if use_lower { 1.0 } else { -1.0 };
        let mut lo = 0.0;
        let mut hi = 1.0;
        loop {
            let (h, _) = eval(hi);
            if sign * (h - target) >= 0.0 {
                break;
            }
            lo = hi;
            hi *= 2.0;
            if hi > 1e300 {
                return f64::INFINITY;
            }
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let (h, dh) = eval(x);
            let res = h - target;
            if !res.is_finite() {
                x = 0.5 * (lo + hi);
                continue;
            }
            if sign * res > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let newton = x - res / dh;
            let next = if dh.is_finite() && dh != 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - x).abs() <= 1e-15 * x.max(1e-300) || hi - lo <= 1e-15 * hi {
                return next;
            }
            x = next;
        }
        x
    }

    /// CDF of the one-dimensional standardized member of the family.
    pub fn cdf_1d(&self, z: f64) -> f64 {
        if z >= 0.0 {
            1.0 - 0.5 * self.radius_sf(z, 1)
        } else {
            0.5 * self.radius_sf(-z, 1)
        }
    }

    /// Exponent in the tail condition `r^γ g(r) → 0`; `None` when every exponent works.
    ///
    /// For Student-t any `γ < (ν+p)/2` qualifies; this returns the supremum.
    pub fn tail_exponent(&self, p: usize) -> Option<f64> {
        match *self {
            RadialFamily::Gaussian => None,
            RadialFamily::StudentT { nu } => Some(0.5 * (nu + p as f64)),
        }
    }

    /// `g` strictly decreasing near zero (and here, everywhere).
    pub fn satisfies_strict_decrease(&self, p: usize) -> bool {
        [1e-8, 1e-3, 0.5, 1.0, 10.0, 1e3, 1e6]
            .iter()
            .all(|&s| self.dlog_g(s, p) < 0.0)
    }

    /// The tail condition holds in dimension `p`.
    pub fn satisfies_tail_condition(&self, p: usize) -> bool {
        match self.tail_exponent(p) {
            None => true,
            Some(sup) => sup > 0.5 * p as f64,
        }
    }

    /// Smallest number of points inside the trimming region for which the
    /// censored and smart estimators are guaranteed to exist.
    pub fn min_inside_count(&self, p: usize) -> usize {
        if p == 1 {
            return 3;
        }
        match *self {
            RadialFamily::Gaussian => p + 2,
            RadialFamily::StudentT { nu } => {
                let pf = p as f64;
                // m > p(ν+p)/ν, the limit of pγ/(γ-p/2) as γ ↑ (ν+p)/2
                let bound = pf * (nu + pf) / nu;
                (bound.floor() as usize + 1).max(p + 1)
            }
        }
    }
}

impl fmt::Display for RadialFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            RadialFamily::Gaussian => write!(f, "gaussian"),
            RadialFamily::StudentT { nu } => write!(f, "t:{nu}"),
        }
    }
}

impl FromStr for RadialFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "gaussian" || s == "normal" {
            return Ok(RadialFamily::Gaussian);
        }
        if let Some(nu) = s.strip_prefix("t:") {
            let nu: f64 = nu
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad degrees of freedom in '{s}'")))?;
            return RadialFamily::student_t(nu);
        }
        Err(Error::InvalidArgument(format!(
            "unsupported family '{s}' (expected 'gaussian' or 't:<nu>')"
        )))
    }
}

/// Volume of the unit ball in ℝᵖ.
pub fn unit_ball_volume(p: usize) -> f64 {
    let pf = p as f64;
    (0.5 * pf * PI.ln() - ln_gamma(0.5 * pf + 1.0)).exp()
}

/// Log volume of the unit ball in ℝᵖ.
pub fn ln_unit_ball_volume(p: usize) -> f64 {
    let pf = p as f64;
    0.5 * pf * PI.ln() - ln_gamma(0.5 * pf + 1.0)
}
