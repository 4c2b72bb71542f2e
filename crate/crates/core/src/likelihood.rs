//! Trimmed log-likelihood objectives in sample-sum form.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::density::{Kernel, PointCloud};
use crate::error::{Error, Result};
use crate::family::RadialFamily;
use crate::mve::TrimmedSample;
use crate::params::EllipticalParams;
use crate::probability::{Engine, Frame, ProbEval, ProbabilityEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Truncated,
    Censored,
    Smart,
}

/// Likelihood evaluator over a trimmed sample with a fixed common-random-number
/// stream for `P̂_θ(A)`.
#[derive(Debug, Clone)]
pub struct Objective {
    variant: Variant,
    family: RadialFamily,
    sample: TrimmedSample,
    prob_seed: u64,
    draws: usize,
    frame: Frame,
    pts: PointCloud,
    p0: f64,
    engine: Engine,
}

/// Values needed by the optimizers, all in frame coordinates.
#[derive(Debug, Clone)]
pub(crate) struct FrameEval {
    pub sum_logf: f64,
    pub prob: ProbEval,
    pub grad_logf: Vec<f64>,
    pub grad_prob: Vec<f64>,
}

impl Objective {
    pub fn new(variant: Variant, family: RadialFamily, sample: TrimmedSample, prob_seed: u64) -> Self {
        let draws = Self::default_draws(sample.n_inside());
        Self::with_draws(variant, family, sample, prob_seed, draws)
    }

    /// Draws per stratum used when none are given: enough that the surrogate
    /// noise stays small next to the sampling noise of the data.
    pub fn default_draws(n_inside: usize) -> usize {
        (20 * n_inside).max(10_000)
    }

    pub fn with_draws(
        variant: Variant,
        family: RadialFamily,
        sample: TrimmedSample,
        prob_seed: u64,
        draws_per_stratum: usize,
    ) -> Self {
        let p = sample.dim();
        let frame = Frame::canonical(sample.region(), sample.inside());
        let mut pts = PointCloud::with_capacity(p, sample.n_inside());
        for x in sample.inside() {
            pts.push(&frame.point(x.as_slice()));
        }
        let p0 = sample.empirical_inside_fraction().clamp(0.05, 0.995);
        let engine = Engine::new(&family, p, p0, draws_per_stratum, prob_seed);
        Objective { variant, family, sample, prob_seed, draws: draws_per_stratum, frame, pts, p0, engine }
    }

    /// Same data and stream, different model.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut o = self.clone();
        o.variant = variant;
        o
    }

    /// Same data, independent stream with a different budget.
    pub fn reseeded(&self, prob_seed: u64, draws_per_stratum: usize) -> Self {
        Self::with_draws(self.variant, self.family, self.sample.clone(), prob_seed, draws_per_stratum)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn family(&self) -> &RadialFamily {
        &self.family
    }

    pub fn sample(&self) -> &TrimmedSample {
        &self.sample
    }

    pub fn prob_seed(&self) -> u64 {
        self.prob_seed
    }

    pub fn draws_per_stratum(&self) -> usize {
        self.draws
    }

    pub fn dim(&self) -> usize {
        self.sample.dim()
    }

    pub(crate) fn frame(&self) -> &Frame {
        &self.frame
    }

    pub(crate) fn frame_points(&self) -> &PointCloud {
        &self.pts
    }

    pub(crate) fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Region-aligned starting point in frame coordinates whose mass on the
    /// region matches the empirical inside fraction (clamped away from 0 and 1).
    pub(crate) fn initial_frame_params(&self) -> EllipticalParams {
        let p = self.dim();
        let rho = self.family.radius_quantile(self.p0, p);
        EllipticalParams::new(DVector::zeros(p), nalgebra::DMatrix::identity(p, p) / (rho * rho))
            .expect("scaled identity is SPD")
    }

    /// `P̂_θ(A)`: exact for aligned `θ` or `p = 1`, otherwise the fixed-stream estimate.
    pub fn probability(&self, theta: &EllipticalParams) -> Result<ProbabilityEstimate> {
        let p = self.dim();
        if theta.dim() != p {
            return Err(Error::DimensionMismatch { expected: p, found: theta.dim() });
        }
        if let Some(rho) = self.sample.region().aligned_radius(theta) {
            return Ok(ProbabilityEstimate { estimate: self.family.radius_cdf(rho, p), std_error: 0.0, exact: true });
        }
        let local = self.frame.to_frame(theta)?;
        let e = self.engine.probability(&Kernel::new(&self.family, &local), None);
        Ok(ProbabilityEstimate { estimate: e.prob, std_error: e.std_error, exact: p == 1 })
    }

    /// `(P̂, 1 - P̂)` with the complement formed on its accurate side.
    fn probability_pair(&self, theta: &EllipticalParams) -> Result<(f64, f64)> {
        let p = self.dim();
        if let Some(rho) = self.sample.region().aligned_radius(theta) {
            return Ok((self.family.radius_cdf(rho, p), self.family.radius_sf(rho, p)));
        }
        let local = self.frame.to_frame(theta)?;
        let e = self.engine.probability(&Kernel::new(&self.family, &local), None);
        Ok((e.prob, e.complement))
    }

    fn sum_log_density(&self, theta: &EllipticalParams) -> Result<f64> {
        let p = self.dim();
        if theta.dim() != p {
            return Err(Error::DimensionMismatch { expected: p, found: theta.dim() });
        }
        let k = Kernel::new(&self.family, theta);
        let mut z = vec![0.0; p];
        Ok(self.sample.inside().iter().map(|x| k.log_f(x.as_slice(), &mut z).0).sum())
    }

    pub(crate) fn eval_frame(&self, theta: &EllipticalParams, want_grad: bool) -> FrameEval {
        let p = self.dim();
        let k = Kernel::new(&self.family, theta);
        let nq = EllipticalParams::n_unconstrained(p);
        let mut grad_logf = vec![0.0; if want_grad { nq } else { 0 }];
        let mut grad_prob = vec![0.0; grad_logf.len()];
        let mut z = vec![0.0; p];
        let mut v = vec![0.0; p];
        let mut sum = 0.0;
        for y in self.pts.iter() {
            let (lf, s) = k.log_f(y, &mut z);
            sum += lf;
            if want_grad {
                k.add_gradient(&z, s, 1.0, &mut v, &mut grad_logf);
            }
        }
        let prob = self.engine.probability(&k, want_grad.then_some(grad_prob.as_mut_slice()));
        FrameEval { sum_logf: sum, prob, grad_logf, grad_prob }
    }

    /// Value of the variant's objective; `pi` is used by the smart model only
    /// (`None` profiles it out at `max(π*(θ), 0)`).
    pub fn value(&self, theta: &EllipticalParams, pi: Option<f64>) -> Result<f64> {
        match self.variant {
            Variant::Truncated => loglik_truncated(self, theta),
            Variant::Censored => loglik_censored(self, theta),
            Variant::Smart => {
                let pi = match pi {
                    Some(v) => v,
                    None => pi_star(theta, self)?.max(0.0),
                };
                loglik_smart(self, theta, pi)
            }
        }
    }
}

/// `Σ_{x∈A} [log f_θ(x) - log P̂_θ(A)]`, or `-∞` when `P̂_θ(A) ≤ 0`.
pub fn loglik_truncated(obj: &Objective, theta: &EllipticalParams) -> Result<f64> {
    let ll = obj.sum_log_density(theta)?;
    let (pa, _) = obj.probability_pair(theta)?;
    if !(pa > 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(ll - obj.sample.n_inside() as f64 * pa.ln())
}

/// `Σ_{x∈A} log f_θ(x) + n_out log P̂_θ(Aᶜ)`, with `0 · log 0 = 0`.
pub fn loglik_censored(obj: &Objective, theta: &EllipticalParams) -> Result<f64> {
    let ll = obj.sum_log_density(theta)?;
    let n_out = obj.sample.n_outside();
    if n_out == 0 {
        return Ok(ll);
    }
    let (_, pc) = obj.probability_pair(theta)?;
    Ok(ll + n_out as f64 * pc.max(0.0).ln())
}

/// `Σ_{x∈A} log((1-π) f_θ(x)) + n_out log((1-π) P̂_θ(Aᶜ) + π)`.
pub fn loglik_smart(obj: &Objective, theta: &EllipticalParams, pi: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&pi) {
        return Err(Error::InvalidArgument(format!("contamination fraction must lie in [0,1), got {pi}")));
    }
    let ll = obj.sum_log_density(theta)?;
    let m = obj.sample.n_inside() as f64;
    let n_out = obj.sample.n_outside();
    let mut v = ll + m * (-pi).ln_1p();
    if n_out > 0 {
        let (_, pc) = obj.probability_pair(theta)?;
        v += n_out as f64 * ((1.0 - pi) * pc.max(0.0) + pi).ln();
    }
    Ok(v)
}

/// `π*(θ) = (P̂_θ(A) - Pₙ(A)) / P̂_θ(A)`; may be negative.
pub fn pi_star(theta: &EllipticalParams, obj: &Objective) -> Result<f64> {
    let (pa, _) = obj.probability_pair(theta)?;
    pi_star_from(pa, obj.sample.empirical_inside_fraction())
}

pub(crate) fn pi_star_from(pa: f64, pn: f64) -> Result<f64> {
    if !(pa > 0.0) {
        return Err(Error::InvalidArgument("region has zero probability under θ".into()));
    }
    Ok((pa - pn) / pa)
}

/// `P̂_θ(A) ≥ α`.
pub fn feasible_restricted(theta: &EllipticalParams, obj: &Objective, alpha: f64) -> Result<bool> {
    Ok(obj.probability(theta)?.estimate >= alpha)
}
