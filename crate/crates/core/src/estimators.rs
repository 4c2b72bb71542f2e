//! One-step maximum-likelihood estimators on a trimmed sample.
//!
//! Every fit runs in the frame where the trimming region is the unit ball, so
//! the tolerances are relative to the size of the region and the estimates are
//! affine equivariant.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::density::Kernel;
use crate::error::{Error, Result};
use crate::family::RadialFamily;
use crate::likelihood::{loglik_censored, pi_star_from, Objective, Variant};
use crate::mve::TrimmedSample;
use crate::optim::{minimize, BfgsOptions, Stop};
use crate::params::EllipticalParams;
use crate::sampling::derive_seed;

/// Estimator tags: truncated, censored, restricted, smart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorVariant {
    #[serde(rename = "t")]
    T,
    #[serde(rename = "c")]
    C,
    #[serde(rename = "r")]
    R,
    #[serde(rename = "s")]
    S,
}

impl fmt::Display for EstimatorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EstimatorVariant::T => "t",
            EstimatorVariant::C => "c",
            EstimatorVariant::R => "r",
            EstimatorVariant::S => "s",
        };
        f.write_str(s)
    }
}

impl FromStr for EstimatorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "t" | "truncated" => Ok(EstimatorVariant::T),
            "c" | "censored" => Ok(EstimatorVariant::C),
            "r" | "restricted" => Ok(EstimatorVariant::R),
            "s" | "smart" => Ok(EstimatorVariant::S),
            other => Err(Error::InvalidArgument(format!("unknown estimator variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Em,
    QuasiNewton,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Centred on the region with its shape, scaled to the empirical coverage.
    FromRegion,
    UserSupplied(EllipticalParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_iter: usize,
    pub param_tol: f64,
    /// Draws per stratum of the probability surrogate; `None` picks a size
    /// proportional to the number of retained points.
    pub em_mc_draws: Option<usize>,
    /// Used by the censored fit; the truncated and restricted fits are always quasi-Newton.
    pub optimizer: Optimizer,
    pub seed: u64,
    pub init: Init,
    /// Re-evaluate the censored log-likelihood on an independent, larger stream.
    pub fresh_loglik: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iter: 1000,
            param_tol: 1e-6,
            em_mc_draws: None,
            optimizer: Optimizer::Em,
            seed: 0,
            init: Init::FromRegion,
            fresh_loglik: true,
        }
    }
}

impl FitConfig {
    pub fn with_seed(seed: u64) -> Self {
        FitConfig { seed, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || !(self.param_tol > 0.0) {
            return Err(Error::InvalidArgument("max_iter and param_tol must be positive".into()));
        }
        if self.em_mc_draws == Some(0) {
            return Err(Error::InvalidArgument("em_mc_draws must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmartBranch {
    /// The truncated estimate exists and `π* ≥ 0` there.
    #[serde(rename = "truncated")]
    TruncatedBranch,
    /// The censored estimate with `π̂ = 0`.
    #[serde(rename = "censored")]
    CensoredBranch,
    /// The truncated estimate does not exist; the restricted estimate with
    /// `α = Pₙ(A)` beat the censored one.
    #[serde(rename = "restricted")]
    RestrictedBranch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: EllipticalParams,
    pub pi_hat: Option<f64>,
    pub variant: EstimatorVariant,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub branch: Option<SmartBranch>,
    pub alpha_used: Option<f64>,
    /// `P̂_θ̂(A)` on the fit's own stream.
    pub region_probability: f64,
    pub prob_std_error: f64,
    /// Restricted fits: the constraint is slack at the solution.
    pub interior: Option<bool>,
    /// Objective value after each iteration.
    pub history: Vec<f64>,
}

/// Frame-coordinate result of one optimizer run.
#[derive(Debug, Clone)]
struct Core {
    theta: EllipticalParams,
    value: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

const MIN_EIG: f64 = 1e-10;
const MAX_LOCATION: f64 = 1e8;
const MAX_EIG: f64 = 1e8;
const MIN_PROB: f64 = 1e-8;
/// Terminal guard for runs that stall on the way to the boundary.
const DRIFT: f64 = 1e6;

fn objective_for(sample: &TrimmedSample, family: &RadialFamily, cfg: &FitConfig, variant: Variant) -> Objective {
    let draws = cfg.em_mc_draws.unwrap_or_else(|| Objective::default_draws(sample.n_inside()));
    Objective::with_draws(variant, *family, sample.clone(), cfg.seed, draws)
}

fn check_sample(sample: &TrimmedSample, family: &RadialFamily) -> Result<()> {
    let p = sample.dim();
    let m = sample.n_inside();
    let needed = family.min_inside_count(p);
    if m < needed {
        return Err(Error::TooFewPoints { needed, found: m });
    }
    let mean = sample.inside().iter().fold(DVector::zeros(p), |a, x| a + x) / m as f64;
    let cov = sample.inside().iter().fold(DMatrix::zeros(p, p), |a: DMatrix<f64>, x| {
        let d = x - &mean;
        a + &d * d.transpose()
    }) / m as f64;
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(Error::DegenerateData("retained points are not in general position".into()));
    }
    Ok(())
}

fn initial(obj: &Objective, cfg: &FitConfig) -> Result<EllipticalParams> {
    match &cfg.init {
        Init::FromRegion => Ok(obj.initial_frame_params()),
        Init::UserSupplied(t) => {
            if t.dim() != obj.dim() {
                return Err(Error::DimensionMismatch { expected: obj.dim(), found: t.dim() });
            }
            obj.frame().to_frame(t)
        }
    }
}

/// Aligned frame parameters with mass `coverage` on the unit ball.
fn aligned_frame(obj: &Objective, coverage: f64) -> EllipticalParams {
    let p = obj.dim();
    let rho = obj.family().radius_quantile(coverage, p);
    EllipticalParams::new(DVector::zeros(p), DMatrix::identity(p, p) / (rho * rho)).expect("SPD")
}

fn eig_range(theta: &EllipticalParams) -> (f64, f64) {
    let e = theta.sigma().symmetric_eigenvalues();
    e.iter().fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)))
}

fn boundary_message(theta: &EllipticalParams, prob: f64, improving: bool) -> Option<String> {
    let (lo, hi) = eig_range(theta);
    let loc = theta.mu().norm();
    if lo < MIN_EIG {
        Some(format!("scatter collapsing (smallest eigenvalue {lo:.3e} in region units)"))
    } else if hi > MAX_EIG {
        Some(format!("scatter exploding (largest eigenvalue {hi:.3e} in region units)"))
    } else if loc > MAX_LOCATION {
        Some(format!("location diverging (distance {loc:.3e} in region units)"))
    } else if prob < MIN_PROB && improving {
        Some(format!("region probability vanishing ({prob:.3e}) while the likelihood still increases"))
    } else {
        None
    }
}

fn drifted(theta: &EllipticalParams) -> Option<String> {
    let (lo, hi) = eig_range(theta);
    let loc = theta.mu().norm();
    if hi > DRIFT || loc > DRIFT || lo < 1.0 / DRIFT / DRIFT {
        Some(format!(
            "optimizer stalled far from the region (location {loc:.3e}, eigenvalues [{lo:.3e}, {hi:.3e}])"
        ))
    } else {
        None
    }
}

fn bfgs_opts(cfg: &FitConfig) -> BfgsOptions {
    BfgsOptions { max_iter: cfg.max_iter, step_tol: 0.25 * cfg.param_tol }
}

fn params(p: usize, w: &[f64]) -> Option<EllipticalParams> {
    EllipticalParams::from_unconstrained(p, w).ok()
}

/// Truncated objective (negated) with a barrier `w log(P - α)` when `barrier` is set.
fn neg_truncated(obj: &Objective, w: &[f64], barrier: Option<(f64, f64)>) -> Option<(f64, Vec<f64>)> {
    let p = obj.dim();
    let theta = params(p, w)?;
    let e = obj.eval_frame(&theta, true);
    let pa = e.prob.prob;
    if !(pa > 0.0) {
        return None;
    }
    let m = obj.sample().n_inside() as f64;
    let mut v = e.sum_logf - m * pa.ln();
    let mut coef = -m / pa;
    if let Some((weight, alpha)) = barrier {
        if !(pa > alpha) {
            return None;
        }
        v += weight * (pa - alpha).ln();
        coef += weight / (pa - alpha);
    }
    let g = e.grad_logf.iter().zip(&e.grad_prob).map(|(a, b)| -(a + coef * b)).collect();
    v.is_finite().then_some((-v, g))
}

fn neg_censored(obj: &Objective, w: &[f64]) -> Option<(f64, Vec<f64>)> {
    let p = obj.dim();
    let theta = params(p, w)?;
    let e = obj.eval_frame(&theta, true);
    let n_out = obj.sample().n_outside() as f64;
    let mut v = e.sum_logf;
    let mut coef = 0.0;
    if n_out > 0.0 {
        let pc = e.prob.complement;
        if !(pc > 0.0) {
            return None;
        }
        v += n_out * pc.ln();
        coef = -n_out / pc;
    }
    let g = e.grad_logf.iter().zip(&e.grad_prob).map(|(a, b)| -(a + coef * b)).collect();
    v.is_finite().then_some((-v, g))
}

fn truncated_core(obj: &Objective, cfg: &FitConfig, start: &EllipticalParams) -> Result<Core> {
    let p = obj.dim();
    let x0 = start.to_unconstrained();
    let mut last = f64::INFINITY;
    let res = minimize(&x0, |w| neg_truncated(obj, w, None), &bfgs_opts(cfg), |w, v| {
        let theta = params(p, w)?;
        let improving = v < last;
        last = v;
        let prob = obj.eval_frame(&theta, false).prob.prob;
        boundary_message(&theta, prob, improving)
    })
    .ok_or_else(|| Error::Infeasible("region has zero probability at the starting point".into()))?;
    if let Stop::Monitor(msg) = &res.stop {
        return Err(Error::NonExistence(msg.clone()));
    }
    let theta = params(p, &res.x).ok_or(Error::NotPositiveDefinite)?;
    if let Some(msg) = drifted(&theta) {
        return Err(Error::NonExistence(msg));
    }
    Ok(Core {
        theta,
        value: -res.value,
        iterations: res.iterations,
        converged: res.stop == Stop::Converged,
        history: res.history.iter().map(|v| -v).collect(),
    })
}

fn censored_qn_core(obj: &Objective, cfg: &FitConfig, start: &EllipticalParams) -> Result<Core> {
    let p = obj.dim();
    let res = minimize(&start.to_unconstrained(), |w| neg_censored(obj, w), &bfgs_opts(cfg), |_, _| None)
        .ok_or_else(|| Error::Infeasible("censored likelihood undefined at the starting point".into()))?;
    let theta = params(p, &res.x).ok_or(Error::NotPositiveDefinite)?;
    Ok(Core {
        theta,
        value: -res.value,
        iterations: res.iterations,
        converged: res.stop == Stop::Converged,
        history: res.history.iter().map(|v| -v).collect(),
    })
}

/// One EM map for the censored model: the discarded points are completed by
/// their conditional moments on the complement of the region, using the same
/// fixed node set as the likelihood surrogate. Student-t scatter gets one
/// weighted fixed-point pass. Returns the update and the log-likelihood at `theta`.
fn em_map(obj: &Objective, theta: &EllipticalParams) -> Result<(EllipticalParams, f64)> {
    let p = obj.dim();
    let fam = *obj.family();
    let pts = obj.frame_points();
    let n_out = obj.sample().n_outside() as f64;
    let n = pts.len() as f64 + n_out;
    let mut z = vec![0.0; p];
    let k = Kernel::new(&fam, theta);
    let mu: Vec<f64> = theta.mu().iter().copied().collect();
    let sig: Vec<f64> = (0..p * p).map(|i| theta.sigma()[(i / p, i % p)]).collect();
    let mut ws = Vec::with_capacity(pts.len());
    let mut ll = 0.0;
    let (mut su, mut sud) = (0.0, vec![0.0; p]);
    for y in pts.iter() {
        let (lf, s) = k.log_f(y, &mut z);
        ll += lf;
        let u = fam.weight(s, p);
        ws.push(u);
        su += u;
        for i in 0..p {
            sud[i] += u * (y[i] - mu[i]);
        }
    }
    let (mut c0, mut c1, mut c2) = (0.0, vec![0.0; p], vec![0.0; p * p]);
    if n_out > 0.0 {
        let pc = obj.engine().probability(&k, None).complement;
        if !(pc > 0.0) {
            return Err(Error::EStepStarvation(format!(
                "estimated mass outside the region is {pc:.3e}; increase em_mc_draws"
            )));
        }
        ll += n_out * pc.ln();
        let mom = obj.engine().moments(&k, &sig);
        let scale = n_out / pc;
        c0 = scale * (1.0 - mom.m0);
        for i in 0..p {
            c1[i] = -scale * mom.m1[i];
        }
        for i in 0..p * p {
            c2[i] = scale * (sig[i] - mom.m2[i]);
        }
        if !(c0 > 0.0) {
            return Err(Error::EStepStarvation(
                "conditional weight on the complement is not positive; increase em_mc_draws".into(),
            ));
        }
    }
    let delta: Vec<f64> = (0..p).map(|i| (sud[i] + c1[i]) / (su + c0)).collect();
    let mu_new: Vec<f64> = (0..p).map(|i| mu[i] + delta[i]).collect();
    let mut s_new = DMatrix::zeros(p, p);
    for (y, u) in pts.iter().zip(&ws) {
        for i in 0..p {
            for j in 0..=i {
                s_new[(i, j)] += u * (y[i] - mu_new[i]) * (y[j] - mu_new[j]);
            }
        }
    }
    for i in 0..p {
        for j in 0..=i {
            s_new[(i, j)] += c2[i * p + j] - c1[i] * delta[j] - delta[i] * c1[j] + c0 * delta[i] * delta[j];
            s_new[(i, j)] /= n;
            s_new[(j, i)] = s_new[(i, j)];
        }
    }
    let next = EllipticalParams::new(DVector::from_vec(mu_new), s_new)
        .map_err(|_| Error::EStepStarvation("completed scatter is not positive definite".into()))?;
    Ok((next, ll))
}

fn censored_value(obj: &Objective, theta: &EllipticalParams) -> f64 {
    let e = obj.eval_frame(theta, false);
    let n_out = obj.sample().n_outside() as f64;
    e.sum_logf + if n_out > 0.0 { n_out * e.prob.complement.ln() } else { 0.0 }
}

fn from_natural(p: usize, v: &[f64]) -> Option<EllipticalParams> {
    let mut s = DMatrix::zeros(p, p);
    let mut k = p;
    for i in 0..p {
        for j in 0..=i {
            s[(i, j)] = v[k];
            s[(j, i)] = v[k];
            k += 1;
        }
    }
    EllipticalParams::new(DVector::from_row_slice(&v[..p]), s).ok()
}

/// EM accelerated by squared extrapolation: two plain maps define the
/// extrapolated point, which is kept only if it does not lower the likelihood.
/// `iterations` counts EM maps.
fn censored_em_core(obj: &Objective, cfg: &FitConfig, start: &EllipticalParams) -> Result<Core> {
    let p = obj.dim();
    let mut theta = start.clone();
    let mut history = Vec::new();
    let (mut maps, mut converged) = (0, false);
    let norm = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let max_abs = |a: &[f64]| a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    while maps < cfg.max_iter {
        let (t1, l0) = em_map(obj, &theta)?;
        let (t2, l1) = em_map(obj, &t1)?;
        maps += 2;
        history.push(l0);
        history.push(l1);
        let x0 = theta.natural_coords();
        let x1 = t1.natural_coords();
        let x2 = t2.natural_coords();
        let r: Vec<f64> = x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
        let d2: Vec<f64> = x2.iter().zip(&x1).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = d2.iter().zip(&r).map(|(a, b)| a - b).collect();
        // stop when the extrapolated distance to the fixed point of the plain map is small
        let step = max_abs(&d2);
        let rate = if max_abs(&r) > 0.0 { step / max_abs(&r) } else { 0.0 };
        let remaining = if rate < 1.0 { step / (1.0 - rate) } else { f64::INFINITY };
        if remaining < 0.25 * cfg.param_tol || step == 0.0 {
            theta = t2;
            converged = true;
            break;
        }
        let (nr, nv) = (norm(&r), norm(&v));
        let mut next = t2;
        if nv > 0.0 && maps < cfg.max_iter {
            let a = -(nr / nv).max(1.0);
            let xe: Vec<f64> = (0..x0.len()).map(|i| x0[i] - 2.0 * a * r[i] + a * a * v[i]).collect();
            if let Some(te) = from_natural(p, &xe) {
                if let Ok((t3, le)) = em_map(obj, &te) {
                    maps += 1;
                    if le >= l1 {
                        history.push(le);
                        next = t3;
                    }
                }
            }
        }
        theta = next;
    }
    let value = censored_value(obj, &theta);
    history.push(value);
    Ok(Core { theta, value, iterations: maps, converged, history })
}

/// Builds the public result from a frame-coordinate run.
fn finish(
    obj: &Objective,
    core: Core,
    variant: EstimatorVariant,
    value_in_original: Option<f64>,
) -> Result<FitResult> {
    let frame = obj.frame();
    let shift = obj.sample().n_inside() as f64 * frame.log_jacobian();
    let theta_hat = frame.from_frame(&core.theta)?;
    let e = obj.eval_frame(&core.theta, false);
    Ok(FitResult {
        theta_hat,
        pi_hat: None,
        variant,
        loglik: value_in_original.unwrap_or(core.value + shift),
        iterations: core.iterations,
        converged: core.converged,
        branch: None,
        alpha_used: None,
        region_probability: e.prob.prob,
        prob_std_error: e.prob.std_error,
        interior: None,
        history: core.history.iter().map(|v| v + shift).collect(),
    })
}

/// MLE(t): maximizer of the truncated likelihood, or `NonExistence` when the
/// iterates run to the boundary of the parameter space.
pub fn fit_truncated(sample: &TrimmedSample, family: &RadialFamily, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    check_sample(sample, family)?;
    let obj = objective_for(sample, family, cfg, Variant::Truncated);
    truncated_on(&obj, cfg)
}

fn truncated_on(obj: &Objective, cfg: &FitConfig) -> Result<FitResult> {
    let start = initial(obj, cfg)?;
    let core = truncated_core(obj, cfg, &start)?;
    finish(obj, core, EstimatorVariant::T, None)
}

/// MLE(c) by EM (default) or direct quasi-Newton maximization.
pub fn fit_censored(sample: &TrimmedSample, family: &RadialFamily, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    check_sample(sample, family)?;
    let obj = objective_for(sample, family, cfg, Variant::Censored);
    censored_on(&obj, cfg)
}

fn censored_on(obj: &Objective, cfg: &FitConfig) -> Result<FitResult> {
    let start = initial(obj, cfg)?;
    let core = match cfg.optimizer {
        Optimizer::Em => censored_em_core(obj, cfg, &start)?,
        Optimizer::QuasiNewton => censored_qn_core(obj, cfg, &start)?,
    };
    let fresh = if cfg.fresh_loglik && obj.dim() > 1 && obj.sample().n_outside() > 0 {
        let big = obj.reseeded(derive_seed(cfg.seed, 0xC0FFEE), 4 * obj.draws_per_stratum());
        let theta = obj.frame().from_frame(&core.theta)?;
        Some(loglik_censored(&big, &theta)?)
    } else {
        None
    };
    finish(obj, core, EstimatorVariant::C, fresh)
}

/// MLE(r): truncated likelihood maximized over `{θ : P̂_θ(A) ≥ α}`.
pub fn fit_restricted(
    sample: &TrimmedSample,
    family: &RadialFamily,
    alpha: f64,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0,1), got {alpha}")));
    }
    check_sample(sample, family)?;
    let obj = objective_for(sample, family, cfg, Variant::Truncated);
    restricted_on(&obj, alpha, cfg)
}

fn restricted_on(obj: &Objective, alpha: f64, cfg: &FitConfig) -> Result<FitResult> {
    let start = match &cfg.init {
        Init::FromRegion => {
            let cov = obj.sample().empirical_inside_fraction().max(alpha + 0.25 * (1.0 - alpha));
            aligned_frame(obj, cov.min(0.999))
        }
        Init::UserSupplied(_) => initial(obj, cfg)?,
    };
    let p0 = obj.eval_frame(&start, false).prob;
    if !(p0.prob > alpha) {
        return Err(Error::Infeasible(format!(
            "starting point has region probability {:.4} below alpha = {alpha}",
            p0.prob
        )));
    }
    let margin = |se: f64| (3.0 * se).max(1e-6);
    // an interior maximum of the unconstrained problem is also the constrained one
    if let Ok(core) = truncated_core(obj, cfg, &start) {
        let e = obj.eval_frame(&core.theta, false).prob;
        if e.prob > alpha + margin(e.std_error) {
            let mut r = finish(obj, core, EstimatorVariant::R, None)?;
            r.alpha_used = Some(alpha);
            r.interior = Some(true);
            return Ok(r);
        }
    }
    let p = obj.dim();
    let m = obj.sample().n_inside().max(1) as f64;
    let mut x = start.to_unconstrained();
    let mut weight = 0.1 * m;
    let mut iterations = 0;
    let mut history = Vec::new();
    let mut converged = false;
    while weight > 1e-10 * m {
        let res = minimize(&x, |w| neg_truncated(obj, w, Some((weight, alpha))), &bfgs_opts(cfg), |_, _| None)
            .ok_or_else(|| Error::Infeasible("barrier undefined at the warm start".into()))?;
        iterations += res.iterations;
        converged = res.stop == Stop::Converged;
        x = res.x;
        let theta = params(p, &x).ok_or(Error::NotPositiveDefinite)?;
        let e = obj.eval_frame(&theta, false);
        history.push(e.sum_logf - m * e.prob.prob.ln());
        weight *= 0.1;
    }
    let theta = params(p, &x).ok_or(Error::NotPositiveDefinite)?;
    let e = obj.eval_frame(&theta, false);
    let value = e.sum_logf - obj.sample().n_inside() as f64 * e.prob.prob.ln();
    let core = Core { theta, value, iterations, converged, history };
    let mut r = finish(obj, core, EstimatorVariant::R, None)?;
    r.alpha_used = Some(alpha);
    r.interior = Some(e.prob.prob > alpha + margin(e.prob.std_error));
    Ok(r)
}

/// Smart-model value in frame coordinates.
fn smart_value(obj: &Objective, theta: &EllipticalParams, pi: f64) -> f64 {
    let e = obj.eval_frame(theta, false);
    let m = obj.sample().n_inside() as f64;
    let n_out = obj.sample().n_outside() as f64;
    let mut v = e.sum_logf + m * (-pi).ln_1p();
    if n_out > 0.0 {
        v += n_out * ((1.0 - pi) * e.prob.complement + pi).ln();
    }
    v
}

/// MLE(s) through the closed-form decision rule: the truncated estimate with
/// `π̂ = π*(θ̂_t)` when it exists and `π* ≥ 0`, otherwise the censored estimate
/// with `π̂ = 0`. When the truncated estimate does not exist, the natural
/// restricted estimate (`α = Pₙ(A)`) competes with the censored one.
pub fn fit_smart(sample: &TrimmedSample, family: &RadialFamily, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    check_sample(sample, family)?;
    let obj = objective_for(sample, family, cfg, Variant::Smart);
    let pn = sample.empirical_inside_fraction();
    let shift = sample.n_inside() as f64 * obj.frame().log_jacobian();
    let censored = |obj: &Objective| -> Result<FitResult> {
        let mut c = censored_on(&obj.with_variant(Variant::Censored), cfg)?;
        let frame_theta = obj.frame().to_frame(&c.theta_hat)?;
        c.variant = EstimatorVariant::S;
        c.pi_hat = Some(0.0);
        c.branch = Some(SmartBranch::CensoredBranch);
        c.loglik = smart_value(obj, &frame_theta, 0.0) + shift;
        Ok(c)
    };
    match truncated_on(&obj, cfg) {
        Ok(t) => {
            let pi = pi_star_from(t.region_probability, pn)?;
            if pi >= 0.0 {
                let mut r = t;
                let frame_theta = obj.frame().to_frame(&r.theta_hat)?;
                r.variant = EstimatorVariant::S;
                r.pi_hat = Some(pi);
                r.branch = Some(SmartBranch::TruncatedBranch);
                r.loglik = smart_value(&obj, &frame_theta, pi) + shift;
                Ok(r)
            } else {
                censored(&obj)
            }
        }
        Err(Error::NonExistence(_)) => {
            let c = censored(&obj)?;
            if pn >= 1.0 {
                return Ok(c);
            }
            let restricted = restricted_on(&obj, pn, &FitConfig { init: Init::FromRegion, ..cfg.clone() });
            match restricted {
                Ok(mut r) => {
                    let pi = pi_star_from(r.region_probability, pn)?.max(0.0);
                    let frame_theta = obj.frame().to_frame(&r.theta_hat)?;
                    let v = smart_value(&obj, &frame_theta, pi) + shift;
                    if v > c.loglik {
                        r.variant = EstimatorVariant::S;
                        r.pi_hat = Some(pi);
                        r.branch = Some(SmartBranch::RestrictedBranch);
                        r.loglik = v;
                        Ok(r)
                    } else {
                        Ok(c)
                    }
                }
                Err(_) => Ok(c),
            }
        }
        Err(e) => Err(e),
    }
}

/// Dispatches on the variant tag; `alpha` is required for the restricted fit.
pub fn fit(
    variant: EstimatorVariant,
    sample: &TrimmedSample,
    family: &RadialFamily,
    alpha: Option<f64>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    match variant {
        EstimatorVariant::T => fit_truncated(sample, family, cfg),
        EstimatorVariant::C => fit_censored(sample, family, cfg),
        EstimatorVariant::R => {
            let a = alpha.ok_or_else(|| Error::InvalidArgument("restricted fit needs alpha".into()))?;
            fit_restricted(sample, family, a, cfg)
        }
        EstimatorVariant::S => fit_smart(sample, family, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ellipsoid::Ellipsoid;
    use crate::mve::{sample_mve, trim, MveConfig};
    use crate::sampling::sample;

    fn gauss() -> RadialFamily {
        RadialFamily::Gaussian
    }

    fn standard_sample(p: usize, n: usize, seed: u64) -> Vec<DVector<f64>> {
        sample(&gauss(), &EllipticalParams::standard(p), n, seed)
    }

    /// Truncated normal log-likelihood on [a, b].
    fn trunc_ll(xs: &[f64], a: f64, b: f64, mu: f64, sd: f64) -> f64 {
        let fam = gauss();
        let mass = fam.cdf_1d((b - mu) / sd) - fam.cdf_1d((a - mu) / sd);
        xs.iter()
            .map(|x| -0.5 * ((x - mu) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum::<f64>()
            - xs.len() as f64 * mass.ln()
    }

    fn golden(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
        let r = 0.5 * (5f64.sqrt() - 1.0);
        let (mut c, mut d) = (hi - r * (hi - lo), lo + r * (hi - lo));
        let (mut fc, mut fd) = (f(c), f(d));
        while hi - lo > 1e-11 {
            if fc > fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - r * (hi - lo);
                fc = f(c);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + r * (hi - lo);
                fd = f(d);
            }
        }
        0.5 * (lo + hi)
    }

    /// Nested golden-section maximizer over (μ, log σ).
    fn grid_oracle(xs: &[f64], a: f64, b: f64) -> (f64, f64) {
        let profile = |mu: f64| {
            let ls = golden(-3.0, 2.0, |ls| trunc_ll(xs, a, b, mu, ls.exp()));
            (ls, trunc_ll(xs, a, b, mu, ls.exp()))
        };
        let mu = golden(a, b, |mu| profile(mu).1);
        (mu, (2.0 * profile(mu).0).exp())
    }

    fn scalars(s: &TrimmedSample) -> Vec<f64> {
        s.inside().iter().map(|x| x[0]).collect()
    }

    #[test]
    fn truncated_matches_one_dimensional_oracle() {
        let cfg = FitConfig::default();
        for (seed, (a, b), shift) in [(1u64, (-1.5, 1.5), 0.0), (2, (-1.0, 2.0), 0.3), (3, (-0.8, 0.8), -0.2)] {
            let data: Vec<_> = standard_sample(1, 400, seed).into_iter().map(|x| x.add_scalar(shift)).collect();
            let s = trim(&data, &Ellipsoid::interval(a, b).unwrap()).unwrap();
            let fit = fit_truncated(&s, &gauss(), &cfg).unwrap();
            let (mu, var) = grid_oracle(&scalars(&s), a, b);
            assert!(fit.converged);
            assert!((fit.theta_hat.mu()[0] - mu).abs() < 2.0 * cfg.param_tol, "{} vs {mu}", fit.theta_hat.mu()[0]);
            assert!((fit.theta_hat.sigma()[(0, 0)] - var).abs() < 2.0 * cfg.param_tol);
        }
    }

    #[test]
    fn truncated_inflates_symmetric_variance() {
        let data: Vec<_> = standard_sample(1, 300, 7);
        let mut xs: Vec<f64> = data.iter().map(|x| x[0]).filter(|x| x.abs() <= 1.2).collect();
        let n = xs.len();
        xs.extend(xs.clone().iter().map(|x| -x));
        let pts: Vec<_> = xs.iter().map(|x| DVector::from_element(1, *x)).collect();
        let s = TrimmedSample::new(pts, 2 * (300 - n), Ellipsoid::interval(-1.2, 1.2).unwrap()).unwrap();
        let fit = fit_truncated(&s, &gauss(), &FitConfig::default()).unwrap();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        assert!(fit.theta_hat.mu()[0].abs() < 1e-6);
        assert!(fit.theta_hat.sigma()[(0, 0)] > var);
    }

    #[test]
    fn untruncated_fit_is_classical() {
        let data = standard_sample(2, 200, 11);
        let region = Ellipsoid::new(DVector::zeros(2), DMatrix::identity(2, 2), 60.0).unwrap();
        let s = trim(&data, &region).unwrap();
        let n = data.len() as f64;
        let mean = data.iter().fold(DVector::zeros(2), |a, x| a + x) / n;
        let cov = data.iter().fold(DMatrix::zeros(2, 2), |a: DMatrix<f64>, x| a + (x - &mean) * (x - &mean).transpose()) / n;
        let cfg = FitConfig::default();
        let t = fit_truncated(&s, &gauss(), &cfg).unwrap();
        assert!((t.theta_hat.mu() - &mean).amax() < cfg.param_tol);
        assert!((t.theta_hat.sigma() - &cov).amax() < cfg.param_tol);
        let c = fit_censored(&s, &gauss(), &cfg).unwrap();
        assert!((c.theta_hat.mu() - &mean).amax() < 1e-12);
        assert!((c.theta_hat.sigma() - &cov).amax() < 1e-12);
    }

    fn two_edge_sample() -> TrimmedSample {
        let xs = [-0.99, -0.985, -0.98, -0.975, -0.97, 0.97, 0.975, 0.98, 0.985, 0.99];
        let pts = xs.iter().map(|x| DVector::from_element(1, *x)).collect();
        TrimmedSample::new(pts, 6, Ellipsoid::interval(-1.0, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn edge_clusters_have_no_truncated_maximum() {
        let s = two_edge_sample();
        let xs = scalars(&s);
        // the profile over μ keeps increasing with σ
        let prof: Vec<f64> = [1.0f64, 10.0, 100.0, 1000.0]
            .iter()
            .map(|sd| {
                let mu = golden(-5.0, 5.0, |m| trunc_ll(&xs, -1.0, 1.0, m, *sd));
                trunc_ll(&xs, -1.0, 1.0, mu, *sd)
            })
            .collect();
        assert!(prof.windows(2).all(|w| w[1] > w[0]), "{prof:?}");
        match fit_truncated(&s, &gauss(), &FitConfig::default()) {
            Err(Error::NonExistence(_)) => {}
            other => panic!("expected NonExistence, got {other:?}"),
        }
    }

    #[test]
    fn restricted_boundary_solution() {
        let s = two_edge_sample();
        let alpha = s.empirical_inside_fraction();
        let r = fit_restricted(&s, &gauss(), alpha, &FitConfig::default()).unwrap();
        assert_eq!(r.interior, Some(false));
        assert!(r.region_probability >= alpha && r.region_probability <= alpha + 1e-6, "{}", r.region_probability);
        let x = scalars(&s);
        let sd = r.theta_hat.sigma()[(0, 0)].sqrt();
        let mu = r.theta_hat.mu()[0];
        // oracle: along the constraint boundary the fit is a maximum
        let on_boundary = |m: f64| {
            let fam = gauss();
            let sd = golden(1e-3, 50.0, |sd| -((fam.cdf_1d((1.0 - m) / sd) - fam.cdf_1d((-1.0 - m) / sd)) - alpha).abs());
            trunc_ll(&x, -1.0, 1.0, m, sd)
        };
        let best = golden(-1.0, 1.0, on_boundary);
        assert!((best - mu).abs() < 1e-3, "{best} vs {mu}");
        assert!((on_boundary(best) - trunc_ll(&x, -1.0, 1.0, mu, sd)).abs() < 1e-6);
    }

    #[test]
    fn restricted_interior_matches_truncated() {
        let data = standard_sample(2, 300, 5);
        let region = sample_mve(&data, &MveConfig::with_seed(5)).unwrap();
        let s = trim(&data, &region).unwrap();
        let cfg = FitConfig::default();
        let t = fit_truncated(&s, &gauss(), &cfg).unwrap();
        for alpha in [0.25, 1e-6] {
            let r = fit_restricted(&s, &gauss(), alpha, &cfg).unwrap();
            assert_eq!(r.interior, Some(true));
            let d = r.theta_hat.natural_coords().iter().zip(t.theta_hat.natural_coords()).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            assert!(d < 2.0 * cfg.param_tol, "{d}");
        }
        assert!(matches!(fit_restricted(&s, &gauss(), 1.0, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn censored_consistent_in_one_dimension() {
        let data = standard_sample(1, 2000, 13);
        let s = trim(&data, &Ellipsoid::interval(-2.0, 2.0).unwrap()).unwrap();
        let c = fit_censored(&s, &gauss(), &FitConfig::default()).unwrap();
        assert!(c.converged);
        assert!(c.theta_hat.mu()[0].abs() < 0.05);
        assert!((c.theta_hat.sigma()[(0, 0)] - 1.0).abs() < 0.05);
    }

    #[test]
    fn em_and_quasi_newton_agree() {
        for (p, fam) in [(1usize, gauss()), (2, gauss()), (2, RadialFamily::student_t(5.0).unwrap())] {
            let theta = EllipticalParams::standard(p);
            let data = sample(&fam, &theta, 600, 17 + p as u64);
            let region = sample_mve(&data, &MveConfig::with_seed(1)).unwrap();
            let s = trim(&data, &region).unwrap();
            let em = fit_censored(&s, &fam, &FitConfig::default()).unwrap();
            let qn = fit_censored(&s, &fam, &FitConfig { optimizer: Optimizer::QuasiNewton, ..FitConfig::default() }).unwrap();
            assert!(em.converged && qn.converged);
            let d = em.theta_hat.natural_coords().iter().zip(qn.theta_hat.natural_coords()).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            assert!(d < 2e-6, "p={p} {fam}: {d}");
            // EM ascent on its own stream
            assert!(em.history.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{:?}", em.history);
        }
    }

    #[test]
    fn smart_takes_censored_branch_without_outside_points() {
        let data = standard_sample(2, 300, 23);
        let mve = sample_mve(&data, &MveConfig::with_seed(23)).unwrap();
        let region = crate::mve::enlarge(&mve, &gauss(), 0.99).unwrap();
        let inside: Vec<_> = data.into_iter().filter(|x| region.contains(x.as_slice())).collect();
        let s = TrimmedSample::new(inside, 0, region).unwrap();
        let cfg = FitConfig::default();
        let r = fit_smart(&s, &gauss(), &cfg).unwrap();
        assert_eq!(r.branch, Some(SmartBranch::CensoredBranch));
        assert_eq!(r.pi_hat, Some(0.0));
        let c = fit_censored(&s, &gauss(), &cfg).unwrap();
        assert_eq!(r.theta_hat, c.theta_hat);
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in [EstimatorVariant::T, EstimatorVariant::C, EstimatorVariant::R, EstimatorVariant::S] {
            assert_eq!(v.to_string().parse::<EstimatorVariant>().unwrap(), v);
        }
        assert!("x".parse::<EstimatorVariant>().is_err());
    }

    #[test]
    fn rejects_small_or_degenerate_samples() {
        let region = Ellipsoid::new(DVector::zeros(2), DMatrix::identity(2, 2), 10.0).unwrap();
        let few = TrimmedSample::new(standard_sample(2, 3, 1), 0, region.clone()).unwrap();
        assert!(matches!(fit_truncated(&few, &gauss(), &FitConfig::default()), Err(Error::TooFewPoints { .. })));
        let line: Vec<_> = (0..10).map(|i| DVector::from_vec(vec![i as f64 * 0.1, i as f64 * 0.2])).collect();
        let s = TrimmedSample::new(line, 0, region).unwrap();
        assert!(matches!(fit_censored(&s, &gauss(), &FitConfig::default()), Err(Error::DegenerateData(_))));
    }
}
