//! Simulation experiments: breakdown under replacement outliers, consistency
//! and rate curves on clean and gross-error data.
//!
//! Every replicate draws its data, its MVE subsets and its Monte-Carlo streams
//! from seeds derived from the plan seed and the replicate index, so a report
//! is a pure function of the plan.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ellipsoid::Ellipsoid;
use crate::error::{Error, Result};
use crate::estimators::{fit_censored, fit_restricted, fit_smart, fit_truncated, EstimatorVariant, FitConfig, Optimizer};
use crate::family::RadialFamily;
use crate::mve::{enlarge, mve_cloud, trim, MveConfig};
use crate::density::PointCloud;
use crate::params::EllipticalParams;
use crate::sampling::{derive_seed, rng, sample, unit_direction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    Clean,
    /// A fraction `pi0` of the sample (binomially drawn) sits uniformly on the
    /// sphere of the given radius.
    GemRing { pi0: f64, radius: f64 },
    /// `count` points are replaced by a tight cluster at `magnitude` along a
    /// random direction.
    ReplacementOutliers { count: usize, magnitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub scenario: Scenario,
    pub family: RadialFamily,
    pub p: usize,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub estimator_variants: Vec<EstimatorVariant>,
    /// Enlarge the sample MVE to this model coverage before fitting.
    #[serde(default)]
    pub coverage: Option<f64>,
    /// Level of the restricted fit; `None` uses the empirical inside fraction.
    #[serde(default)]
    pub alpha_restrict: Option<f64>,
    /// Draws per stratum of the probability surrogate.
    #[serde(default)]
    pub mc_draws: Option<usize>,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
}

fn default_optimizer() -> Optimizer {
    Optimizer::Em
}

impl ExperimentPlan {
    pub fn new(scenario: Scenario, family: RadialFamily, p: usize, n_grid: Vec<usize>, replicates: usize, seed: u64) -> Self {
        ExperimentPlan {
            scenario,
            family,
            p,
            n_grid,
            replicates,
            seed,
            estimator_variants: vec![EstimatorVariant::S, EstimatorVariant::C],
            coverage: None,
            alpha_restrict: None,
            mc_draws: None,
            optimizer: Optimizer::Em,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.p == 0 || self.replicates == 0 || self.n_grid.is_empty() || self.estimator_variants.is_empty() {
            return bad("dimension, replicates, n_grid and estimator_variants must be non-empty".into());
        }
        if let Some(n) = self.n_grid.iter().find(|n| **n <= self.p + 1) {
            return bad(format!("sample size {n} is too small for p = {}", self.p));
        }
        if let Some(c) = self.coverage {
            if !(0.5..1.0).contains(&c) {
                return bad(format!("coverage must lie in [0.5, 1), got {c}"));
            }
        }
        if let Some(a) = self.alpha_restrict {
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("alpha_restrict must lie in (0,1), got {a}"));
            }
        }
        if self.mc_draws == Some(0) {
            return bad("mc_draws must be positive".into());
        }
        match self.scenario {
            Scenario::Clean => {}
            Scenario::GemRing { pi0, radius } => {
                if !(0.0..0.5).contains(&pi0) {
                    return bad(format!("pi0 must lie in [0, 1/2), got {pi0}"));
                }
                let r_half = self.family.radius_quantile(0.5, self.p);
                if !(radius > r_half) {
                    return bad(format!("ring radius {radius} must exceed the central half-mass radius {r_half:.4}"));
                }
            }
            Scenario::ReplacementOutliers { count, .. } => {
                if let Some(n) = self.n_grid.iter().find(|n| **n <= count) {
                    return bad(format!("cannot replace {count} of {n} points"));
                }
            }
        }
        Ok(())
    }

    fn truth(&self) -> EllipticalParams {
        EllipticalParams::standard(self.p)
    }

    fn pi0(&self) -> f64 {
        match self.scenario {
            Scenario::GemRing { pi0, .. } => pi0,
            _ => 0.0,
        }
    }

    fn replicate_seed(&self, n_index: usize, rep: usize) -> u64 {
        derive_seed(derive_seed(self.seed, n_index as u64), rep as u64)
    }
}

/// Breakdown thresholds: `‖μ̂‖` beyond `location` times the true scale, or a
/// condition number of `Σ̂` beyond `condition`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlowupThreshold {
    pub location: f64,
    pub condition: f64,
}

impl Default for BlowupThreshold {
    fn default() -> Self {
        BlowupThreshold { location: 100.0, condition: 1e6 }
    }
}

impl BlowupThreshold {
    pub fn broken(&self, theta: &EllipticalParams, truth: &EllipticalParams) -> bool {
        let scale = truth.scale().sqrt();
        let eig = theta.sigma().symmetric_eigenvalues();
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
        (theta.mu() - truth.mu()).norm() > self.location * scale || !(hi / lo <= self.condition)
    }
}

/// Data of one replicate: the sample and the indices of planted contaminants.
pub fn scenario_sample(plan: &ExperimentPlan, n: usize, seed: u64) -> (Vec<DVector<f64>>, Vec<usize>) {
    let p = plan.p;
    let mut data = sample(&plan.family, &plan.truth(), n, derive_seed(seed, 1));
    let mut r = rng(derive_seed(seed, 2));
    let mut dir = vec![0.0; p];
    let planted = match plan.scenario {
        Scenario::Clean => Vec::new(),
        Scenario::GemRing { pi0, radius } => {
            let k = if pi0 > 0.0 { Binomial::new(n as u64, pi0).expect("valid").sample(&mut r) as usize } else { 0 };
            for x in data.iter_mut().take(k) {
                unit_direction(&mut r, &mut dir);
                *x = DVector::from_fn(p, |i, _| radius * dir[i]);
            }
            (0..k).collect()
        }
        Scenario::ReplacementOutliers { count, magnitude } => {
            unit_direction(&mut r, &mut dir);
            for x in data.iter_mut().take(count) {
                *x = DVector::from_fn(p, |i, _| magnitude * dir[i] + (r.random::<f64>() - 0.5));
            }
            (0..count).collect()
        }
    };
    (data, planted)
}

/// Outcome of one estimator on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFit {
    pub variant: EstimatorVariant,
    /// `(μ, vech Σ)`; absent when the fit failed.
    pub estimate: Option<Vec<f64>>,
    pub pi_hat: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
    pub broken: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    pub mve_center: Vec<f64>,
    /// `P_θ₀`-mass of the symmetric difference between the sample MVE and the
    /// theoretical one.
    pub mve_symmetric_difference: f64,
    pub fits: Vec<ReplicateFit>,
}

fn cloud(data: &[DVector<f64>], p: usize) -> PointCloud {
    let mut c = PointCloud::with_capacity(p, data.len());
    for x in data {
        c.push(x.as_slice());
    }
    c
}

fn symmetric_difference(plan: &ExperimentPlan, region: &Ellipsoid, seed: u64) -> f64 {
    const DRAWS: usize = 20_000;
    let truth = plan.truth();
    let theoretical = Ellipsoid::from_params(&truth, plan.family.radius_quantile(0.5, plan.p));
    let xs = sample(&plan.family, &truth, DRAWS, seed);
    xs.iter().filter(|x| region.contains(x.as_slice()) != theoretical.contains(x.as_slice())).count() as f64 / DRAWS as f64
}

fn run_replicate(plan: &ExperimentPlan, n_index: usize, rep: usize, threshold: &BlowupThreshold) -> ReplicateOutcome {
    let n = plan.n_grid[n_index];
    let seed = plan.replicate_seed(n_index, rep);
    let (data, _) = scenario_sample(plan, n, seed);
    let truth = plan.truth();
    let mve = mve_cloud(&cloud(&data, plan.p), &MveConfig::with_seed(derive_seed(seed, 3)));
    let base = ReplicateOutcome {
        n,
        replicate: rep,
        seed,
        mve_center: Vec::new(),
        mve_symmetric_difference: f64::NAN,
        fits: Vec::new(),
    };
    let mve = match mve {
        Ok(m) => m,
        Err(e) => {
            let fits = plan
                .estimator_variants
                .iter()
                .map(|v| ReplicateFit { variant: *v, estimate: None, pi_hat: None, converged: false, error: Some(e.to_string()), broken: true })
                .collect();
            return ReplicateOutcome { fits, ..base };
        }
    };
    let sym = symmetric_difference(plan, &mve, derive_seed(seed, 4));
    let region = match plan.coverage {
        Some(c) => enlarge(&mve, &plan.family, c).unwrap_or_else(|_| mve.clone()),
        None => mve.clone(),
    };
    let cfg = FitConfig {
        seed: derive_seed(seed, 5),
        em_mc_draws: plan.mc_draws,
        optimizer: plan.optimizer,
        fresh_loglik: false,
        ..FitConfig::default()
    };
    let fits = match trim(&data, &region) {
        Err(e) => plan
            .estimator_variants
            .iter()
            .map(|v| ReplicateFit { variant: *v, estimate: None, pi_hat: None, converged: false, error: Some(e.to_string()), broken: true })
            .collect(),
        Ok(s) => plan
            .estimator_variants
            .iter()
            .map(|v| {
                let res = match v {
                    EstimatorVariant::T => fit_truncated(&s, &plan.family, &cfg),
                    EstimatorVariant::C => fit_censored(&s, &plan.family, &cfg),
                    EstimatorVariant::R => {
                        let a = plan.alpha_restrict.unwrap_or_else(|| s.empirical_inside_fraction()).min(1.0 - 1e-9);
                        fit_restricted(&s, &plan.family, a, &cfg)
                    }
                    EstimatorVariant::S => fit_smart(&s, &plan.family, &cfg),
                };
                match res {
                    Ok(f) => ReplicateFit {
                        variant: *v,
                        broken: threshold.broken(&f.theta_hat, &truth),
                        estimate: Some(f.theta_hat.natural_coords()),
                        pi_hat: f.pi_hat,
                        converged: f.converged,
                        error: None,
                    },
                    Err(e) => ReplicateFit { variant: *v, estimate: None, pi_hat: None, converged: false, error: Some(e.to_string()), broken: true },
                }
            })
            .collect(),
    };
    ReplicateOutcome { mve_center: mve.center().iter().copied().collect(), mve_symmetric_difference: sym, fits, ..base }
}

/// Summary of one `(n, estimator)` cell over replicates that produced an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub n: usize,
    pub variant: EstimatorVariant,
    pub replicates: usize,
    pub failures: usize,
    pub non_converged: usize,
    /// Per coordinate of `(μ, vech Σ)`.
    pub bias: Vec<f64>,
    pub variance: Vec<f64>,
    pub mse: Vec<f64>,
    pub n_mse: Vec<f64>,
    pub mean_error_norm: f64,
    pub mean_location_norm: f64,
    pub mean_scatter_max_error: f64,
    pub mean_pi_hat: Option<f64>,
    pub mean_abs_pi_error: Option<f64>,
    /// Failed fits count as broken.
    pub break_rate: f64,
}

/// Raw-MVE diagnostics per sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MveSummary {
    pub n: usize,
    pub center_mse: f64,
    /// `n^{2/3} · MSE` of the first center coordinate.
    pub center_n23_mse: f64,
    pub center_n_mse: f64,
    pub mean_symmetric_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub plan: ExperimentPlan,
    pub threshold: BlowupThreshold,
    pub cells: Vec<CellSummary>,
    pub mve: Vec<MveSummary>,
    pub replicates: Vec<ReplicateOutcome>,
}

impl ExperimentReport {
    pub fn cell(&self, n: usize, variant: EstimatorVariant) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.n == n && c.variant == variant)
    }

    /// `max / min` of `n · MSE` for one coordinate across the grid.
    pub fn n_mse_ratio(&self, variant: EstimatorVariant, coordinate: usize) -> Option<f64> {
        let vals: Vec<f64> = self.cells.iter().filter(|c| c.variant == variant).filter_map(|c| c.n_mse.get(coordinate).copied()).collect();
        if vals.is_empty() {
            return None;
        }
        let (lo, hi) = vals.iter().fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
        Some(hi / lo)
    }

    /// `n · MSE` varies by less than a factor 2 over the grid.
    pub fn rate_is_flat(&self, variant: EstimatorVariant, coordinate: usize) -> bool {
        self.n_mse_ratio(variant, coordinate).is_some_and(|r| r < 2.0)
    }

    /// One row per cell; vector columns are expanded per coordinate.
    pub fn to_csv(&self) -> String {
        let q = self.cells.first().map_or(0, |c| c.bias.len());
        let mut out = String::from("n,variant,replicates,failures,non_converged,mean_error_norm,mean_location_norm,mean_scatter_max_error,mean_pi_hat,mean_abs_pi_error,break_rate");
        for name in ["bias", "variance", "mse", "n_mse"] {
            for i in 0..q {
                out.push_str(&format!(",{name}_{i}"));
            }
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}",
                c.n,
                c.variant,
                c.replicates,
                c.failures,
                c.non_converged,
                c.mean_error_norm,
                c.mean_location_norm,
                c.mean_scatter_max_error,
                opt(c.mean_pi_hat),
                opt(c.mean_abs_pi_error),
                c.break_rate
            ));
            for v in [&c.bias, &c.variance, &c.mse, &c.n_mse] {
                for i in 0..q {
                    out.push_str(&format!(",{}", v.get(i).map_or(String::new(), |x| format!("{x}"))));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn summarize(plan: &ExperimentPlan, threshold: BlowupThreshold, outcomes: Vec<ReplicateOutcome>) -> ExperimentReport {
    let truth = plan.truth().natural_coords();
    let q = truth.len();
    let p = plan.p;
    let pi0 = plan.pi0();
    let mut cells = Vec::new();
    let mut mve = Vec::new();
    for &n in &plan.n_grid {
        let here: Vec<&ReplicateOutcome> = outcomes.iter().filter(|o| o.n == n).collect();
        for &variant in &plan.estimator_variants {
            let fits: Vec<&ReplicateFit> = here.iter().flat_map(|o| o.fits.iter().filter(|f| f.variant == variant)).collect();
            let ests: Vec<&Vec<f64>> = fits.iter().filter_map(|f| f.estimate.as_ref()).collect();
            let k = ests.len().max(1) as f64;
            let mean: Vec<f64> = (0..q).map(|i| ests.iter().map(|e| e[i]).sum::<f64>() / k).collect();
            let bias: Vec<f64> = (0..q).map(|i| mean[i] - truth[i]).collect();
            let variance: Vec<f64> = (0..q).map(|i| ests.iter().map(|e| (e[i] - mean[i]).powi(2)).sum::<f64>() / k).collect();
            let mse: Vec<f64> = (0..q).map(|i| ests.iter().map(|e| (e[i] - truth[i]).powi(2)).sum::<f64>() / k).collect();
            let norm = |e: &Vec<f64>, r: std::ops::Range<usize>| r.map(|i| (e[i] - truth[i]).powi(2)).sum::<f64>().sqrt();
            let mean_error_norm = ests.iter().map(|e| norm(e, 0..q)).sum::<f64>() / k;
            let mean_location_norm = ests.iter().map(|e| norm(e, 0..p)).sum::<f64>() / k;
            let mean_scatter_max_error =
                ests.iter().map(|e| (p..q).map(|i| (e[i] - truth[i]).abs()).fold(0.0f64, f64::max)).sum::<f64>() / k;
            let pis: Vec<f64> = fits.iter().filter_map(|f| f.pi_hat).collect();
            let (mean_pi_hat, mean_abs_pi_error) = if pis.is_empty() {
                (None, None)
            } else {
                let m = pis.len() as f64;
                (Some(pis.iter().sum::<f64>() / m), Some(pis.iter().map(|v| (v - pi0).abs()).sum::<f64>() / m))
            };
            cells.push(CellSummary {
                n,
                variant,
                replicates: fits.len(),
                failures: fits.iter().filter(|f| f.estimate.is_none()).count(),
                non_converged: fits.iter().filter(|f| f.estimate.is_some() && !f.converged).count(),
                n_mse: mse.iter().map(|v| v * n as f64).collect(),
                bias,
                variance,
                mse,
                mean_error_norm,
                mean_location_norm,
                mean_scatter_max_error,
                mean_pi_hat,
                mean_abs_pi_error,
                break_rate: fits.iter().filter(|f| f.broken).count() as f64 / fits.len().max(1) as f64,
            });
        }
        let centers: Vec<&Vec<f64>> = here.iter().map(|o| &o.mve_center).filter(|c| !c.is_empty()).collect();
        let k = centers.len().max(1) as f64;
        let c_mse = centers.iter().map(|c| (c[0] - truth[0]).powi(2)).sum::<f64>() / k;
        let syms: Vec<f64> = here.iter().map(|o| o.mve_symmetric_difference).filter(|v| v.is_finite()).collect();
        mve.push(MveSummary {
            n,
            center_mse: c_mse,
            center_n23_mse: c_mse * (n as f64).powf(2.0 / 3.0),
            center_n_mse: c_mse * n as f64,
            mean_symmetric_difference: syms.iter().sum::<f64>() / syms.len().max(1) as f64,
        });
    }
    ExperimentReport { plan: plan.clone(), threshold, cells, mve, replicates: outcomes }
}

fn run_all(plan: &ExperimentPlan, threshold: BlowupThreshold) -> Result<ExperimentReport> {
    plan.validate()?;
    let jobs: Vec<(usize, usize)> = (0..plan.n_grid.len()).flat_map(|i| (0..plan.replicates).map(move |r| (i, r))).collect();
    let outcomes: Vec<ReplicateOutcome> = jobs.par_iter().map(|&(i, r)| run_replicate(plan, i, r, &threshold)).collect();
    Ok(summarize(plan, threshold, outcomes))
}

/// Replacement-outlier stress test.
pub fn run_breakdown(plan: &ExperimentPlan, threshold: BlowupThreshold) -> Result<ExperimentReport> {
    match plan.scenario {
        Scenario::ReplacementOutliers { magnitude, .. } if magnitude >= 1e3 => run_all(plan, threshold),
        Scenario::ReplacementOutliers { magnitude, .. } => {
            Err(Error::InvalidArgument(format!("outlier magnitude {magnitude} is below 1e3")))
        }
        _ => Err(Error::InvalidArgument("breakdown runs need a replacement-outlier scenario".into())),
    }
}

/// Consistency curves over an increasing sample-size grid.
pub fn run_consistency(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    if plan.n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("n_grid must be strictly increasing".into()));
    }
    run_all(plan, BlowupThreshold::default())
}

/// `n · MSE` table; use [`ExperimentReport::rate_is_flat`] for the check.
pub fn run_rate(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    if matches!(plan.scenario, Scenario::ReplacementOutliers { .. }) {
        return Err(Error::InvalidArgument("rate runs need a clean or gross-error scenario".into()));
    }
    run_consistency(plan)
}

/// Scatter of a natural-coordinate estimate.
pub fn scatter_of(p: usize, estimate: &[f64]) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(p, p);
    let mut k = p;
    for i in 0..p {
        for j in 0..=i {
            s[(i, j)] = estimate[k];
            s[(j, i)] = estimate[k];
            k += 1;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn breakdown_plan(count: usize, reps: usize) -> ExperimentPlan {
        let mut plan = ExperimentPlan::new(
            Scenario::ReplacementOutliers { count, magnitude: 1e6 },
            RadialFamily::Gaussian,
            2,
            vec![20],
            reps,
            3,
        );
        plan.estimator_variants = vec![EstimatorVariant::S, EstimatorVariant::C, EstimatorVariant::R];
        plan
    }

    #[test]
    fn reports_are_deterministic() {
        let plan = breakdown_plan(4, 6);
        let a = run_breakdown(&plan, BlowupThreshold::default()).unwrap();
        let b = run_breakdown(&plan, BlowupThreshold::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn too_many_outliers_break_the_estimators() {
        let r = run_breakdown(&breakdown_plan(12, 20), BlowupThreshold::default()).unwrap();
        for c in &r.cells {
            assert!(c.break_rate > 0.5, "{:?}: {}", c.variant, c.break_rate);
        }
    }

    #[test]
    fn no_outliers_no_breakdown() {
        let r = run_breakdown(&breakdown_plan(0, 20), BlowupThreshold::default()).unwrap();
        for c in &r.cells {
            assert_eq!(c.break_rate, 0.0, "{:?}", c.variant);
            assert!(c.mean_location_norm < 1.0);
        }
    }

    #[test]
    fn contaminants_avoid_the_central_half() {
        let plan = ExperimentPlan::new(Scenario::GemRing { pi0: 0.2, radius: 4.0 }, RadialFamily::Gaussian, 3, vec![500], 1, 8);
        let central = Ellipsoid::from_params(&plan.truth(), RadialFamily::Gaussian.radius_quantile(0.5, 3));
        for seed in 0..5 {
            let (data, planted) = scenario_sample(&plan, 500, seed);
            assert!(!planted.is_empty());
            assert!(planted.iter().all(|&i| !central.contains(data[i].as_slice())));
        }
    }

    #[test]
    fn plans_are_validated() {
        let mut plan = ExperimentPlan::new(Scenario::GemRing { pi0: 0.6, radius: 10.0 }, RadialFamily::Gaussian, 2, vec![100], 1, 0);
        assert!(plan.validate().is_err());
        plan.scenario = Scenario::GemRing { pi0: 0.1, radius: 0.5 };
        assert!(plan.validate().is_err());
        plan.scenario = Scenario::Clean;
        plan.n_grid = vec![200, 100];
        assert!(run_consistency(&plan).is_err());
        assert!(run_breakdown(&plan, BlowupThreshold::default()).is_err());
        let low = breakdown_plan(3, 1);
        let low = ExperimentPlan { scenario: Scenario::ReplacementOutliers { count: 3, magnitude: 10.0 }, ..low };
        assert!(run_breakdown(&low, BlowupThreshold::default()).is_err());
    }

    #[test]
    fn plan_round_trips_through_json() {
        let plan = breakdown_plan(8, 100);
        let s = serde_json::to_string(&plan).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentPlan>(&s).unwrap(), plan);
    }
}
