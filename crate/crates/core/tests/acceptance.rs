//! Acceptance checks. Each test prints one `acceptance` line with its verdict
//! and the measured quantities, then asserts.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use elliptrim::ellipsoid::Ellipsoid;
use elliptrim::error::Error;
use elliptrim::estimators::{
    fit_censored, fit_smart, fit_truncated, EstimatorVariant as V, FitConfig, Optimizer, SmartBranch,
};
use elliptrim::family::RadialFamily;
use elliptrim::inference::{
    efficiency, info_censored, info_censored_complement, info_expected_truncated, info_gem, info_gem_profiled,
    probability_gradient_fd, Component, InfoMatrix,
};
use elliptrim::lab::{run_breakdown, run_consistency, scenario_sample, BlowupThreshold, ExperimentPlan, Scenario};
use elliptrim::mve::{sample_mve, trim, MveConfig, TrimmedSample};
use elliptrim::params::EllipticalParams;
use elliptrim::probability::{region_probability, McBudget};
use elliptrim::sampling::sample;

const G: RadialFamily = RadialFamily::Gaussian;

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    println!("acceptance {id:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "acceptance {id} failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_theta(p: usize, r: &mut ChaCha8Rng) -> EllipticalParams {
    let a = DMatrix::from_fn(p, p, |_, _| r.random::<f64>() - 0.5) + DMatrix::identity(p, p);
    let mu = DVector::from_fn(p, |_, _| 2.0 * r.random::<f64>() - 1.0);
    EllipticalParams::new(mu, &a * a.transpose()).unwrap()
}

/// `θ`-aligned region of random coverage.
fn aligned(fam: &RadialFamily, theta: &EllipticalParams, r: &mut ChaCha8Rng) -> Ellipsoid {
    let cov = 0.3 + 0.6 * r.random::<f64>();
    Ellipsoid::from_params(theta, fam.radius_quantile(cov, theta.dim()))
}

fn within_norm(a: &DMatrix<f64>, b: &DMatrix<f64>, se: &DMatrix<f64>, k: f64) -> (bool, f64) {
    let d = (a - b).norm();
    let s = se.norm();
    (d <= k * s + 1e-9 * a.norm().max(1.0), d / s.max(1e-300))
}

fn combined(a: &InfoMatrix, b: &InfoMatrix) -> DMatrix<f64> {
    a.std_error.zip_map(&b.std_error, |x, y| (x * x + y * y).sqrt())
}

#[test]
fn location_efficiency_cells() {
    let b = McBudget::new(50_000, 1);
    let t0 = Instant::now();
    let e = efficiency(&G, 2, V::C, None, Component::Mu, &b).unwrap();
    let t1 = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let e25 = efficiency(&G, 2, V::C, Some(0.025), Component::Mu, &b).unwrap();
    let t2 = t0.elapsed().as_secs_f64();
    let pass = (e.value - 0.1531).abs() <= 0.02 && (e25.value - 0.8821).abs() <= 0.02 && t1 < 120.0 && t2 < 120.0;
    verdict(
        1,
        "gaussian p=2 location efficiency of MLE(c)",
        pass,
        format!(
            "plain {:.4}±{:.4} (target 0.1531±0.02), alpha=0.025 {:.4}±{:.4} (target 0.8821±0.02), {t1:.1}s/{t2:.1}s",
            e.value, e.std_error, e25.value, e25.std_error
        ),
    );
}

#[test]
fn scatter_diagonal_efficiency_cells() {
    let b = McBudget::new(50_000, 1);
    let t = efficiency(&G, 2, V::T, None, Component::SigmaDiag, &b).unwrap();
    let c = efficiency(&G, 2, V::C, None, Component::SigmaDiag, &b).unwrap();
    let pass = (t.value - 0.0266).abs() <= 0.01 && (c.value - 0.2666).abs() <= 0.02;
    verdict(
        2,
        "gaussian p=2 scatter-diagonal efficiency",
        pass,
        format!(
            "MLE(t) {:.4}±{:.4} (target 0.0266±0.01), MLE(c) {:.4}±{:.4} (target 0.2666±0.02)",
            t.value, t.std_error, c.value, c.std_error
        ),
    );
}

#[test]
fn scatter_offdiagonal_efficiency_cells() {
    let b = McBudget::new(50_000, 1);
    let t = efficiency(&G, 2, V::T, None, Component::SigmaOffdiag, &b).unwrap();
    let c = efficiency(&G, 2, V::C, None, Component::SigmaOffdiag, &b).unwrap();
    let se = (t.std_error.powi(2) + c.std_error.powi(2)).sqrt();
    let agree = (t.value - c.value).abs() <= 3.0 * se + 1e-12;
    let pass = agree && (t.value - 0.0332).abs() <= 0.01 && (c.value - 0.0332).abs() <= 0.01;
    verdict(
        3,
        "gaussian p=2 off-diagonal efficiency, truncated = censored",
        pass,
        format!(
            "MLE(t) {:.4}±{:.4}, MLE(c) {:.4}±{:.4}, |diff| {:.2e} vs 3se {:.2e} (target 0.0332±0.01)",
            t.value,
            t.std_error,
            c.value,
            c.std_error,
            (t.value - c.value).abs(),
            3.0 * se
        ),
    );
}

#[test]
fn information_identities() {
    let mut r = rng(40);
    let b = McBudget::new(50_000, 4);
    let big = McBudget::new(200_000, 4);
    let (mut two_forms, mut block_inverse, mut gem_zero) = (0, 0, 0);
    let (mut worst_forms, mut worst_rel, mut worst_gem) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..20 {
        let p = 1 + i % 2;
        let fam = if i % 4 < 2 { G } else { RadialFamily::StudentT { nu: 3.0 + 4.0 * r.random::<f64>() } };
        let theta = random_theta(p, &mut r);
        let region = aligned(&fam, &theta, &mut r);
        let pi = 0.4 * r.random::<f64>();
        // two forms of the censored information
        let c = info_censored(&fam, &theta, &region, &b).unwrap();
        let cc = info_censored_complement(&fam, &theta, &region, &McBudget::new(b.draws, 9)).unwrap();
        let (ok, ratio) = within_norm(&c.matrix, &cc.matrix, &combined(&c, &cc), 3.0);
        two_forms += ok as usize;
        worst_forms = worst_forms.max(ratio);
        // θ-block of the profiled gross-error information
        let gem = info_gem(&fam, &theta, pi, &region, &big).unwrap();
        let prof = info_gem_profiled(&gem).unwrap();
        let target = info_expected_truncated(&fam, &theta, &region, &big).unwrap().matrix * (1.0 - pi);
        let rel = (&prof - &target).norm() / target.norm();
        block_inverse += (rel < 0.02) as usize;
        worst_rel = worst_rel.max(rel);
        // gross-error information at π = 0
        let g0 = info_gem(&fam, &theta, 0.0, &region, &McBudget::new(b.draws, 11)).unwrap();
        let q = c.dim();
        let block = g0.matrix.view((0, 0), (q, q)).into_owned();
        let block_se = g0.std_error.view((0, 0), (q, q)).into_owned();
        let se = block_se.zip_map(&c.std_error, |x, y| (x * x + y * y).sqrt());
        let (ok, ratio) = within_norm(&block, &c.matrix, &se, 3.0);
        gem_zero += ok as usize;
        worst_gem = worst_gem.max(ratio);
    }
    verdict(
        4,
        "information identities on 20 aligned configurations",
        two_forms == 20 && block_inverse == 20 && gem_zero == 20,
        format!(
            "censored two forms {two_forms}/20 (worst |diff|/se {worst_forms:.2}), block inverse {block_inverse}/20 \
             (worst rel {worst_rel:.4}), gross-error block at pi=0 {gem_zero}/20 (worst {worst_gem:.2})"
        ),
    );
}

#[test]
fn aligned_probability_gradient() {
    let mut r = rng(50);
    let mut ok = 0;
    let mut details = Vec::new();
    for i in 0..10 {
        let p = 2 + i % 2;
        let fam = if i % 3 == 2 { RadialFamily::StudentT { nu: 5.0 } } else { G };
        let theta = random_theta(p, &mut r);
        let region = aligned(&fam, &theta, &mut r);
        let fd = probability_gradient_fd(&fam, &theta, &region, &McBudget::new(64_000, 50 + i as u64), 1e-3).unwrap();
        let k = fd.values.len() - 1;
        let resid = fd.values.rows(0, k).norm();
        let err = fd.errors.rows(0, k).norm();
        let max_resid = fd.values.rows(0, k).amax();
        let scale = fd.values[k].abs();
        let pass = resid < 3.0 * err && scale > 10.0 * max_resid && scale > 10.0 * err;
        ok += pass as usize;
        details.push(format!("{resid:.1e}/{err:.1e}/{scale:.2e}"));
    }
    verdict(
        5,
        "region probability flat in location and shape at aligned regions",
        ok == 10,
        format!("{ok}/10 pass; residual/error/scale-derivative: {}", details.join(" ")),
    );
}

#[test]
fn smart_decision_rule() {
    let cfg = FitConfig::default();
    let mut counts = [0usize; 3];
    let mut violations = Vec::new();
    for i in 0..50u64 {
        let p = 1 + (i % 2) as usize;
        let pi0 = [0.0, 0.05, 0.1, 0.2, 0.3][(i % 5) as usize];
        let n = 150 + 25 * (i % 7) as usize;
        let plan = ExperimentPlan::new(Scenario::GemRing { pi0, radius: 6.0 }, G, p, vec![n], 1, i);
        let (data, _) = scenario_sample(&plan, n, 1000 + i);
        let mve = sample_mve(&data, &MveConfig::with_seed(i)).unwrap();
        let s = trim(&data, &mve).unwrap();
        let cfg = FitConfig { seed: i, ..cfg.clone() };
        let smart = fit_smart(&s, &G, &cfg).unwrap();
        let t = fit_truncated(&s, &G, &cfg);
        let pn = s.empirical_inside_fraction();
        let bad = |m: String| format!("dataset {i}: {m}");
        match (&t, smart.branch) {
            (Ok(t), Some(SmartBranch::TruncatedBranch)) => {
                counts[0] += 1;
                let pi = (t.region_probability - pn) / t.region_probability;
                if !(pi >= 0.0) || smart.theta_hat != t.theta_hat || smart.pi_hat != Some(pi) {
                    violations.push(bad(format!("truncated branch with pi* {pi}")));
                }
            }
            (t_res, Some(SmartBranch::CensoredBranch)) => {
                counts[1] += 1;
                if let Ok(t) = t_res {
                    let pi = (t.region_probability - pn) / t.region_probability;
                    if pi >= 0.0 {
                        violations.push(bad(format!("censored branch although pi* = {pi} >= 0")));
                    }
                } else if !matches!(t_res, Err(Error::NonExistence(_))) {
                    violations.push(bad("truncated fit failed unexpectedly".into()));
                }
                let c = fit_censored(&s, &G, &cfg).unwrap();
                if smart.theta_hat != c.theta_hat || smart.pi_hat != Some(0.0) {
                    violations.push(bad("censored branch differs from fit_censored".into()));
                }
            }
            (Err(Error::NonExistence(_)), Some(SmartBranch::RestrictedBranch)) => counts[2] += 1,
            (_, b) => violations.push(bad(format!("branch {b:?} inconsistent with truncated fit {:?}", t.as_ref().err()))),
        }
    }
    verdict(
        6,
        "smart fit follows the closed-form decision rule on 50 gross-error datasets",
        violations.is_empty(),
        format!(
            "truncated {} censored {} restricted {}; violations: {:?}",
            counts[0], counts[1], counts[2], violations
        ),
    );
}

#[test]
fn breakdown_with_eight_of_twenty_replaced() {
    let mut plan =
        ExperimentPlan::new(Scenario::ReplacementOutliers { count: 8, magnitude: 1e6 }, G, 2, vec![20], 100, 7);
    plan.estimator_variants = vec![V::S, V::C, V::R];
    let t0 = Instant::now();
    let rep = run_breakdown(&plan, BlowupThreshold::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let rates: Vec<String> = rep.cells.iter().map(|c| format!("{} {:.2}", c.variant, c.break_rate)).collect();
    let pass = rep.cells.iter().all(|c| c.break_rate <= 0.05) && secs < 300.0;
    verdict(7, "breakdown resistance at n=20, p=2, 8 outliers", pass, format!("break rates {rates:?}, {secs:.1}s"));
}

#[test]
fn consistency_and_rate_on_clean_data() {
    let mut plan = ExperimentPlan::new(Scenario::Clean, G, 2, vec![200, 800, 3200], 200, 8);
    plan.estimator_variants = vec![V::C, V::S];
    let rep = run_consistency(&plan).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for v in [V::C, V::S] {
        let errs: Vec<f64> = plan.n_grid.iter().map(|n| rep.cell(*n, v).unwrap().mean_error_norm).collect();
        let nmse: Vec<f64> = plan.n_grid.iter().map(|n| rep.cell(*n, v).unwrap().n_mse[0]).collect();
        let failures: usize = plan.n_grid.iter().map(|n| rep.cell(*n, v).unwrap().failures).sum();
        let ratio = rep.n_mse_ratio(v, 0).unwrap();
        let dec = errs.windows(2).all(|w| w[1] < w[0]);
        pass &= dec && ratio < 2.0;
        detail.push(format!(
            "MLE({v}) mean error {:?} n*MSE(mu1) {:?} ratio {ratio:.3} failures {failures}",
            errs.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>(),
            nmse.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>()
        ));
    }
    let diag: Vec<String> = rep.mve.iter().map(|m| format!("n={} {:.3}", m.n, m.center_n23_mse)).collect();
    detail.push(format!("raw MVE center n^(2/3)*MSE {diag:?}"));
    verdict(8, "consistency and root-n rate on clean gaussian data", pass, detail.join("; "));
}

#[test]
fn gross_error_recovery() {
    let mut plan = ExperimentPlan::new(Scenario::GemRing { pi0: 0.1, radius: 10.0 }, G, 2, vec![3200], 100, 9);
    plan.estimator_variants = vec![V::S];
    plan.coverage = Some(0.975);
    let rep = run_consistency(&plan).unwrap();
    let c = rep.cell(3200, V::S).unwrap();
    let pi_err = c.mean_abs_pi_error.unwrap();
    let worst_mu = rep
        .replicates
        .iter()
        .filter_map(|o| o.fits[0].estimate.as_ref())
        .map(|e| (e[0] * e[0] + e[1] * e[1]).sqrt())
        .fold(0.0f64, f64::max);
    let pass = c.failures == 0 && pi_err < 0.03 && c.mean_location_norm < 0.1 && c.mean_scatter_max_error < 0.15;
    verdict(
        9,
        "gross-error recovery at n=3200, pi0=0.1",
        pass,
        format!(
            "mean |pi-pi0| {pi_err:.4}, mean |mu| {:.4} (worst {worst_mu:.4}), mean max|Sigma-I| {:.4}, failures {}",
            c.mean_location_norm, c.mean_scatter_max_error, c.failures
        ),
    );
}

/// Truncated normal log-likelihood on `[a, b]`.
fn trunc_ll(xs: &[f64], a: f64, b: f64, mu: f64, sd: f64) -> f64 {
    let n = Normal::new(mu, sd).unwrap();
    let mass = n.cdf(b) - n.cdf(a);
    xs.iter()
        .map(|x| -0.5 * ((x - mu) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * PI).ln())
        .sum::<f64>()
        - xs.len() as f64 * mass.ln()
}

fn golden(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > 1e-11 {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// `P_θ(A)` by product quadrature over the unit disk image of `A` (p = 2).
fn disk_probability(fam: &RadialFamily, theta: &EllipticalParams, region: &Ellipsoid) -> f64 {
    let l = region.cholesky() * region.radius();
    let jac = l.determinant().abs();
    let sinv = theta.sigma().clone().try_inverse().unwrap();
    let norm = theta.sigma().determinant().sqrt();
    let dens = |x: &DVector<f64>| {
        let d = x - theta.mu();
        let s = (d.transpose() * &sinv * &d)[(0, 0)];
        let k = match fam {
            RadialFamily::Gaussian => (-0.5 * s).exp(),
            RadialFamily::StudentT { nu } => (1.0 + s / nu).powf(-(nu + 2.0) / 2.0),
        };
        k / (2.0 * PI * norm)
    };
    let (nr, nphi) = (400usize, 512usize);
    let h = 1.0 / nr as f64;
    let mut total = 0.0;
    for i in 0..=nr {
        let rho = i as f64 * h;
        let w = if i == 0 || i == nr { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let mut ring = 0.0;
        for j in 0..nphi {
            let phi = 2.0 * PI * j as f64 / nphi as f64;
            let u = DVector::from_vec(vec![rho * phi.cos(), rho * phi.sin()]);
            ring += dens(&(region.center() + &l * u));
        }
        total += w * rho * ring * 2.0 * PI / nphi as f64;
    }
    total * h / 3.0 * jac
}

#[test]
fn oracle_equivalences() {
    let cfg = FitConfig::default();
    let tol = 2.0 * cfg.param_tol;
    // one-dimensional truncated fits against nested golden-section search
    let mut r = rng(100);
    let mut grid_ok = 0;
    let mut grid_worst = 0.0f64;
    for i in 0..10u64 {
        let a = -0.6 - 1.2 * r.random::<f64>();
        let b = 0.6 + 1.2 * r.random::<f64>();
        let shift = 0.4 * r.random::<f64>() - 0.2;
        let data: Vec<_> =
            sample(&G, &EllipticalParams::standard(1), 300 + 30 * i as usize, 200 + i).into_iter().map(|x| x.add_scalar(shift)).collect();
        let s = trim(&data, &Ellipsoid::interval(a, b).unwrap()).unwrap();
        let xs: Vec<f64> = s.inside().iter().map(|x| x[0]).collect();
        let profile = |mu: f64| golden(-3.0, 2.0, |ls| trunc_ll(&xs, a, b, mu, ls.exp()));
        let mu = golden(a, b, |mu| trunc_ll(&xs, a, b, mu, profile(mu).exp()));
        let var = (2.0 * profile(mu)).exp();
        let fit = fit_truncated(&s, &G, &cfg).unwrap();
        let d = (fit.theta_hat.mu()[0] - mu).abs().max((fit.theta_hat.sigma()[(0, 0)] - var).abs());
        grid_worst = grid_worst.max(d);
        grid_ok += (d < tol) as usize;
    }
    // region probability against quadrature at non-aligned regions
    let mut quad_ok = 0;
    let mut quad_worst = 0.0f64;
    for i in 0..20u64 {
        let fam = if i % 2 == 0 { G } else { RadialFamily::StudentT { nu: 5.0 } };
        let theta = random_theta(2, &mut r);
        let other = random_theta(2, &mut r);
        let region = Ellipsoid::from_params(&other, 0.5 + 1.5 * r.random::<f64>());
        let est = region_probability(&fam, &theta, &region, &McBudget::new(50_000, 300 + i)).unwrap();
        let exact = disk_probability(&fam, &theta, &region);
        let z = (est.estimate - exact).abs() / est.std_error.max(1e-300);
        quad_worst = quad_worst.max(z);
        quad_ok += ((est.estimate - exact).abs() <= 3.0 * est.std_error + 1e-9) as usize;
    }
    // censored fits: EM against direct quasi-Newton maximization
    let mut em_ok = 0;
    let mut em_worst = 0.0f64;
    let configs = [(G, 1usize, 400usize), (G, 2, 600), (RadialFamily::StudentT { nu: 5.0 }, 2, 500), (G, 3, 800)];
    for (k, (fam, p, n)) in configs.iter().enumerate() {
        let data = sample(fam, &EllipticalParams::standard(*p), *n, 400 + k as u64);
        let mve = sample_mve(&data, &MveConfig::with_seed(k as u64)).unwrap();
        let s: TrimmedSample = trim(&data, &mve).unwrap();
        let em = fit_censored(&s, fam, &cfg).unwrap();
        let qn = fit_censored(&s, fam, &FitConfig { optimizer: Optimizer::QuasiNewton, ..cfg.clone() }).unwrap();
        let d = em
            .theta_hat
            .natural_coords()
            .iter()
            .zip(qn.theta_hat.natural_coords())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        em_worst = em_worst.max(d);
        em_ok += (d < tol) as usize;
    }
    verdict(
        10,
        "oracle equivalences",
        grid_ok == 10 && quad_ok == 20 && em_ok == configs.len(),
        format!(
            "1-D grid {grid_ok}/10 (worst {grid_worst:.1e}), quadrature {quad_ok}/20 (worst {quad_worst:.2} se), \
             EM vs QN {em_ok}/{} (worst {em_worst:.1e}, tol {tol:.0e})",
            configs.len()
        ),
    );
}
