//! Region probabilities `P_θ(A)` and smooth Monte-Carlo surrogates of them.
//!
//! All heavy lifting happens in the frame where the region is the unit ball
//! (`[-1, 1]` for `p = 1`). One-dimensional probabilities are exact. In higher
//! dimension a fixed stratified importance sample (one stratum inside the
//! ball, one outside) is drawn once and reweighted for every `θ`, so the
//! estimate is a smooth function of `θ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::Kernel;
use crate::ellipsoid::Ellipsoid;
use crate::error::{Error, Result};
use crate::family::RadialFamily;
use crate::params::EllipticalParams;
use crate::quadrature::integrate_sinh;
use crate::sampling::{rng, truncated_radius, unit_direction};

/// Monte-Carlo budget: total number of draws and the seed of the fixed stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McBudget {
    pub draws: usize,
    pub seed: u64,
}

impl McBudget {
    pub const MIN_DRAWS: usize = 1_000;

    pub fn new(draws: usize, seed: u64) -> Self {
        McBudget { draws, seed }
    }
}

impl Default for McBudget {
    fn default() -> Self {
        McBudget { draws: 50_000, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// No Monte-Carlo noise was involved.
    pub exact: bool,
}

/// Radius `r` of the `θ`-aligned ellipsoid `E(μ, Σ, r)` with `P_θ = coverage`.
pub fn mve_radius(family: &RadialFamily, p: usize, coverage: f64) -> Result<f64> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::InvalidArgument(format!("coverage must lie in (0,1), got {coverage}")));
    }
    if p == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    Ok(family.radius_quantile(coverage, p))
}

/// `P_θ(A)`. Exact when `A` is `θ`-aligned or one-dimensional; otherwise a
/// common-random-number estimate driven by `budget.seed`.
pub fn region_probability(
    family: &RadialFamily,
    theta: &EllipticalParams,
    region: &Ellipsoid,
    budget: &McBudget,
) -> Result<ProbabilityEstimate> {
    let p = theta.dim();
    if region.dim() != p {
        return Err(Error::DimensionMismatch { expected: p, found: region.dim() });
    }
    if let Some(rho) = region.aligned_radius(theta) {
        return Ok(ProbabilityEstimate { estimate: family.radius_cdf(rho, p), std_error: 0.0, exact: true });
    }
    let frame = Frame::new(region);
    let local = frame.to_frame(theta)?;
    let kernel = Kernel::new(family, &local);
    if p == 1 {
        let e = interval_probability(&kernel, None);
        return Ok(ProbabilityEstimate { estimate: e.prob, std_error: 0.0, exact: true });
    }
    if budget.draws < McBudget::MIN_DRAWS {
        return Err(Error::InvalidArgument(format!(
            "Monte-Carlo budget of {} draws is below the minimum of {}",
            budget.draws,
            McBudget::MIN_DRAWS
        )));
    }
    // proposal centred on the region with the volume scale of θ
    let k = local.scale();
    let p0 = family.radius_cdf(1.0 / k.sqrt(), p);
    let nodes = NodeSet::build(family, p, p0.clamp(1e-6, 1.0 - 1e-6), budget.draws.div_ceil(2), budget.seed);
    let e = nodes.probability(&kernel, None);
    Ok(ProbabilityEstimate { estimate: e.prob.clamp(0.0, 1.0), std_error: e.std_error, exact: false })
}

/// Affine frame in which a region becomes the unit ball.
#[derive(Debug, Clone)]
pub(crate) struct Frame {
    region: Ellipsoid,
    /// `x ↦ a x + b`.
    a: DMatrix<f64>,
    b: DVector<f64>,
    a_inv: DMatrix<f64>,
}

impl Frame {
    pub fn new(region: &Ellipsoid) -> Self {
        let p = region.dim();
        Self::rotated(region, DMatrix::identity(p, p))
    }

    /// Frame whose rotation is pinned down by the points themselves: axes along the
    /// principal directions of their scatter (largest first), signed so that each
    /// projection has nonnegative third moment. Two samples related by an affine
    /// map therefore land on identical frame coordinates.
    pub fn canonical(region: &Ellipsoid, points: &[DVector<f64>]) -> Self {
        let base = Self::new(region);
        let p = region.dim();
        if points.len() < 2 {
            return base;
        }
        let ys: Vec<Vec<f64>> = points.iter().map(|x| base.point(x.as_slice())).collect();
        let n = ys.len() as f64;
        let mut mean = vec![0.0; p];
        for y in &ys {
            for i in 0..p {
                mean[i] += y[i] / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(p, p);
        for y in &ys {
            for i in 0..p {
                for j in 0..p {
                    cov[(i, j)] += (y[i] - mean[i]) * (y[j] - mean[j]) / n;
                }
            }
        }
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let mut rot = DMatrix::zeros(p, p);
        for (row, &k) in order.iter().enumerate() {
            let v = eig.eigenvectors.column(k);
            let skew: f64 = ys
                .iter()
                .map(|y| (0..p).map(|i| v[i] * (y[i] - mean[i])).sum::<f64>().powi(3))
                .sum();
            let sign = if skew < 0.0 { -1.0 } else { 1.0 };
            for i in 0..p {
                rot[(row, i)] = sign * v[i];
            }
        }
        Self::rotated(region, rot)
    }

    fn rotated(region: &Ellipsoid, rot: DMatrix<f64>) -> Self {
        let p = region.dim();
        let linv = region
            .cholesky()
            .solve_lower_triangular(&DMatrix::identity(p, p))
            .expect("region factor is invertible");
        let a = &rot * linv / region.radius();
        let b = -(&a * region.center());
        let a_inv = region.cholesky() * rot.transpose() * region.radius();
        Frame { region: region.clone(), a, b, a_inv }
    }

    pub fn to_frame(&self, theta: &EllipticalParams) -> Result<EllipticalParams> {
        theta.affine(&self.a, &self.b)
    }

    pub fn from_frame(&self, theta: &EllipticalParams) -> Result<EllipticalParams> {
        theta.affine(&self.a_inv, self.region.center())
    }

    pub fn point(&self, x: &[f64]) -> Vec<f64> {
        let p = x.len();
        (0..p)
            .map(|i| self.b[i] + (0..p).map(|j| self.a[(i, j)] * x[j]).sum::<f64>())
            .collect()
    }

    /// `log |det a|`; densities transform as `log f(x) = log f'(a x + b) + log |det a|`.
    pub fn log_jacobian(&self) -> f64 {
        -(0.5 * self.region.log_det_shape() + self.region.dim() as f64 * self.region.radius().ln())
    }
}

/// Probability of the unit ball and of its complement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ProbEval {
    pub prob: f64,
    pub complement: f64,
    pub std_error: f64,
}

/// Truncated first moments `E[u I_A]`, `E[u d I_A]`, `E[u d dᵀ I_A]` with `d = X - μ`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Moments {
    pub m0: f64,
    pub m1: Vec<f64>,
    /// Row-major `p × p`.
    pub m2: Vec<f64>,
}

impl Moments {
    fn zeros(p: usize) -> Self {
        Moments { m0: 0.0, m1: vec![0.0; p], m2: vec![0.0; p * p] }
    }
}

/// Standardized 1-D density of the family.
#[inline]
fn pdf_1d(k: &Kernel, z: f64) -> f64 {
    (k.family.log_norm(1) + k.family.log_kernel(z * z, 1)).exp()
}

/// Exact `P_θ([-1, 1])`, with its gradient in unconstrained coordinates.
pub(crate) fn interval_probability(k: &Kernel, grad: Option<&mut [f64]>) -> ProbEval {
    let (mu, sd) = (k.mu[0], k.l[0]);
    let (za, zb) = ((-1.0 - mu) / sd, (1.0 - mu) / sd);
    let fam = &k.family;
    // tail masses below za and above zb, each computed on its accurate side
    let lower = fam.cdf_1d(za);
    let upper = fam.cdf_1d(-zb);
    let prob = if za >= 0.0 {
        fam.cdf_1d(-za) - upper
    } else if zb <= 0.0 {
        fam.cdf_1d(zb) - lower
    } else {
        1.0 - lower - upper
    };
    if let Some(g) = grad {
        let (fa, fb) = (pdf_1d(k, za), pdf_1d(k, zb));
        g[0] = -(fb - fa) / sd;
        g[1] = -zb * fb + za * fa;
    }
    ProbEval { prob: prob.max(0.0), complement: (lower + upper).min(1.0), std_error: 0.0 }
}

pub(crate) fn interval_moments(k: &Kernel) -> Moments {
    let (mu, sd) = (k.mu[0], k.l[0]);
    let (za, zb) = ((-1.0 - mu) / sd, (1.0 - mu) / sd);
    let mut m = Moments::zeros(1);
    m.m0 = integrate_sinh(za, zb, 64, |z| k.family.weight(z * z, 1) * pdf_1d(k, z));
    m.m1[0] = sd * integrate_sinh(za, zb, 64, |z| k.family.weight(z * z, 1) * z * pdf_1d(k, z));
    m.m2[0] = sd * sd * integrate_sinh(za, zb, 64, |z| k.family.weight(z * z, 1) * z * z * pdf_1d(k, z));
    m
}

/// Fixed weighted node set for the unit ball in `p ≥ 2` dimensions.
///
/// Two strata of importance draws give two unbiased estimates of `P_θ(A)`: the
/// inside stratum estimates it directly, the outside stratum estimates the
/// complement. They are blended with a weight `λ(θ)` that depends smoothly on a
/// cheap closed-form guess of `P_θ(A)`, leaning on the inside stratum where the
/// region is a small part of the mass and on the outside stratum where it is most
/// of it. For a function `h` with known `E_θ[h]`,
/// `Ê[h I_A] = λ Σ_in c_j f_θ h + (1-λ)(E_θ[h] - Σ_out c_j f_θ h)`.
#[derive(Debug, Clone)]
pub(crate) struct NodeSet {
    p: usize,
    pts: Vec<f64>,
    log_coef: Vec<f64>,
    n_in: usize,
}

/// Tail index of the outer proposal.
const OUTER_NU: f64 = 3.0;

/// Blend weight as a function of a probability guess.
fn blend(pa: f64) -> (f64, f64) {
    let (a, b) = ((1.0 - pa) * (1.0 - pa), pa * pa);
    let lam = a / (a + b);
    let dlam = -2.0 * pa * (1.0 - pa) / ((a + b) * (a + b));
    (lam, dlam)
}

/// Stratum sums for one `θ`.
struct Sums {
    s_in: f64,
    q_in: f64,
    s_out: f64,
    q_out: f64,
}

impl NodeSet {
    /// Inside the ball the proposal is the family itself, centred at the origin and
    /// scaled to put mass `p0` on the ball; outside it is a Student-t with at most
    /// three degrees of freedom, which keeps the importance weights bounded.
    pub fn build(family: &RadialFamily, p: usize, p0: f64, per_stratum: usize, seed: u64) -> Self {
        let m = per_stratum.max(1);
        let rho = family.radius_quantile(p0, p);
        let k = 1.0 / (rho * rho);
        let outer = RadialFamily::StudentT { nu: family.nu().map_or(OUTER_NU, |nu| nu.min(OUTER_NU)) };
        let half_log_k = 0.5 * p as f64 * k.ln();
        let mut r = rng(seed);
        let mut dir = vec![0.0; p];
        let mut pts = Vec::with_capacity(2 * m * p);
        let mut log_coef = Vec::with_capacity(2 * m);
        let sk = k.sqrt();
        for (inside, fam) in [(true, family), (false, &outer)] {
            let mass = if inside { family.radius_cdf(rho, p) } else { outer.radius_sf(rho, p) };
            let base = (mass / m as f64).ln();
            let lnorm = fam.log_norm(p) - half_log_k;
            for j in 0..m {
                let u: f64 = (j as f64 + r.random::<f64>()) / m as f64;
                let u = u.clamp(1e-300, 1.0 - 1e-16);
                let radius = truncated_radius(fam, p, rho, inside, u);
                unit_direction(&mut r, &mut dir);
                let log_fq = lnorm + fam.log_kernel(radius * radius, p);
                for d in &dir {
                    pts.push(sk * radius * d);
                }
                log_coef.push(base - log_fq);
            }
        }
        NodeSet { p, pts, log_coef, n_in: m }
    }

    /// `λ(θ)` and its gradient in unconstrained coordinates. The probability
    /// guess treats `θ` as centred with the volume scale `ς² + ‖μ‖²/p`.
    fn lambda(&self, k: &Kernel, grad: Option<&mut [f64]>) -> (f64, f64) {
        let p = self.p;
        let pf = p as f64;
        let log_s2 = 2.0 / pf * (0..p).map(|i| k.l[i * p + i].ln()).sum::<f64>();
        let s2 = log_s2.exp();
        let mu2: f64 = k.mu.iter().map(|m| m * m).sum();
        let eff = s2 + mu2 / pf;
        let rho = eff.sqrt().recip();
        let pa = k.family.radius_cdf(rho, p).clamp(1e-12, 1.0 - 1e-12);
        let (lam, dlam) = blend(pa);
        if let Some(g) = grad {
            // dPa/d(eff) = -½ f_R(ρ) ρ³
            let dpa = -0.5 * k.family.ln_radius_pdf(rho, p).exp() * rho.powi(3);
            let c = dlam * dpa;
            g.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..p {
                g[i] = c * 2.0 * k.mu[i] / pf;
            }
            let mut idx = p;
            for i in 0..p {
                for j in 0..=i {
                    if i == j {
                        g[idx] = c * s2 * 2.0 / pf;
                    }
                    idx += 1;
                }
            }
        }
        (lam, pa)
    }

    /// Calls `f(t, inside, y, z, s)` for each node with nonzero `t = c_j f_θ(y_j)`.
    #[inline]
    fn visit<F: FnMut(f64, bool, &[f64], &[f64], f64)>(&self, k: &Kernel, mut f: F) -> Sums {
        let mut z = vec![0.0; self.p];
        let mut sums = Sums { s_in: 0.0, q_in: 0.0, s_out: 0.0, q_out: 0.0 };
        for (j, (y, lc)) in self.pts.chunks_exact(self.p).zip(&self.log_coef).enumerate() {
            let (lf, s) = k.log_f(y, &mut z);
            let t = (lc + lf).exp();
            if t == 0.0 {
                continue;
            }
            let inside = j < self.n_in;
            if inside {
                sums.s_in += t;
                sums.q_in += t * t;
            } else {
                sums.s_out += t;
                sums.q_out += t * t;
            }
            f(t, inside, y, &z, s);
        }
        sums
    }

    fn finish(&self, sums: &Sums, lam: f64) -> ProbEval {
        let n = self.n_in as f64;
        let var = |s: f64, q: f64| (q - s * s / n).max(0.0) * n / (n - 1.0).max(1.0);
        let std_error = (lam * lam * var(sums.s_in, sums.q_in) + (1.0 - lam) * (1.0 - lam) * var(sums.s_out, sums.q_out)).sqrt();
        let prob = lam * sums.s_in + (1.0 - lam) * (1.0 - sums.s_out);
        let complement = lam * (1.0 - sums.s_in) + (1.0 - lam) * sums.s_out;
        ProbEval { prob, complement, std_error }
    }

    pub fn probability(&self, k: &Kernel, grad: Option<&mut [f64]>) -> ProbEval {
        match grad {
            None => {
                let (lam, _) = self.lambda(k, None);
                let sums = self.visit(k, |_, _, _, _, _| {});
                self.finish(&sums, lam)
            }
            Some(g) => {
                let (lam, _) = self.lambda(k, Some(g));
                let dl = g.to_vec();
                g.iter_mut().for_each(|x| *x = 0.0);
                let mut v = vec![0.0; self.p];
                let sums = self.visit(k, |t, inside, _, z, s| {
                    let w = if inside { lam * t } else { -(1.0 - lam) * t };
                    k.add_gradient(z, s, w, &mut v, g);
                });
                let diff = sums.s_in - (1.0 - sums.s_out);
                for (gi, di) in g.iter_mut().zip(&dl) {
                    *gi += diff * di;
                }
                self.finish(&sums, lam)
            }
        }
    }

    /// Moments over the unit ball, adjusted so that the score identity
    /// `∂P̂/∂θ = Ê[I_A ∂ log f_θ]` holds exactly for the blended estimator.
    pub fn moments(&self, k: &Kernel, sigma: &[f64]) -> Moments {
        let p = self.p;
        let (lam, _) = self.lambda(k, None);
        let mut m = Moments::zeros(p);
        let mut d = vec![0.0; p];
        let sums = self.visit(k, |t, inside, y, _, s| {
            let w = if inside { lam * t } else { -(1.0 - lam) * t } * k.family.weight(s, p);
            m.m0 += w;
            for i in 0..p {
                d[i] = y[i] - k.mu[i];
                m.m1[i] += w * d[i];
            }
            for i in 0..p {
                for j in 0..=i {
                    m.m2[i * p + j] += w * d[i] * d[j];
                }
            }
        });
        let off = 1.0 - lam;
        m.m0 += off;
        // derivative of λ(θ) times the gap between the two strata
        let nq = EllipticalParams::n_unconstrained(p);
        let mut dl = vec![0.0; nq];
        self.lambda(k, Some(&mut dl));
        let diff = sums.s_in - (1.0 - sums.s_out);
        let pf = p as f64;
        // ∂λ/∂μ = dl[..p]; ∂λ/∂Σ = (∂λ/∂log ς²)(1/p) Σ⁻¹ with ∂λ/∂log ς² = dl_diag·p/2
        let dlam_dlogs2 = dl[p] * pf / 2.0;
        for i in 0..p {
            let mut acc = 0.0;
            for j in 0..p {
                acc += sigma[i * p + j] * dl[j];
            }
            m.m1[i] += diff * acc;
        }
        for i in 0..p {
            for j in 0..=i {
                let v = m.m2[i * p + j] + off * sigma[i * p + j] + 2.0 * diff * dlam_dlogs2 / pf * sigma[i * p + j];
                m.m2[i * p + j] = v;
                m.m2[j * p + i] = v;
            }
        }
        m
    }
}

/// Probability engine for the unit ball in a fixed frame.
#[derive(Debug, Clone)]
pub(crate) enum Engine {
    Interval,
    Nodes(NodeSet),
}

impl Engine {
    /// `p0` is the mass the proposal puts on the ball; ignored for `p = 1`.
    pub fn new(family: &RadialFamily, p: usize, p0: f64, per_stratum: usize, seed: u64) -> Self {
        if p == 1 {
            Engine::Interval
        } else {
            Engine::Nodes(NodeSet::build(family, p, p0.clamp(1e-6, 1.0 - 1e-6), per_stratum, seed))
        }
    }

    pub fn probability(&self, k: &Kernel, grad: Option<&mut [f64]>) -> ProbEval {
        match self {
            Engine::Interval => interval_probability(k, grad),
            Engine::Nodes(n) => n.probability(k, grad),
        }
    }

    pub fn moments(&self, k: &Kernel, sigma: &[f64]) -> Moments {
        match self {
            Engine::Interval => interval_moments(k),
            Engine::Nodes(n) => n.moments(k, sigma),
        }
    }
}
