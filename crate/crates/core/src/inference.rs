//! Fisher information of the full, truncated, censored and gross-error models,
//! asymptotic efficiencies and influence functions.
//!
//! Coordinates are `(μ₁..μ_p, vech Σ)` with `vech` taken row-major over the
//! lower triangle; the gross-error matrix appends `π` as the last coordinate.
//! Region integrals are Monte-Carlo averages over independent batches, and
//! every matrix carries entrywise batch standard errors.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::Kernel;
use crate::ellipsoid::Ellipsoid;
use crate::error::{Error, Result};
use crate::estimators::EstimatorVariant;
use crate::family::RadialFamily;
use crate::params::{vech_len, EllipticalParams};
use crate::probability::{Engine, Frame, McBudget};
use crate::sampling::{derive_seed, rng, truncated_radius, unit_direction};

const BATCHES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Full,
    Truncated,
    ExpectedTruncated,
    Censored,
    Gem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoMatrix {
    pub matrix: DMatrix<f64>,
    /// Entrywise Monte-Carlo standard errors (zero for closed forms).
    pub std_error: DMatrix<f64>,
    pub model: Model,
    pub region: Option<Ellipsoid>,
    pub mc_budget: usize,
    /// The last coordinate is the contamination fraction `π`.
    pub has_pi: bool,
}

impl InfoMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Largest of the asymmetry and the negative part of the spectrum, relative to `‖M‖`.
    pub fn psd_defect(&self) -> f64 {
        let norm = self.matrix.norm().max(f64::MIN_POSITIVE);
        let asym = (&self.matrix - self.matrix.transpose()).amax();
        let sym = (&self.matrix + self.matrix.transpose()) * 0.5;
        let min_eig = sym.symmetric_eigenvalues().min();
        (asym.max(-min_eig.min(0.0))) / norm
    }

    /// Monte-Carlo noise is large next to the matrix itself.
    pub fn is_noisy(&self) -> bool {
        self.std_error.amax() > 0.05 * self.matrix.amax()
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        invert(&self.matrix)
    }

    /// Same information in `(μ, Ξ-tangent, ς²)` coordinates, `Σ = ς² Ξ` with
    /// `|Ξ| = 1`. The `Ξ` directions are an orthonormal basis of the
    /// tangent space of the unit-determinant shapes at `θ`.
    pub fn scale_shape(&self, theta: &EllipticalParams) -> Result<InfoMatrix> {
        let p = theta.dim();
        let q = p + vech_len(p);
        if self.dim() != q + usize::from(self.has_pi) {
            return Err(Error::DimensionMismatch { expected: q, found: self.dim() });
        }
        let d = self.dim();
        let j = scale_shape_jacobian(theta).view((0, 0), (d, d)).into_owned();
        let jt = j.transpose();
        let se2 = self.std_error.map(|v| v * v);
        let j2 = j.map(|v| v * v);
        Ok(InfoMatrix {
            matrix: &jt * &self.matrix * &j,
            std_error: (j2.transpose() * se2 * &j2).map(f64::sqrt),
            model: self.model,
            region: self.region.clone(),
            mc_budget: self.mc_budget,
            has_pi: self.has_pi,
        })
    }
}

fn invert(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let lu = sym.lu();
    let inv = lu.try_inverse().ok_or(Error::SingularMatrix)?;
    if !inv.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularMatrix);
    }
    Ok(inv)
}

/// Columns: the `μ` coordinates, the `Ξ`-tangent directions scaled by `ς²`,
/// then `vech Ξ` (the `ς²` direction), and one trailing pass-through coordinate.
fn scale_shape_jacobian(theta: &EllipticalParams) -> DMatrix<f64> {
    let p = theta.dim();
    let qs = vech_len(p);
    let q = p + qs;
    let s2 = theta.scale();
    let xi = theta.shape();
    let xi_inv = xi.clone().try_inverse().expect("shape is SPD");
    let mut w = DVector::zeros(qs);
    let mut k = 0;
    for i in 0..p {
        for jj in 0..=i {
            w[k] = if i == jj { xi_inv[(i, i)] } else { 2.0 * xi_inv[(i, jj)] };
            k += 1;
        }
    }
    let proj = DMatrix::identity(qs, qs) - &w * w.transpose() / w.norm_squared();
    let eig = proj.symmetric_eigen();
    let mut cols: Vec<(usize, f64)> = eig.eigenvalues.iter().copied().enumerate().filter(|(_, v)| *v > 0.5).collect();
    cols.sort_by_key(|(i, _)| *i);
    let mut out = DMatrix::zeros(q + 1, q + 1);
    for i in 0..p {
        out[(i, i)] = 1.0;
    }
    for (c, (idx, _)) in cols.iter().enumerate() {
        let mut v = eig.eigenvectors.column(*idx).into_owned();
        // deterministic orientation
        if let Some(piv) = v.iter().copied().find(|x| x.abs() > 1e-12) {
            if piv < 0.0 {
                v.neg_mut();
            }
        }
        for r in 0..qs {
            out[(p + r, p + c)] = s2 * v[r];
        }
    }
    let mut k = 0;
    for i in 0..p {
        for jj in 0..=i {
            out[(p + k, q - 1)] = xi[(i, jj)];
            k += 1;
        }
    }
    out[(q, q)] = 1.0;
    out
}

/// Gradient of `log f_θ(x)` in `(μ, vech Σ)` coordinates.
pub fn score(family: &RadialFamily, theta: &EllipticalParams, x: &DVector<f64>) -> Result<DVector<f64>> {
    let p = theta.dim();
    if x.len() != p {
        return Err(Error::DimensionMismatch { expected: p, found: x.len() });
    }
    let k = Kernel::new(family, theta);
    let mut z = vec![0.0; p];
    let mut v = vec![0.0; p];
    let mut out = vec![0.0; p + vech_len(p)];
    let s = k.standardize(x.as_slice(), &mut z);
    k.back_substitute(&z, &mut v);
    let omega = theta.sigma().clone().try_inverse().ok_or(Error::SingularMatrix)?;
    write_score(family, p, s, &v, &omega, &mut out);
    Ok(DVector::from_vec(out))
}

/// `v = Σ⁻¹(x - μ)`, `s` the squared Mahalanobis distance.
fn write_score(family: &RadialFamily, p: usize, s: f64, v: &[f64], omega: &DMatrix<f64>, out: &mut [f64]) {
    let u = family.weight(s, p);
    for i in 0..p {
        out[i] = u * v[i];
    }
    let mut k = p;
    for i in 0..p {
        for j in 0..=i {
            let g = 0.5 * (u * v[i] * v[j] - omega[(i, j)]);
            out[k] = if i == j { g } else { 2.0 * g };
            k += 1;
        }
    }
}

/// Radial constants `b = E[u² s]/p` and `a = E[u² s²]/(p(p+2))`.
fn radial_constants(family: &RadialFamily, p: usize) -> (f64, f64) {
    match family {
        RadialFamily::Gaussian => (1.0, 1.0),
        RadialFamily::StudentT { nu } => {
            let c = (nu + p as f64) / (nu + p as f64 + 2.0);
            (c, c)
        }
    }
}

/// Closed-form information of the untruncated model.
pub fn info_full(family: &RadialFamily, theta: &EllipticalParams) -> InfoMatrix {
    let p = theta.dim();
    let q = p + vech_len(p);
    let omega = theta.sigma().clone().try_inverse().expect("SPD");
    let (b, a) = radial_constants(family, p);
    let mut m = DMatrix::zeros(q, q);
    for i in 0..p {
        for j in 0..p {
            m[(i, j)] = b * omega[(i, j)];
        }
    }
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
    for (r, &(i, j)) in pairs.iter().enumerate() {
        for (c, &(k, l)) in pairs.iter().enumerate() {
            let e = 0.25
                * (a * (omega[(i, k)] * omega[(j, l)] + omega[(i, l)] * omega[(j, k)])
                    + (a - 1.0) * omega[(i, j)] * omega[(k, l)]);
            let f = if i == j { 1.0 } else { 2.0 } * if k == l { 1.0 } else { 2.0 };
            m[(p + r, p + c)] = f * e;
        }
    }
    InfoMatrix { std_error: DMatrix::zeros(q, q), matrix: m, model: Model::Full, region: None, mc_budget: 0, has_pi: false }
}

/// Region integrals of the score: `P(A)`, `E[I_A s]`, `E[I_A s sᵀ]` and the
/// same over the complement.
#[derive(Debug, Clone)]
struct RegionMoments {
    p_in: f64,
    s_in: DVector<f64>,
    ss_in: DMatrix<f64>,
    s_out: DVector<f64>,
    ss_out: DMatrix<f64>,
}

impl RegionMoments {
    fn zeros(q: usize) -> Self {
        RegionMoments {
            p_in: 0.0,
            s_in: DVector::zeros(q),
            ss_in: DMatrix::zeros(q, q),
            s_out: DVector::zeros(q),
            ss_out: DMatrix::zeros(q, q),
        }
    }

    fn add(&mut self, o: &RegionMoments, w: f64) {
        self.p_in += w * o.p_in;
        self.s_in += &o.s_in * w;
        self.ss_in += &o.ss_in * w;
        self.s_out += &o.s_out * w;
        self.ss_out += &o.ss_out * w;
    }

    fn p_out(&self) -> f64 {
        1.0 - self.p_in
    }

    /// `E[I_A s sᵀ] - ∂P ∂Pᵀ / P = P_θ(A) I_t(θ, A)`.
    fn expected_truncated(&self) -> DMatrix<f64> {
        &self.ss_in - &self.s_in * self.s_in.transpose() / self.p_in
    }

    fn truncated(&self) -> DMatrix<f64> {
        self.expected_truncated() / self.p_in
    }

    fn censored(&self) -> DMatrix<f64> {
        let mut m = self.expected_truncated();
        if self.p_out() > 0.0 {
            m += &self.s_in * self.s_in.transpose() / (self.p_in * self.p_out());
        }
        m
    }

    /// `I(θ) - P(Aᶜ) I_t(θ, Aᶜ)` from the complement integrals.
    fn censored_complement(&self, full: &DMatrix<f64>) -> DMatrix<f64> {
        if self.p_out() > 0.0 {
            full - (&self.ss_out - &self.s_out * self.s_out.transpose() / self.p_out())
        } else {
            full.clone()
        }
    }

    fn gem(&self, pi: f64) -> DMatrix<f64> {
        let q = self.s_in.len();
        let pa = self.p_in;
        let qo = (1.0 - pi) * self.p_out() + pi;
        let mut m = DMatrix::zeros(q + 1, q + 1);
        let tt = &self.ss_in * (1.0 - pi) + &self.s_in * self.s_in.transpose() * ((1.0 - pi).powi(2) / qo);
        m.view_mut((0, 0), (q, q)).copy_from(&tt);
        for i in 0..q {
            let c = -self.s_in[i] / qo;
            m[(i, q)] = c;
            m[(q, i)] = c;
        }
        m[(q, q)] = pa / ((1.0 - pi) * qo);
        m
    }
}

/// Stratified draws from `P_θ`: for an aligned region the inside and outside
/// of `A` are sampled separately with exact masses, otherwise the full radial
/// law is stratified and `A` is tested per draw.
fn region_moments(family: &RadialFamily, theta: &EllipticalParams, region: &Ellipsoid, draws: usize, seed: u64) -> RegionMoments {
    let p = theta.dim();
    let q = p + vech_len(p);
    let k = Kernel::new(family, theta);
    let omega = theta.sigma().clone().try_inverse().expect("SPD");
    let l = theta.cholesky();
    let mut r = rng(seed);
    let mut acc = RegionMoments::zeros(q);
    let mut dir = vec![0.0; p];
    let mut z = vec![0.0; p];
    let mut v = vec![0.0; p];
    let mut sc = vec![0.0; q];
    let mut x = vec![0.0; p];
    let accumulate = |inside: bool, w: f64, sc: &[f64], acc: &mut RegionMoments| {
        let (s1, s2) = if inside { (&mut acc.s_in, &mut acc.ss_in) } else { (&mut acc.s_out, &mut acc.ss_out) };
        for i in 0..q {
            s1[i] += w * sc[i];
            for j in 0..=i {
                s2[(i, j)] += w * sc[i] * sc[j];
            }
        }
    };
    let n_dirs = design_size(p);
    let share = 1.0 / n_dirs as f64;
    let mut dirs = vec![0.0; n_dirs * p];
    let mut visit = |radius: f64, w: f64, fixed: Option<bool>, r: &mut rand_chacha::ChaCha8Rng, acc: &mut RegionMoments| {
        direction_design(p, r, &mut dir, &mut dirs);
        for d in dirs.chunks(p) {
            for i in 0..p {
                z[i] = radius * d[i];
            }
            k.back_substitute(&z, &mut v);
            write_score(family, p, radius * radius, &v, &omega, &mut sc);
            let inside = match fixed {
                Some(b) => b,
                None => {
                    for i in 0..p {
                        x[i] = theta.mu()[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>();
                    }
                    let inside = region.contains(&x);
                    if inside {
                        acc.p_in += w * share;
                    }
                    inside
                }
            };
            accumulate(inside, w * share, &sc, acc);
        }
    };
    match region.aligned_radius(theta) {
        Some(rho) => {
            let m = (draws / (2 * n_dirs)).max(1);
            let mass_in = family.radius_cdf(rho, p);
            acc.p_in = mass_in;
            for (inside, mass) in [(true, mass_in), (false, family.radius_sf(rho, p))] {
                let w = mass / m as f64;
                for j in 0..m {
                    let u = ((j as f64 + r.random::<f64>()) / m as f64).clamp(1e-300, 1.0 - 1e-16);
                    let radius = truncated_radius(family, p, rho, inside, u);
                    visit(radius, w, Some(inside), &mut r, &mut acc);
                }
            }
        }
        None => {
            let m = (draws / n_dirs).max(1);
            let w = 1.0 / m as f64;
            for j in 0..m {
                let u = ((j as f64 + r.random::<f64>()) / m as f64).clamp(1e-300, 1.0 - 1e-16);
                let radius = family.radius_quantile(u, p);
                visit(radius, w, None, &mut r, &mut acc);
            }
        }
    }
    for m in [&mut acc.ss_in, &mut acc.ss_out] {
        for i in 0..q {
            for j in 0..i {
                m[(j, i)] = m[(i, j)];
            }
        }
    }
    acc
}

fn design_size(p: usize) -> usize {
    match p {
        1 => 2,
        2 => 8,
        3 => 12,
        _ => 2,
    }
}

/// Randomly rotated direction set whose average integrates every polynomial
/// of degree at most four exactly over the sphere for `p ≤ 3` (equispaced
/// angles in the plane, icosahedron vertices in space); antithetic pairs beyond.
fn direction_design(p: usize, r: &mut rand_chacha::ChaCha8Rng, scratch: &mut [f64], out: &mut [f64]) {
    match p {
        1 => {
            out[0] = 1.0;
            out[1] = -1.0;
        }
        2 => {
            let phi0 = r.random::<f64>() * std::f64::consts::TAU;
            for k in 0..8 {
                let phi = phi0 + k as f64 * std::f64::consts::TAU / 8.0;
                out[2 * k] = phi.cos();
                out[2 * k + 1] = phi.sin();
            }
        }
        3 => {
            let rot = random_rotation3(r);
            let g = 0.5 * (1.0 + 5f64.sqrt());
            let norm = (1.0 + g * g).sqrt();
            let mut k = 0;
            for a in [-1.0, 1.0] {
                for b in [-g, g] {
                    for v in [[0.0, a, b], [a, b, 0.0], [b, 0.0, a]] {
                        for i in 0..3 {
                            out[3 * k + i] = (0..3).map(|j| rot[i][j] * v[j]).sum::<f64>() / norm;
                        }
                        k += 1;
                    }
                }
            }
        }
        _ => {
            unit_direction(r, scratch);
            for i in 0..p {
                out[i] = scratch[i];
                out[p + i] = -scratch[i];
            }
        }
    }
}

fn random_rotation3(r: &mut rand_chacha::ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0; 4];
    unit_direction(r, &mut q);
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Pooled estimate of `f` and its batch standard error.
fn batched<F>(family: &RadialFamily, theta: &EllipticalParams, region: &Ellipsoid, budget: &McBudget, f: F) -> Result<(DMatrix<f64>, DMatrix<f64>)>
where
    F: Fn(&RegionMoments) -> DMatrix<f64>,
{
    check_inputs(theta, region, budget)?;
    let q = theta.dim() + vech_len(theta.dim());
    let per = budget.draws / BATCHES;
    let batches: Vec<RegionMoments> =
        (0..BATCHES).map(|b| region_moments(family, theta, region, per, derive_seed(budget.seed, b as u64))).collect();
    let mut pooled = RegionMoments::zeros(q);
    for b in &batches {
        pooled.add(b, 1.0 / BATCHES as f64);
    }
    if !(pooled.p_in > 0.0) {
        return Err(Error::InvalidArgument("region has no mass under θ".into()));
    }
    let value = f(&pooled);
    let vals: Vec<DMatrix<f64>> = batches.iter().map(&f).collect();
    let mean = vals.iter().fold(DMatrix::zeros(value.nrows(), value.ncols()), |a, v| a + v) / BATCHES as f64;
    let var = vals.iter().fold(DMatrix::zeros(value.nrows(), value.ncols()), |a, v| {
        a + (v - &mean).map(|d| d * d)
    }) / (BATCHES as f64 - 1.0);
    let se = var.map(|v| (v / BATCHES as f64).sqrt());
    Ok((value, se))
}

fn check_inputs(theta: &EllipticalParams, region: &Ellipsoid, budget: &McBudget) -> Result<()> {
    if theta.dim() != region.dim() {
        return Err(Error::DimensionMismatch { expected: region.dim(), found: theta.dim() });
    }
    if budget.draws < McBudget::MIN_DRAWS {
        return Err(Error::InvalidArgument(format!(
            "Monte-Carlo budget {} is below the minimum of {}",
            budget.draws,
            McBudget::MIN_DRAWS
        )));
    }
    Ok(())
}

fn wrap(value: DMatrix<f64>, se: DMatrix<f64>, model: Model, region: &Ellipsoid, budget: &McBudget, has_pi: bool) -> InfoMatrix {
    InfoMatrix { matrix: value, std_error: se, model, region: Some(region.clone()), mc_budget: budget.draws, has_pi }
}

/// `I_t(θ, A)`: conditional second moment of the score on `A` minus the outer
/// product of `∂P_θ(A) / P_θ(A)`, with `∂P_θ(A) = E[I_A score]`.
pub fn info_truncated(family: &RadialFamily, theta: &EllipticalParams, region: &Ellipsoid, budget: &McBudget) -> Result<InfoMatrix> {
    let (v, se) = batched(family, theta, region, budget, |m| m.truncated())?;
    Ok(wrap(v, se, Model::Truncated, region, budget, false))
}

/// `P_θ(A) I_t(θ, A)`: truncated information counted per original observation.
pub fn info_expected_truncated(
    family: &RadialFamily,
    theta: &EllipticalParams,
    region: &Ellipsoid,
    budget: &McBudget,
) -> Result<InfoMatrix> {
    let (v, se) = batched(family, theta, region, budget, |m| m.expected_truncated())?;
    Ok(wrap(v, se, Model::ExpectedTruncated, region, budget, false))
}

/// `I_c = P_θ(A) I_t(θ, A) + ∂P ∂Pᵀ / (P_θ(A) P_θ(Aᶜ))`.
pub fn info_censored(family: &RadialFamily, theta: &EllipticalParams, region: &Ellipsoid, budget: &McBudget) -> Result<InfoMatrix> {
    let (v, se) = batched(family, theta, region, budget, |m| m.censored())?;
    Ok(wrap(v, se, Model::Censored, region, budget, false))
}

/// `I_c = I(θ) - P_θ(Aᶜ) I_t(θ, Aᶜ)`, built from draws outside the region only.
pub fn info_censored_complement(
    family: &RadialFamily,
    theta: &EllipticalParams,
    region: &Ellipsoid,
    budget: &McBudget,
) -> Result<InfoMatrix> {
    let full = info_full(family, theta).matrix;
    let (v, se) = batched(family, theta, region, budget, |m| m.censored_complement(&full))?;
    Ok(wrap(v, se, Model::Censored, region, budget, false))
}

/// Information of the gross-error model at `(θ, π)`; `π` is the last coordinate.
pub fn info_gem(family: &RadialFamily, theta: &EllipticalParams, pi: f64, region: &Ellipsoid, budget: &McBudget) -> Result<InfoMatrix> {
    if !(0.0..1.0).contains(&pi) {
        return Err(Error::InvalidArgument(format!("pi must lie in [0,1), got {pi}")));
    }
    let (v, se) = batched(family, theta, region, budget, |m| m.gem(pi))?;
    Ok(wrap(v, se, Model::Gem, region, budget, true))
}

/// `θ`-information of the gross-error model after profiling out `π`,
/// obtained by inverting the full `(θ, π)` matrix.
pub fn info_gem_profiled(gem: &InfoMatrix) -> Result<DMatrix<f64>> {
    if !gem.has_pi {
        return Err(Error::InvalidArgument("matrix has no π coordinate".into()));
    }
    let q = gem.dim() - 1;
    let inv = gem.inverse()?;
    invert(&inv.view((0, 0), (q, q)).into_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Mu,
    SigmaDiag,
    SigmaOffdiag,
}

impl Component {
    fn index(self, p: usize) -> Result<usize> {
        match self {
            Component::Mu => Ok(0),
            Component::SigmaDiag => Ok(p),
            Component::SigmaOffdiag if p >= 2 => Ok(p + 1),
            Component::SigmaOffdiag => Err(Error::InvalidArgument("off-diagonal component needs p >= 2".into())),
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Mu => "mu",
            Component::SigmaDiag => "sigma_diag",
            Component::SigmaOffdiag => "sigma_offdiag",
        })
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mu" => Ok(Component::Mu),
            "sigma_diag" => Ok(Component::SigmaDiag),
            "sigma_offdiag" => Ok(Component::SigmaOffdiag),
            other => Err(Error::InvalidArgument(format!("unknown component '{other}'"))),
        }
    }
}

/// How a component's efficiency is read off the information matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EfficiencyConvention {
    /// `I_model[j, j] / I[j, j]`.
    #[default]
    InformationRatio,
    /// `(I⁻¹)[j, j] / (I_model⁻¹)[j, j]`: bound over asymptotic variance.
    InverseVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Region used by the efficiency tables: the theoretical MVE of `P_θ`, or its
/// enlargement to coverage `1 - α`.
pub fn table_region(family: &RadialFamily, p: usize, enlargement_alpha: Option<f64>) -> Result<Ellipsoid> {
    let coverage = match enlargement_alpha {
        None => 0.5,
        Some(a) if a > 0.0 && a < 0.5 => 1.0 - a,
        Some(a) => return Err(Error::InvalidArgument(format!("enlargement alpha must lie in (0, 0.5), got {a}"))),
    };
    Ellipsoid::new(DVector::zeros(p), DMatrix::identity(p, p), family.radius_quantile(coverage, p))
}

/// Asymptotic efficiency of one estimator component at `θ = (0, I)`.
pub fn efficiency(
    family: &RadialFamily,
    p: usize,
    variant: EstimatorVariant,
    enlargement_alpha: Option<f64>,
    component: Component,
    budget: &McBudget,
) -> Result<EfficiencyEstimate> {
    efficiency_with(family, p, variant, enlargement_alpha, component, budget, EfficiencyConvention::default())
}

pub fn efficiency_with(
    family: &RadialFamily,
    p: usize,
    variant: EstimatorVariant,
    enlargement_alpha: Option<f64>,
    component: Component,
    budget: &McBudget,
    convention: EfficiencyConvention,
) -> Result<EfficiencyEstimate> {
    if p == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    let idx = component.index(p)?;
    let theta = EllipticalParams::standard(p);
    let region = table_region(family, p, enlargement_alpha)?;
    let full = info_full(family, &theta).matrix;
    let full_inv = invert(&full)?;
    let censored = matches!(variant, EstimatorVariant::C);
    let eff = move |m: &RegionMoments| -> DMatrix<f64> {
        // clean model: π₀ = 0, so the truncated-type information is P_θ(A) I_t
        let info = if censored { m.censored() } else { m.expected_truncated() };
        let v = match convention {
            EfficiencyConvention::InformationRatio => info[(idx, idx)] / full[(idx, idx)],
            EfficiencyConvention::InverseVariance => match invert(&info) {
                Ok(inv) => full_inv[(idx, idx)] / inv[(idx, idx)],
                Err(_) => f64::NAN,
            },
        };
        DMatrix::from_element(1, 1, v)
    };
    let (v, se) = batched(family, &theta, &region, budget, eff)?;
    if !v[(0, 0)].is_finite() {
        return Err(Error::SingularMatrix);
    }
    Ok(EfficiencyEstimate { value: v[(0, 0)], std_error: se[(0, 0)] })
}

/// Influence function of an estimator under `P_θ₀` (with contamination `π₀`
/// for the smart estimator, whose influence has a trailing `π` entry).
#[derive(Debug, Clone)]
pub struct Influence {
    family: RadialFamily,
    theta0: EllipticalParams,
    pi0: f64,
    region: Ellipsoid,
    variant: EstimatorVariant,
    p_in: f64,
    dp: DVector<f64>,
    inv: DMatrix<f64>,
}

impl Influence {
    pub fn new(
        family: &RadialFamily,
        theta0: &EllipticalParams,
        pi0: f64,
        region: &Ellipsoid,
        variant: EstimatorVariant,
        budget: &McBudget,
    ) -> Result<Self> {
        check_inputs(theta0, region, budget)?;
        if !(0.0..1.0).contains(&pi0) {
            return Err(Error::InvalidArgument(format!("pi must lie in [0,1), got {pi0}")));
        }
        let q = theta0.dim() + vech_len(theta0.dim());
        let mut pooled = RegionMoments::zeros(q);
        for b in 0..BATCHES {
            let m = region_moments(family, theta0, region, budget.draws / BATCHES, derive_seed(budget.seed, b as u64));
            pooled.add(&m, 1.0 / BATCHES as f64);
        }
        let matrix = match variant {
            EstimatorVariant::T | EstimatorVariant::R => pooled.expected_truncated(),
            EstimatorVariant::C => pooled.censored(),
            EstimatorVariant::S => pooled.gem(pi0),
        };
        Ok(Influence {
            family: *family,
            theta0: theta0.clone(),
            pi0,
            region: region.clone(),
            variant,
            p_in: pooled.p_in,
            dp: pooled.s_in,
            inv: invert(&matrix)?,
        })
    }

    /// The matrix whose inverse maps the estimating function to the influence.
    pub fn information_inverse(&self) -> &DMatrix<f64> {
        &self.inv
    }

    pub fn at(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let q = self.dp.len();
        let inside = self.region.contains_vector(x)?;
        let (pa, dp) = (self.p_in, &self.dp);
        let h = match self.variant {
            EstimatorVariant::T | EstimatorVariant::R => {
                if inside {
                    score(&self.family, &self.theta0, x)? - dp / pa
                } else {
                    DVector::zeros(q)
                }
            }
            EstimatorVariant::C => {
                if inside {
                    score(&self.family, &self.theta0, x)?
                } else {
                    -dp / (1.0 - pa)
                }
            }
            EstimatorVariant::S => {
                let pi = self.pi0;
                let qo = (1.0 - pi) * (1.0 - pa) + pi;
                let mut h = DVector::zeros(q + 1);
                if inside {
                    h.rows_mut(0, q).copy_from(&score(&self.family, &self.theta0, x)?);
                    h[q] = -1.0 / (1.0 - pi);
                } else {
                    h.rows_mut(0, q).copy_from(&(-dp * ((1.0 - pi) / qo)));
                    h[q] = pa / qo;
                }
                h
            }
        };
        Ok(&self.inv * h)
    }
}

pub fn influence(
    family: &RadialFamily,
    theta0: &EllipticalParams,
    pi0: f64,
    region: &Ellipsoid,
    variant: EstimatorVariant,
    x: &DVector<f64>,
    budget: &McBudget,
) -> Result<DVector<f64>> {
    Influence::new(family, theta0, pi0, region, variant, budget)?.at(x)
}

/// Central finite differences of `P_θ(A)` in `(μ, Ξ-tangent, ς²)` coordinates
/// on common random numbers, with Richardson extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub values: DVector<f64>,
    /// Monte-Carlo, truncation and rounding error combined.
    pub errors: DVector<f64>,
}

pub fn probability_gradient_fd(
    family: &RadialFamily,
    theta: &EllipticalParams,
    region: &Ellipsoid,
    budget: &McBudget,
    step: f64,
) -> Result<FdGradient> {
    check_inputs(theta, region, budget)?;
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    const STREAMS: usize = 16;
    let p = theta.dim();
    let q = p + vech_len(p);
    let frame = Frame::new(region);
    let jac = scale_shape_jacobian(theta);
    let base_nat = theta.natural_coords();
    let base_frame = frame.to_frame(theta)?;
    let p0 = family.radius_cdf(1.0 / base_frame.scale().sqrt(), p);
    let per = (budget.draws / (2 * STREAMS)).max(1);
    let mut per_stream = vec![DVector::zeros(q); STREAMS];
    let mut trunc = DVector::zeros(q);
    for (st, out) in per_stream.iter_mut().enumerate() {
        let engine = Engine::new(family, p, p0, per, derive_seed(budget.seed, st as u64));
        let prob = |nat: &[f64]| -> Result<f64> {
            let t = params_from_natural(p, nat)?;
            let local = frame.to_frame(&t)?;
            Ok(engine.probability(&Kernel::new(family, &local), None).prob)
        };
        for c in 0..q {
            let dir: Vec<f64> = (0..q).map(|r| jac[(r, c)]).collect();
            let diff = |h: f64| -> Result<f64> {
                let plus: Vec<f64> = base_nat.iter().zip(&dir).map(|(b, d)| b + h * d).collect();
                let minus: Vec<f64> = base_nat.iter().zip(&dir).map(|(b, d)| b - h * d).collect();
                Ok((prob(&plus)? - prob(&minus)?) / (2.0 * h))
            };
            let (d1, d2) = (diff(step)?, diff(0.5 * step)?);
            out[c] = (4.0 * d2 - d1) / 3.0;
            if st == 0 {
                trunc[c] = (d2 - d1).abs() / 3.0;
            }
        }
    }
    let mean = per_stream.iter().fold(DVector::zeros(q), |a, v| a + v) / STREAMS as f64;
    let var = per_stream.iter().fold(DVector::zeros(q), |a, v| a + (v - &mean).map(|d| d * d)) / (STREAMS as f64 - 1.0);
    let round = 4.0 * f64::EPSILON / step;
    let errors = DVector::from_iterator(q, (0..q).map(|i| (var[i] / STREAMS as f64 + trunc[i].powi(2) + round * round).sqrt()));
    Ok(FdGradient { values: mean, errors })
}

fn params_from_natural(p: usize, nat: &[f64]) -> Result<EllipticalParams> {
    let mut s = DMatrix::zeros(p, p);
    let mut k = p;
    for i in 0..p {
        for j in 0..=i {
            s[(i, j)] = nat[k];
            s[(j, i)] = nat[k];
            k += 1;
        }
    }
    EllipticalParams::new(DVector::from_row_slice(&nat[..p]), s)
}
