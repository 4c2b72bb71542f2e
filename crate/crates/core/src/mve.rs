//! Resampling approximation of the sample Minimum Volume Ellipsoid, its
//! enlargement to a target coverage, and the partition of a sample by a region.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::density::PointCloud;
use crate::ellipsoid::Ellipsoid;
use crate::error::{Error, Result};
use crate::family::RadialFamily;
use crate::sampling::{derive_seed, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MveConfig {
    pub n_subsets: usize,
    /// Points the ellipsoid must cover; `None` means `⌊(n+p+1)/2⌋`.
    pub coverage_count: Option<usize>,
    pub seed: u64,
    /// Concentration passes on the ten best candidates until the volume stops decreasing.
    pub refine: bool,
}

impl Default for MveConfig {
    fn default() -> Self {
        MveConfig { n_subsets: 500, coverage_count: None, seed: 0, refine: true }
    }
}

impl MveConfig {
    pub fn with_seed(seed: u64) -> Self {
        MveConfig { seed, ..Self::default() }
    }
}

/// Default coverage count `⌊(n+p+1)/2⌋`.
pub fn default_coverage_count(n: usize, p: usize) -> usize {
    (n + p + 1) / 2
}

struct Candidate {
    center: DVector<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
    r2: f64,
}

impl Candidate {
    fn log_volume(&self, p: usize) -> f64 {
        0.5 * p as f64 * self.r2.ln() + 0.5 * self.log_det
    }
}

fn distances(cloud: &PointCloud, center: &DVector<f64>, chol: &DMatrix<f64>, out: &mut Vec<f64>) {
    let p = cloud.dim();
    out.clear();
    let mut z = vec![0.0; p];
    for x in cloud.iter() {
        let mut s = 0.0;
        for i in 0..p {
            let mut acc = x[i] - center[i];
            for (j, zj) in z.iter().enumerate().take(i) {
                acc -= chol[(i, j)] * zj;
            }
            z[i] = acc / chol[(i, i)];
            s += z[i] * z[i];
        }
        out.push(s);
    }
}

fn kth_smallest(d: &[f64], h: usize, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend_from_slice(d);
    let (_, v, _) = scratch.select_nth_unstable_by(h - 1, f64::total_cmp);
    *v
}

/// Mean and covariance (divisor `k`) of the selected rows; `None` when singular.
fn moments(cloud: &PointCloud, rows: impl Iterator<Item = usize> + Clone) -> Option<(DVector<f64>, DMatrix<f64>, f64)> {
    let p = cloud.dim();
    let mut mean = DVector::zeros(p);
    let mut k = 0usize;
    for r in rows.clone() {
        for i in 0..p {
            mean[i] += cloud.point(r)[i];
        }
        k += 1;
    }
    mean /= k as f64;
    let mut cov = DMatrix::zeros(p, p);
    for r in rows {
        let x = cloud.point(r);
        for i in 0..p {
            for j in 0..=i {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov /= k as f64;
    let scale = cov.diagonal().iter().fold(0.0f64, |m, v| m.max(*v));
    if !(scale > 0.0) {
        return None;
    }
    let chol = cov.cholesky()?.l();
    let log_det = 2.0 * (0..p).map(|i| chol[(i, i)].ln()).sum::<f64>();
    // reject numerically flat subsets
    let min_piv = (0..p).map(|i| chol[(i, i)] * chol[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_piv > 1e-12 * scale) || !log_det.is_finite() {
        return None;
    }
    Some((mean, chol, log_det))
}

/// Approximate sample MVE covering `coverage_count` points.
pub fn sample_mve(data: &[DVector<f64>], cfg: &MveConfig) -> Result<Ellipsoid> {
    let p = data.first().map(|x| x.len()).unwrap_or(0);
    if p == 0 {
        return Err(Error::TooFewPoints { needed: 2, found: data.len() });
    }
    let cloud = PointCloud::from_points(p, data)?;
    mve_cloud(&cloud, cfg)
}

pub(crate) fn mve_cloud(cloud: &PointCloud, cfg: &MveConfig) -> Result<Ellipsoid> {
    let (n, p) = (cloud.len(), cloud.dim());
    if n < p + 1 {
        return Err(Error::TooFewPoints { needed: p + 1, found: n });
    }
    if cfg.n_subsets == 0 {
        return Err(Error::InvalidArgument("n_subsets must be at least 1".into()));
    }
    let h = cfg.coverage_count.unwrap_or_else(|| default_coverage_count(n, p));
    if h < p + 1 || h > n {
        return Err(Error::InvalidArgument(format!("coverage count {h} outside [{}, {n}]", p + 1)));
    }
    const RETRIES: usize = 50;
    const MAX_REFINE: usize = 50;
    // smallest candidates, ascending by volume
    let keep = if cfg.refine { 10 } else { 1 };
    let mut top: Vec<Candidate> = Vec::with_capacity(keep + 1);
    let mut d = Vec::with_capacity(n);
    let mut scratch = Vec::with_capacity(n);
    for j in 0..cfg.n_subsets {
        let mut r = rng(derive_seed(cfg.seed, j as u64));
        for _ in 0..RETRIES {
            let idx = sample_indices(&mut r, n, p + 1);
            let idx = idx.into_vec();
            let Some((center, chol, log_det)) = moments(cloud, idx.iter().copied()) else {
                continue;
            };
            distances(cloud, &center, &chol, &mut d);
            let r2 = kth_smallest(&d, h, &mut scratch);
            if !(r2 > 0.0) || !r2.is_finite() {
                continue;
            }
            let c = Candidate { center, chol, log_det, r2 };
            let v = c.log_volume(p);
            let at = top.partition_point(|t| t.log_volume(p) <= v);
            if at < keep {
                top.insert(at, c);
                top.truncate(keep);
            }
            break;
        }
    }
    if top.is_empty() {
        return Err(Error::DegenerateData("every drawn subset was singular; data are not in general position".into()));
    }
    if cfg.refine {
        for best in top.iter_mut() {
            // concentration passes while the volume keeps dropping
            for _ in 0..MAX_REFINE {
                distances(cloud, &best.center, &best.chol, &mut d);
                let covered: Vec<usize> = (0..n).filter(|&i| d[i] <= best.r2).collect();
                let Some((center, chol, log_det)) = moments(cloud, covered.iter().copied()) else {
                    break;
                };
                distances(cloud, &center, &chol, &mut d);
                let r2 = kth_smallest(&d, h, &mut scratch);
                let c = Candidate { center, chol, log_det, r2 };
                if !(r2 > 0.0 && c.log_volume(p) < best.log_volume(p) - 1e-12) {
                    break;
                }
                *best = c;
            }
        }
    }
    let best = top.into_iter().min_by(|a, b| a.log_volume(p).total_cmp(&b.log_volume(p))).expect("non-empty");
    // unit-determinant shape; radius carries the scale
    let shape_scale = (best.log_det / p as f64).exp();
    let chol = &best.chol / shape_scale.sqrt();
    let shape = &chol * chol.transpose();
    let shape = (&shape + shape.transpose()) * 0.5;
    let provisional = Ellipsoid::new(best.center.clone(), shape, 1.0)?;
    // radius from the final factor so the h covered points test as inside
    let mut dist: Vec<f64> = cloud.iter().map(|x| provisional.distance_sq(x)).collect();
    let (_, r2, _) = dist.select_nth_unstable_by(h - 1, f64::total_cmp);
    let mut radius = r2.sqrt();
    while radius * radius < *r2 {
        radius = radius.next_up();
    }
    provisional.with_radius(radius)
}

/// Scales `region` from the family's central coverage of one half up to
/// `target_coverage`.
pub fn enlarge(region: &Ellipsoid, family: &RadialFamily, target_coverage: f64) -> Result<Ellipsoid> {
    if !(target_coverage >= 0.5 && target_coverage < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target coverage must lie in [0.5, 1), got {target_coverage}"
        )));
    }
    let p = region.dim();
    let factor = family.radius_quantile(target_coverage, p) / family.radius_quantile(0.5, p);
    region.with_radius(region.radius() * factor)
}

/// Partition of a sample by a region.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimmedSample {
    inside: Vec<DVector<f64>>,
    inside_rows: Vec<usize>,
    outside_rows: Vec<usize>,
    n_outside: usize,
    region: Ellipsoid,
}

impl TrimmedSample {
    /// Builds from points already known to lie in `region` plus a count of
    /// discarded observations.
    pub fn new(inside: Vec<DVector<f64>>, n_outside: usize, region: Ellipsoid) -> Result<Self> {
        for x in &inside {
            if !region.contains_vector(x)? {
                return Err(Error::InvalidArgument("point outside the trimming region".into()));
            }
        }
        let m = inside.len();
        Ok(TrimmedSample {
            inside,
            inside_rows: (0..m).collect(),
            outside_rows: (m..m + n_outside).collect(),
            n_outside,
            region,
        })
    }

    pub fn inside(&self) -> &[DVector<f64>] {
        &self.inside
    }

    pub fn n_inside(&self) -> usize {
        self.inside.len()
    }

    pub fn n_outside(&self) -> usize {
        self.n_outside
    }

    pub fn n_total(&self) -> usize {
        self.inside.len() + self.n_outside
    }

    pub fn region(&self) -> &Ellipsoid {
        &self.region
    }

    pub fn dim(&self) -> usize {
        self.region.dim()
    }

    /// Row indices (in the original data) of the retained points.
    pub fn inside_rows(&self) -> &[usize] {
        &self.inside_rows
    }

    /// Row indices of the discarded points.
    pub fn outside_rows(&self) -> &[usize] {
        &self.outside_rows
    }

    /// `Pₙ(A)`.
    pub fn empirical_inside_fraction(&self) -> f64 {
        if self.n_total() == 0 {
            0.0
        } else {
            self.inside.len() as f64 / self.n_total() as f64
        }
    }
}

/// Splits `data` by closed membership in `region`.
pub fn trim(data: &[DVector<f64>], region: &Ellipsoid) -> Result<TrimmedSample> {
    let mut inside = Vec::new();
    let mut inside_rows = Vec::new();
    let mut outside_rows = Vec::new();
    for (i, x) in data.iter().enumerate() {
        if region.contains_vector(x)? {
            inside.push(x.clone());
            inside_rows.push(i);
        } else {
            outside_rows.push(i);
        }
    }
    Ok(TrimmedSample { inside, inside_rows, n_outside: outside_rows.len(), outside_rows, region: region.clone() })
}
