//! Gauss–Legendre rules for the one-dimensional integrals.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { z } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = nf * (z * pn - pm1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn gl16() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(16))
}

/// Composite rule for `∫_a^b f(z) dz` after the substitution `z = sinh(w)`,
/// which keeps both bulk and heavy tails resolved on very wide intervals.
pub fn integrate_sinh<F: FnMut(f64) -> f64>(a: f64, b: f64, panels: usize, mut f: F) -> f64 {
    if !(b > a) {
        return 0.0;
    }
    let (x, w) = gl16();
    let (wa, wb) = (a.asinh(), b.asinh());
    let h = (wb - wa) / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let mid = wa + (k as f64 + 0.5) * h;
        for (xi, wi) in x.iter().zip(w) {
            let t = mid + 0.5 * h * xi;
            total += wi * 0.5 * h * t.cosh() * f(t.sinh());
        }
    }
    total
}
