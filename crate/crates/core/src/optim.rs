//! BFGS minimizer with a backtracking line search for smooth objectives that
//! may be infeasible (`None`) on part of their domain.

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct BfgsOptions {
    pub max_iter: usize,
    /// Stop once the predicted quasi-Newton step is below this (max-norm).
    pub step_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Stop {
    Converged,
    MaxIter,
    /// No further decrease could be found along the search direction.
    Stalled,
    /// The monitor asked to stop.
    Monitor(String),
}

#[derive(Debug, Clone)]
pub(crate) struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub stop: Stop,
    /// Objective value after every accepted step (first entry is the start).
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Minimizes `f`, which returns `(value, gradient)` or `None` where infeasible.
/// `monitor(x, value)` may abort after each accepted step.
pub(crate) fn minimize<F, M>(x0: &[f64], mut f: F, opts: &BfgsOptions, mut monitor: M) -> Option<BfgsResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    M: FnMut(&[f64], f64) -> Option<String>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    let mut h = identity(n);
    let mut history = vec![fx];
    let mut scaled = false;
    for it in 0..opts.max_iter {
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&d, &g);
        if !(slope < 0.0) {
            // lost descent: restart from steepest descent
            h = identity(n);
            d = g.iter().map(|v| -v).collect();
            slope = dot(&d, &g);
            if !(slope < 0.0) {
                return Some(BfgsResult { x, value: fx, iterations: it, stop: Stop::Converged, history });
            }
        }
        if max_abs(&d) < opts.step_tol {
            return Some(BfgsResult { x, value: fx, iterations: it, stop: Stop::Converged, history });
        }
        // backtracking with safeguarded quadratic interpolation
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            match f(&xt) {
                Some((ft, gt)) if ft.is_finite() && ft <= fx + 1e-4 * t * slope => {
                    accepted = Some((xt, ft, gt));
                    break;
                }
                Some((ft, _)) if ft.is_finite() => {
                    let denom = 2.0 * (ft - fx - t * slope);
                    let tq = if denom > 0.0 { -slope * t * t / denom } else { 0.5 * t };
                    t = tq.clamp(0.1 * t, 0.5 * t);
                }
                _ => t *= 0.25,
            }
        }
        let Some((xn, fnew, gn)) = accepted else {
            let stop = if max_abs(&d) * t < opts.step_tol { Stop::Converged } else { Stop::Stalled };
            return Some(BfgsResult { x, value: fx, iterations: it, stop, history });
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if !scaled {
                // initial inverse-Hessian scaling
                let gamma = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= gamma);
                scaled = true;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }
        x = xn;
        fx = fnew;
        g = gn;
        history.push(fx);
        if let Some(msg) = monitor(&x, fx) {
            return Some(BfgsResult { x, value: fx, iterations: it + 1, stop: Stop::Monitor(msg), history });
        }
    }
    Some(BfgsResult { x, value: fx, iterations: opts.max_iter, stop: Stop::MaxIter, history })
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

/// `H ← (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Some((v, g))
        };
        let r = minimize(&[-1.2, 1.0], f, &BfgsOptions { max_iter: 500, step_tol: 1e-10 }, |_, _| None).unwrap();
        assert_eq!(r.stop, Stop::Converged);
        assert!((r.x[0] - 1.0).abs() < 1e-7 && (r.x[1] - 1.0).abs() < 1e-7, "{:?}", r.x);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn respects_infeasible_region() {
        // minimize (x-2)² subject to x < 1 encoded as infeasibility, with a log barrier
        let f = |x: &[f64]| {
            if x[0] >= 1.0 {
                return None;
            }
            let v = (x[0] - 2.0).powi(2) - 1e-3 * (1.0 - x[0]).ln();
            Some((v, vec![2.0 * (x[0] - 2.0) + 1e-3 / (1.0 - x[0])]))
        };
        let r = minimize(&[0.0], f, &BfgsOptions { max_iter: 200, step_tol: 1e-12 }, |_, _| None).unwrap();
        assert!(r.x[0] < 1.0 && r.x[0] > 0.999);
    }

    #[test]
    fn monitor_can_abort() {
        let f = |x: &[f64]| Some((-x[0], vec![-1.0]));
        let r = minimize(&[0.0], f, &BfgsOptions { max_iter: 1000, step_tol: 1e-8 }, |x, _| {
            (x[0] > 100.0).then(|| "diverged".to_string())
        })
        .unwrap();
        assert!(matches!(r.stop, Stop::Monitor(_)));
    }
}
