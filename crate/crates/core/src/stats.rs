//! Small numeric helpers shared by the fitters.

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `ln Σ exp(x)` with max-subtraction. Returns `-inf` for an empty slice or
/// when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights in place into probabilities; returns the log of the
/// normalizing constant.
pub fn normalize_log_weights(logw: &mut [f64]) -> f64 {
    let lse = log_sum_exp(logw);
    for w in logw.iter_mut() {
        *w = (*w - lse).exp();
    }
    // exp rounding can leave the row a few ulps off 1
    let s: f64 = logw.iter().sum();
    for w in logw.iter_mut() {
        *w /= s;
    }
    lse
}

#[cfg(test)]
pub fn normal_log_density(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// Maximizes a one-dimensional function on `[lo, hi]` by golden-section
/// search. Returns the best abscissa and value seen, including both ends.
pub fn golden_max(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, iterations: usize) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut best = (lo, f(lo));
    let fhi = f(hi);
    if fhi > best.1 {
        best = (hi, fhi);
    }
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iterations {
        if fc > best.1 {
            best = (c, fc);
        }
        if fd > best.1 {
            best = (d, fd);
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        if (b - a).abs() <= 1e-14 * (a.abs() + b.abs()).max(1e-300) {
            break;
        }
    }
    for (x, fx) in [(c, fc), (d, fd)] {
        if fx > best.1 {
            best = (x, fx);
        }
    }
    best
}

/// Damped Newton ascent with finite-difference derivatives. Each step is
/// accepted only if it increases `f`, so the result is never worse than `x0`.
/// Returns the final point and value.
pub fn newton_max(mut f: impl FnMut(&[f64]) -> f64, x0: Vec<f64>, iterations: usize) -> (Vec<f64>, f64) {
    use nalgebra::{DMatrix, DVector};
    let p = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    if p == 0 || !fx.is_finite() {
        return (x, fx);
    }
    for _ in 0..iterations {
        let h: Vec<f64> = x.iter().map(|v| 1e-4 * v.abs().max(1e-2)).collect();
        let mut at = |x: &mut Vec<f64>, i: usize, di: f64, j: usize, dj: f64| {
            let (xi, xj) = (x[i], x[j]);
            x[i] += di;
            x[j] += dj;
            let v = f(x);
            x[i] = xi;
            x[j] = xj;
            v
        };
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..p {
            let fp = at(&mut x, i, h[i], i, 0.0);
            let fm = at(&mut x, i, -h[i], i, 0.0);
            grad[i] = (fp - fm) / (2.0 * h[i]);
            hess[(i, i)] = (fp - 2.0 * fx + fm) / (h[i] * h[i]);
            for j in 0..i {
                let fpp = at(&mut x, i, h[i], j, h[j]);
                let fpm = at(&mut x, i, h[i], j, -h[j]);
                let fmp = at(&mut x, i, -h[i], j, h[j]);
                let fmm = at(&mut x, i, -h[i], j, -h[j]);
                let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) || hess.iter().any(|v| !v.is_finite()) {
            break;
        }
        // solve (-H + μI) δ = g with the smallest μ that makes it positive definite
        let neg = -hess;
        let scale = neg.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let mut mu = 0.0;
        let step = loop {
            let shifted = &neg + DMatrix::identity(p, p) * mu;
            if let Some(chol) = shifted.cholesky() {
                break Some(chol.solve(&grad));
            }
            mu = if mu == 0.0 { 1e-8 * scale } else { mu * 10.0 };
            if mu > 1e8 * scale {
                break None;
            }
        };
        let Some(step) = step else { break };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
            let ft = f(&trial);
            if ft > fx {
                x = trial;
                fx = ft;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (x, fx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_is_stable() {
        let v = log_sum_exp(&[-1000.0, -1000.0]);
        assert!((v - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        let mut w = [1000.0, 0.0];
        normalize_log_weights(&mut w);
        assert_eq!(w[0], 1.0);
    }

    #[test]
    fn golden_finds_parabola_peak() {
        let (x, fx) = golden_max(|x| -(x - 1.3) * (x - 1.3), -5.0, 5.0, 200);
        assert!((x - 1.3).abs() < 1e-7 && fx <= 0.0);
    }

    #[test]
    fn newton_climbs_correlated_quadratic() {
        let f = |x: &[f64]| -(x[0] - 1.0).powi(2) - 10.0 * (x[1] - x[0]).powi(2) - (x[0] * x[1] - 1.0).powi(2);
        let start = vec![-2.0, 3.0];
        let f0 = f(&start);
        let (x, fx) = newton_max(f, start, 50);
        assert!(fx >= f0);
        assert!((x[0] - 1.0).abs() < 1e-5 && (x[1] - 1.0).abs() < 1e-5, "{x:?}");
    }
}
