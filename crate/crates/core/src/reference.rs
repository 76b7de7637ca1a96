//! Brute-force reference implementations used by the test suites.
//!
//! Everything here is deliberately naive and kept independent of the main
//! code paths it checks: exhaustive searches and f64 arithmetic instead of
//! the production formulas.

use crate::quant::{QuantSpec, QuantState};

/// Exhaustive nearest-level search over every representable value
/// `s * (k - z)`, k in [n, p]. Distance ties prefer the level with the
/// larger |k - z|, mirroring round-half-away-from-zero.
pub fn nearest_level_dequant(x: f32, spec: &QuantSpec, state: &QuantState) -> f32 {
    let mut best = f32::NAN;
    let mut best_dist = f32::INFINITY;
    let mut best_mag = f32::NEG_INFINITY;
    for k in spec.n()..=spec.p() {
        let level = state.s * (k as f32 - state.z);
        let dist = (x - level).abs();
        let mag = (k as f32 - state.z).abs();
        if dist < best_dist || (dist == best_dist && mag > best_mag) {
            best = level;
            best_dist = dist;
            best_mag = mag;
        }
    }
    best
}

/// Central finite difference of a scalar function, evaluated in f64.
pub fn central_difference(mut f: impl FnMut(f32) -> f32, x0: f32, eps: f32) -> f64 {
    let hi = f(x0 + eps) as f64;
    let lo = f(x0 - eps) as f64;
    (hi - lo) / (2.0 * eps as f64)
}

/// Relative error with an absolute floor for near-zero references.
pub fn relative_error(got: f64, want: f64) -> f64 {
    let scale = got.abs().max(want.abs());
    if scale < 1e-4 {
        (got - want).abs()
    } else {
        (got - want).abs() / scale
    }
}

/// Mean squared quantization error of `samples` at interval `s`, computed
/// with the plain scalar formula in f64.
pub fn quant_mse_at(samples: &[f32], spec: &QuantSpec, s: f64, z: f64) -> f64 {
    let (n, p) = (spec.n() as f64, spec.p() as f64);
    let mut acc = 0.0f64;
    for &x in samples {
        let x = x as f64;
        let q = ((x / s).round() + z).clamp(n, p);
        let xh = s * (q - z);
        acc += (x - xh) * (x - xh);
    }
    acc / samples.len() as f64
}

/// Dense log-spaced grid search for the interval minimizing aggregate
/// quantization MSE. Returns (s, mse). The grid spans
/// [1e-4, 1e2] * std(samples) with `points` candidates.
pub fn grid_search_interval(samples: &[f32], spec: &QuantSpec, z: f64, points: usize) -> (f64, f64) {
    assert!(!samples.is_empty());
    let mean = samples.iter().map(|&v| v as f64).sum::<f64>() / samples.len() as f64;
    let var = samples
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / samples.len() as f64;
    let scale = var.sqrt().max(1e-12);
    let lo = (1e-4 * scale).ln();
    let hi = (1e2 * scale).ln();
    let mut best = (0.0, f64::INFINITY);
    for i in 0..points {
        let s = (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp();
        let mse = quant_mse_at(samples, spec, s, z);
        if mse < best.1 {
            best = (s, mse);
        }
    }
    best
}

/// Exhaustive minimum-cost perfect matching for n <= 8 point sets, squared
/// Euclidean cost. Returns the total cost of the optimal assignment.
pub fn brute_force_assignment_cost(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(a.len() <= 8, "factorial search only sane for n <= 8");
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let cost: f64 = (0..n)
            .map(|i| {
                let dx = a[i][0] - b[p[i]][0];
                let dy = a[i][1] - b[p[i]][1];
                dx * dx + dy * dy
            })
            .sum();
        if cost < best {
            best = cost;
        }
    });
    best
}

fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, visit);
        perm.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_square() {
        let d = central_difference(|x| x * x, 3.0, 1e-3);
        assert!((d - 6.0).abs() < 1e-3);
    }

    #[test]
    fn grid_search_finds_scale_proportional_optimum() {
        // For zero-mean data the optimal symmetric interval scales linearly
        // with sigma; check the ratio between two scaled copies.
        let spec = QuantSpec::symmetric(4).unwrap();
        let mut rng = crate::rng::RandomStream::seed(13);
        let base: Vec<f32> = (0..4000).map(|_| rng.normal()).collect();
        let scaled: Vec<f32> = base.iter().map(|&v| 3.0 * v).collect();
        let (s1, _) = grid_search_interval(&base, &spec, 0.0, 2048);
        let (s3, _) = grid_search_interval(&scaled, &spec, 0.0, 2048);
        assert!((s3 / s1 - 3.0).abs() < 0.05, "ratio {}", s3 / s1);
    }

    #[test]
    fn brute_force_assignment_identity() {
        let pts = [[0.0, 0.0], [1.0, 1.0], [2.0, 0.5]];
        assert_eq!(brute_force_assignment_cost(&pts, &pts), 0.0);
    }
}
