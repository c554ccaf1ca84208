//! Minimal dense symmetric-positive-definite kernels.
//!
//! The score of a Gaussian mixture needs, per component, one Cholesky
//! factorization per (time, component) pair and two triangular solves per
//! evaluation. Evaluations happen millions of times inside tight particle
//! loops, so the solves work in place on caller-provided buffers and the
//! factor is stored as a packed lower triangle — no allocation after setup.

/// Index of entry `(i, j)`, `j <= i`, in a packed lower triangle.
#[inline]
fn tri(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Cholesky factorization `A = L Lᵀ` of a symmetric positive-definite matrix
/// given in row-major order. Returns the packed lower triangle of `L`
/// (length `d(d+1)/2`), or `None` if a pivot is not strictly positive.
pub fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    assert_eq!(a.len(), d * d, "matrix/dimension mismatch");
    let mut l = vec![0.0; d * (d + 1) / 2];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[tri(i, k)] * l[tri(j, k)];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[tri(i, i)] = s.sqrt();
            } else {
                l[tri(i, j)] = s / l[tri(j, j)];
            }
        }
    }
    Some(l)
}

/// Solves `L y = x` in place (forward substitution).
#[inline]
pub fn forward_solve(l: &[f64], d: usize, x: &mut [f64]) {
    for i in 0..d {
        let mut s = x[i];
        for k in 0..i {
            s -= l[tri(i, k)] * x[k];
        }
        x[i] = s / l[tri(i, i)];
    }
}

/// Solves `Lᵀ y = x` in place (backward substitution).
#[inline]
pub fn backward_solve(l: &[f64], d: usize, x: &mut [f64]) {
    for i in (0..d).rev() {
        let mut s = x[i];
        for k in (i + 1)..d {
            s -= l[tri(k, i)] * x[k];
        }
        x[i] = s / l[tri(i, i)];
    }
}

/// Solves `L Lᵀ y = x` in place.
#[inline]
pub fn spd_solve(l: &[f64], d: usize, x: &mut [f64]) {
    forward_solve(l, d, x);
    backward_solve(l, d, x);
}

/// `ln det(L Lᵀ) = 2 Σ ln L_ii`.
pub fn log_det(l: &[f64], d: usize) -> f64 {
    (0..d).map(|i| l[tri(i, i)].ln()).sum::<f64>() * 2.0
}

/// `out = L z`; used to draw correlated Gaussians from white noise.
pub fn mul_lower(l: &[f64], d: usize, z: &[f64], out: &mut [f64]) {
    for i in 0..d {
        let mut s = 0.0;
        for k in 0..=i {
            s += l[tri(i, k)] * z[k];
        }
        out[i] = s;
    }
}
