//! Small dense linear-algebra kernels.
//!
//! The covariance matrices in this pipeline are a few tens of rows, so a
//! straightforward complex Cholesky with triangular solves beats pulling in a
//! LAPACK binding and keeps the crate generic over the scalar type.

use ndarray::{Array1, Array2};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::{Real, C};

/// 3-vector of scalars (positions, directions).
pub type Vec3<T> = [T; 3];

pub fn v3_sub<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn v3_dot<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn v3_norm<T: Real>(a: Vec3<T>) -> T {
    v3_dot(a, a).sqrt()
}

pub fn v3_to_f64<T: Real>(a: Vec3<T>) -> [f64; 3] {
    [a[0].to_f64(), a[1].to_f64(), a[2].to_f64()]
}

/// Conjugate transpose.
pub fn adjoint<T: Real>(a: &Array2<C<T>>) -> Array2<C<T>> {
    a.t().mapv(|z| z.conj())
}

/// Largest elementwise deviation from Hermitian symmetry.
pub fn hermitian_deviation<T: Real>(a: &Array2<C<T>>) -> T {
    let n = a.nrows();
    let mut worst = T::zero();
    for r in 0..n {
        for c in 0..n {
            let d = (a[[r, c]] - a[[c, r]].conj()).norm();
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

/// Lower Cholesky factor `L` with `L L^H = A` for Hermitian positive-definite
/// `A`. Fails with the offending pivot when `A` is not PD.
pub fn cholesky<T: Real>(a: &Array2<C<T>>, name: &'static str) -> Result<Array2<C<T>>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "cholesky",
            expected: n,
            got: a.ncols(),
        });
    }
    let mut l = Array2::<C<T>>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]].re;
        for k in 0..j {
            d -= l[[j, k]].norm_sqr();
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite {
                matrix: name,
                pivot: d.to_f64(),
                index: j,
            });
        }
        let diag = d.sqrt();
        l[[j, j]] = Complex::new(diag, T::zero());
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]].conj();
            }
            l[[i, j]] = s / diag;
        }
    }
    Ok(l)
}

/// Cholesky with one diagonal-jitter retry (`trace/n * rel_jitter` added to
/// the diagonal). Used when factoring covariances for sampling, where tiny
/// negative eigenvalues from quadrature round-off are expected.
pub fn cholesky_with_jitter<T: Real>(
    a: &Array2<C<T>>,
    rel_jitter: T,
    name: &'static str,
) -> Result<Array2<C<T>>> {
    match cholesky(a, name) {
        Ok(l) => Ok(l),
        Err(_) => {
            let n = a.nrows();
            let trace = (0..n).map(|i| a[[i, i]].re).sum::<T>();
            let jitter = trace / T::of(n as f64) * rel_jitter;
            let mut b = a.clone();
            for i in 0..n {
                b[[i, i]] += Complex::new(jitter, T::zero());
            }
            cholesky(&b, name)
        }
    }
}

/// Solve `L y = b` for lower-triangular `L`.
pub fn solve_lower<T: Real>(l: &Array2<C<T>>, b: &Array1<C<T>>) -> Array1<C<T>> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Solve `L^H x = y` for lower-triangular `L`.
pub fn solve_lower_adjoint<T: Real>(l: &Array2<C<T>>, y: &Array1<C<T>>) -> Array1<C<T>> {
    let n = l.nrows();
    let mut x = y.clone();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[[k, i]].conj() * x[k];
        }
        x[i] = s / l[[i, i]].conj();
    }
    x
}

/// Solve `A x = b` given the lower Cholesky factor of `A`.
pub fn cholesky_solve<T: Real>(l: &Array2<C<T>>, b: &Array1<C<T>>) -> Array1<C<T>> {
    let y = solve_lower(l, b);
    solve_lower_adjoint(l, &y)
}

/// Real symmetric 3x3 inverse via the adjugate. Returns `None` when the
/// determinant vanishes relative to the matrix scale.
pub fn sym3_inverse<T: Real>(m: &[[T; 3]; 3]) -> Option<[[T; 3]; 3]> {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;

    let scale = m
        .iter()
        .flatten()
        .fold(T::zero(), |acc, &v| acc.max(v.abs()));
    if scale == T::zero() || det.abs() <= scale * scale * scale * T::of(1e-12) {
        return None;
    }

    let c11 = m[0][0] * m[2][2] - m[0][2] * m[2][0];
    let c12 = m[0][1] * m[2][0] - m[0][0] * m[2][1];
    let c22 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let c10 = m[0][2] * m[2][1] - m[0][1] * m[2][2];
    let c20 = m[0][1] * m[1][2] - m[0][2] * m[1][1];
    let c21 = m[0][2] * m[1][0] - m[0][0] * m[1][2];

    let inv_det = det.recip();
    Some([
        [c00 * inv_det, c10 * inv_det, c20 * inv_det],
        [c01 * inv_det, c11 * inv_det, c21 * inv_det],
        [c02 * inv_det, c12 * inv_det, c22 * inv_det],
    ])
}

/// Trace of the inverse of a symmetric 3x3 matrix.
pub fn sym3_trace_inverse<T: Real>(m: &[[T; 3]; 3]) -> Option<T> {
    sym3_inverse(m).map(|inv| inv[0][0] + inv[1][1] + inv[2][2])
}

/// Smallest eigenvalue of a symmetric 3x3 matrix, via the shifted
/// characteristic-polynomial closed form. Used for PSD assertions.
pub fn sym3_min_eigenvalue<T: Real>(m: &[[T; 3]; 3]) -> T {
    // Deflate to the trace-free part and use the trigonometric solution.
    let q = (m[0][0] + m[1][1] + m[2][2]) / T::of(3.0);
    let a = [
        [m[0][0] - q, m[0][1], m[0][2]],
        [m[1][0], m[1][1] - q, m[1][2]],
        [m[2][0], m[2][1], m[2][2] - q],
    ];
    let p2 = a.iter().flatten().map(|&v| v * v).sum::<T>() / T::of(6.0);
    if p2 == T::zero() {
        return q;
    }
    let p = p2.sqrt();
    let c00 = a[1][1] * a[2][2] - a[1][2] * a[2][1];
    let c01 = a[1][2] * a[2][0] - a[1][0] * a[2][2];
    let c02 = a[1][0] * a[2][1] - a[1][1] * a[2][0];
    let det = a[0][0] * c00 + a[0][1] * c01 + a[0][2] * c02;
    let r = (det / (p * p * p) * T::of(0.5)).max(-T::one()).min(T::one());
    let phi = r.acos() / T::of(3.0);
    // Eigenvalues are q + 2p cos(phi + 2k pi / 3); k = 1 gives the smallest.
    q + T::of(2.0) * p * (phi + T::of(2.0) * T::PI() / T::of(3.0)).cos()
}
