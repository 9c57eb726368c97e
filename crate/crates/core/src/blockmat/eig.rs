//! Small dense eigenvalue kernels: Jacobi sweeps for symmetric matrices and a
//! characteristic-polynomial root finder for the general spectra needed by the
//! applicability checks. Intended for small dimensions only.

use num_complex::Complex;

use super::matrix::{Matrix, Scalar};
use crate::error::{Error, Result};

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvector matrix V) with S = V diag(w) V^T.
pub fn jacobi_eigen<T: Scalar>(s: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
    if !s.is_square() {
        return Err(Error::Dimension("jacobi_eigen: not square".into()));
    }
    let n = s.rows();
    let mut a = s.clone();
    let mut v = Matrix::<T>::identity(n);
    let eps = T::epsilon() * T::from_usize(n * n).unwrap();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off = off + a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= eps * a.frobenius_norm().max(T::one()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (T::from_f64(2.0).unwrap() * apq);
                let t = {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s_ = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s_ * akq;
                    a[(k, q)] = s_ * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s_ * aqk;
                    a[(q, k)] = s_ * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s_ * vkq;
                    v[(k, q)] = s_ * vkp + c * vkq;
                }
            }
        }
    }
    let w = (0..n).map(|i| a[(i, i)]).collect();
    Ok((w, v))
}

/// Coefficients of the characteristic polynomial det(xI - A) by the
/// Faddeev–LeVerrier recurrence. Returned as c[0] + c[1] x + ... + c[n] x^n
/// with c[n] = 1.
pub fn char_poly<T: Scalar>(a: &Matrix<T>) -> Result<Vec<T>> {
    if !a.is_square() {
        return Err(Error::Dimension("char_poly: not square".into()));
    }
    let n = a.rows();
    let mut coeffs = vec![T::zero(); n + 1];
    coeffs[n] = T::one();
    let mut m = Matrix::<T>::zeros(n, n);
    let mut c = T::one();
    for k in 1..=n {
        // M_k = A M_{k-1} + c_{n-k+1} I
        let mut am = a.matmul(&m)?;
        for i in 0..n {
            am[(i, i)] = am[(i, i)] + c;
        }
        m = am;
        let t = a.matmul(&m)?.trace();
        c = -t / T::from_usize(k).unwrap();
        coeffs[n - k] = c;
    }
    Ok(coeffs)
}

/// All complex roots of a monic polynomial by Durand–Kerner iteration.
/// `coeffs` as in `char_poly` (ascending powers, leading coefficient 1).
pub fn poly_roots<T: Scalar>(coeffs: &[T]) -> Result<Vec<Complex<T>>> {
    let n = coeffs.len() - 1;
    if n == 0 {
        return Ok(vec![]);
    }
    let eval = |z: Complex<T>| -> Complex<T> {
        let mut acc = Complex::new(coeffs[n], T::zero());
        for k in (0..n).rev() {
            acc = acc * z + Complex::new(coeffs[k], T::zero());
        }
        acc
    };
    // Radius bound: 1 + max |c_k|.
    let radius = T::one()
        + coeffs[..n]
            .iter()
            .fold(T::zero(), |acc, &c| acc.max(c.abs()));
    // Non-real, non-root-of-unity starting points.
    let mut roots: Vec<Complex<T>> = (0..n)
        .map(|k| {
            let angle = T::from_f64(0.4).unwrap()
                + T::from_usize(k).unwrap() * T::from_f64(2.0 * std::f64::consts::PI).unwrap()
                    / T::from_usize(n).unwrap();
            Complex::from_polar(radius * T::from_f64(0.7).unwrap(), angle)
        })
        .collect();

    let tol = T::epsilon().sqrt() * T::epsilon().sqrt() * radius; // ~eps * radius
    let max_iter = 500;
    for _ in 0..max_iter {
        let mut max_step = T::zero();
        for i in 0..n {
            let mut denom = Complex::new(T::one(), T::zero());
            for j in 0..n {
                if j != i {
                    denom = denom * (roots[i] - roots[j]);
                }
            }
            if denom.norm() == T::zero() {
                continue;
            }
            let step = eval(roots[i]) / denom;
            roots[i] = roots[i] - step;
            max_step = max_step.max(step.norm());
        }
        if max_step < tol {
            return Ok(roots);
        }
    }
    Err(Error::NoConvergence(max_iter))
}

/// Eigenvalues of a small square matrix via its characteristic polynomial.
pub fn eigenvalues<T: Scalar>(a: &Matrix<T>) -> Result<Vec<Complex<T>>> {
    poly_roots(&char_poly(a)?)
}
