//! Block-matrix notation and small dense linear-algebra kernels.
//!
//! Implements column stacking (`vect`), Kronecker products (`kron`), the
//! block-of-blocks product (`boxkron`), block transposition
//! (`blocktranspose`), symmetric inverse square roots, Perron decompositions
//! of primitive nonnegative matrices and the spectral applicability checks
//! for the least-squares estimator.

mod eig;
mod matrix;

pub use eig::{char_poly, eigenvalues, jacobi_eigen, poly_roots};
pub use matrix::{dot, norm2, Matrix, Scalar};

use num_complex::Complex;
use serde::Serialize;

use crate::error::{Error, Result};

/// Relative floor applied to the smallest eigenvalue in `sym_inv_sqrt`.
pub const SPD_EIG_FLOOR_REL: f64 = 1e-10;
/// Convergence tolerance for the Perron power iteration.
pub const PERRON_TOL: f64 = 1e-12;
/// Iteration budget for the Perron power iteration.
pub const PERRON_MAX_ITER: usize = 100_000;
/// Eigenvalues closer than this are treated as repeated.
pub const EIGENVALUE_DISTINCT_TOL: f64 = 1e-8;

/// Perron–Frobenius data of a primitive nonnegative matrix: the spectral
/// radius `rho`, the right eigenvector `u` (positive entries), the left
/// eigenvector `v` normalized so that <v, 1> = 1 and <u, v> = 1, and the
/// spectral gap to the largest non-principal eigenvalue modulus.
#[derive(Debug, Clone, Serialize)]
pub struct PerronData {
    pub rho: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub gap: f64,
}

/// Stack the columns of a square matrix into one vector (notation `Vect`).
pub fn vect<T: Scalar>(m: &Matrix<T>) -> Result<Vec<T>> {
    if !m.is_square() {
        return Err(Error::Dimension("vect: matrix must be square".into()));
    }
    let d = m.rows();
    let mut out = Vec::with_capacity(d * d);
    for j in 0..d {
        for i in 0..d {
            out.push(m[(i, j)]);
        }
    }
    Ok(out)
}

/// Inverse of `vect`: rebuild the d x d matrix from its stacked columns.
pub fn unvect<T: Scalar>(v: &[T], d: usize) -> Result<Matrix<T>> {
    if v.len() != d * d {
        return Err(Error::Dimension(format!(
            "unvect: expected {} entries, got {}",
            d * d,
            v.len()
        )));
    }
    let mut m = Matrix::zeros(d, d);
    for j in 0..d {
        for i in 0..d {
            m[(i, j)] = v[j * d + i];
        }
    }
    Ok(m)
}

/// Kronecker product A (x) B: the (i, j) block of the result is a_{i,j} B.
pub fn kron<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(a.rows() * b.rows(), a.cols() * b.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let aij = a[(i, j)];
            if aij == T::zero() {
                continue;
            }
            for r in 0..b.rows() {
                for c in 0..b.cols() {
                    out[(i * b.rows() + r, j * b.cols() + c)] = aij * b[(r, c)];
                }
            }
        }
    }
    out
}

fn block_dims<T: Scalar>(m: &Matrix<T>, grid: usize, what: &str) -> Result<(usize, usize)> {
    if grid == 0 || m.rows() % grid != 0 || m.cols() % grid != 0 {
        return Err(Error::Dimension(format!(
            "{}: {}x{} not divisible into a {}x{} block grid",
            what,
            m.rows(),
            m.cols(),
            grid,
            grid
        )));
    }
    Ok((m.rows() / grid, m.cols() / grid))
}

/// Block product P ⊠ Q of two d x d arrays of equally sized blocks: the
/// (i, j) block of the result is the block matrix (P(i,j) (x) Q(r,l))_{r,l}.
pub fn boxkron<T: Scalar>(p: &Matrix<T>, q: &Matrix<T>, grid: usize) -> Result<Matrix<T>> {
    let (pbr, pbc) = block_dims(p, grid, "boxkron lhs")?;
    let (qbr, qbc) = block_dims(q, grid, "boxkron rhs")?;
    let brow = pbr * qbr; // rows of one Kronecker block
    let bcol = pbc * qbc;
    let mut out = Matrix::zeros(grid * grid * brow, grid * grid * bcol);
    for i in 0..grid {
        for j in 0..grid {
            for r in 0..grid {
                for l in 0..grid {
                    for a in 0..pbr {
                        for b in 0..pbc {
                            let pij = p[(i * pbr + a, j * pbc + b)];
                            if pij == T::zero() {
                                continue;
                            }
                            for c in 0..qbr {
                                for e in 0..qbc {
                                    let row = i * grid * brow + r * brow + a * qbr + c;
                                    let col = j * grid * bcol + l * bcol + b * qbc + e;
                                    out[(row, col)] = pij * q[(r * qbr + c, l * qbc + e)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Block transpose: block (i, j) of the output is block (j, i) of the input;
/// the blocks themselves are left untouched.
pub fn blocktranspose<T: Scalar>(c: &Matrix<T>, grid: usize) -> Result<Matrix<T>> {
    let (br, bc) = block_dims(c, grid, "blocktranspose")?;
    let mut out = Matrix::zeros(c.rows(), c.cols());
    for i in 0..grid {
        for j in 0..grid {
            for a in 0..br {
                for b in 0..bc {
                    out[(i * br + a, j * bc + b)] = c[(j * br + a, i * bc + b)];
                }
            }
        }
    }
    Ok(out)
}

/// Symmetric inverse square root of a symmetric positive-definite matrix:
/// returns R with R S R = I. Eigenvalues below `SPD_EIG_FLOOR_REL` times the
/// largest eigenvalue are rejected as near-singular.
pub fn sym_inv_sqrt<T: Scalar>(s: &Matrix<T>) -> Result<Matrix<T>> {
    let sym_tol = T::from_f64(1e-8).unwrap() * (T::one() + s.max_abs());
    if !s.is_symmetric(sym_tol) {
        let mut worst = T::zero();
        for i in 0..s.rows() {
            for j in (i + 1)..s.cols() {
                worst = worst.max((s[(i, j)] - s[(j, i)]).abs());
            }
        }
        return Err(Error::NotSymmetric(worst.to_f64().unwrap_or(f64::NAN)));
    }
    let (w, v) = jacobi_eigen(s)?;
    let max_eig = w.iter().fold(T::zero(), |acc, &x| acc.max(x));
    let floor = T::from_f64(SPD_EIG_FLOOR_REL).unwrap() * max_eig;
    let n = s.rows();
    let mut r = Matrix::zeros(n, n);
    for k in 0..n {
        if w[k] <= floor {
            return Err(Error::NearSingular {
                min_eig: w[k].to_f64().unwrap_or(f64::NAN),
                floor: floor.to_f64().unwrap_or(f64::NAN),
            });
        }
        let inv_sqrt = T::one() / w[k].sqrt();
        for i in 0..n {
            for j in 0..n {
                r[(i, j)] = r[(i, j)] + inv_sqrt * v[(i, k)] * v[(j, k)];
            }
        }
    }
    Ok(r)
}

/// True iff some power A^k with k up to the Wielandt bound d^2 - 2d + 2 is
/// entrywise positive.
pub fn is_primitive<T: Scalar>(a: &Matrix<T>) -> Result<bool> {
    if !a.is_square() {
        return Err(Error::Dimension("is_primitive: not square".into()));
    }
    let d = a.rows();
    if a.data().iter().any(|&x| x < T::zero()) {
        return Err(Error::InvalidArgument(
            "is_primitive: matrix has negative entries".into(),
        ));
    }
    let bound = d * d + 2 - 2 * d; // avoids underflow at d = 1
    // Boolean adjacency powers.
    let base: Vec<bool> = a.data().iter().map(|&x| x > T::zero()).collect();
    let mut cur = base.clone();
    let all_pos = |m: &[bool]| m.iter().all(|&b| b);
    if all_pos(&cur) {
        return Ok(true);
    }
    for _ in 1..bound {
        let mut next = vec![false; d * d];
        for i in 0..d {
            for k in 0..d {
                if cur[i * d + k] {
                    for j in 0..d {
                        if base[k * d + j] {
                            next[i * d + j] = true;
                        }
                    }
                }
            }
        }
        cur = next;
        if all_pos(&cur) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Perron decomposition of a primitive nonnegative matrix by power iteration
/// on A and on its transpose, with the normalizations <v, 1> = 1 and
/// <u, v> = 1.
pub fn perron(a: &Matrix<f64>) -> Result<PerronData> {
    if !is_primitive(a)? {
        return Err(Error::NotPrimitive);
    }
    let d = a.rows();
    let (rho, u_raw) = power_iterate(a)?;
    let (_, v_raw) = power_iterate(&a.transpose())?;

    // Normalize: <v, 1> = 1, then <u, v> = 1.
    let v_sum: f64 = v_raw.iter().sum();
    let v: Vec<f64> = v_raw.iter().map(|x| x / v_sum).collect();
    let uv = dot(&u_raw, &v);
    let u: Vec<f64> = u_raw.iter().map(|x| x / uv).collect();

    // Spectral gap from the full spectrum.
    let gap = if d == 1 {
        rho
    } else {
        let eigs = eigenvalues(a)?;
        let second = non_principal_moduli(&eigs, rho)
            .into_iter()
            .fold(0.0_f64, f64::max);
        (rho - second).max(0.0)
    };

    Ok(PerronData { rho, u, v, gap })
}

fn power_iterate(a: &Matrix<f64>) -> Result<(f64, Vec<f64>)> {
    let d = a.rows();
    let mut x = vec![1.0 / d as f64; d];
    let mut rho = 0.0;
    for _ in 0..PERRON_MAX_ITER {
        let y = a.mul_vec(&x)?;
        let s: f64 = y.iter().sum();
        if s <= 0.0 {
            return Err(Error::NotPrimitive);
        }
        let next: Vec<f64> = y.iter().map(|v| v / s).collect();
        let diff = next
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        let rho_next = s;
        let converged = diff < PERRON_TOL && (rho_next - rho).abs() < PERRON_TOL * rho_next;
        x = next;
        rho = rho_next;
        if converged {
            return Ok((rho, x));
        }
    }
    Err(Error::NoConvergence(PERRON_MAX_ITER))
}

/// Moduli of the eigenvalues other than the principal one (the root closest
/// to `rho`).
fn non_principal_moduli(eigs: &[Complex<f64>], rho: f64) -> Vec<f64> {
    if eigs.is_empty() {
        return vec![];
    }
    let principal = eigs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            let da = (*a - Complex::new(rho, 0.0)).norm();
            let db = (*b - Complex::new(rho, 0.0)).norm();
            da.partial_cmp(&db).unwrap()
        })
        .map(|(i, _)| i)
        .unwrap();
    eigs.iter()
        .enumerate()
        .filter(|(i, _)| *i != principal)
        .map(|(_, z)| z.norm())
        .collect()
}

/// Whether the nonderogatory hypothesis could be confirmed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Nonderogatory {
    Confirmed,
    Indeterminate,
}

/// Report on the spectral conditions required by the least-squares estimator:
/// every non-principal eigenvalue must satisfy |lambda|^2 > rho and the matrix
/// must be nonderogatory.
#[derive(Debug, Clone, Serialize)]
pub struct LseApplicability {
    pub ok: bool,
    pub nonderogatory: Nonderogatory,
    pub reasons: Vec<String>,
}

pub fn lse_applicable(a: &Matrix<f64>, perron: &PerronData) -> Result<LseApplicability> {
    let eigs = eigenvalues(a)?;
    let mut reasons = Vec::new();
    let mut ok = true;

    for m in non_principal_moduli(&eigs, perron.rho) {
        if m * m <= perron.rho {
            ok = false;
            reasons.push(format!(
                "non-principal eigenvalue modulus {m:.6}: |lambda|^2 = {:.6} <= rho = {:.6}",
                m * m,
                perron.rho
            ));
        }
    }

    // Distinct eigenvalues imply nonderogatory; repeated ones are reported
    // as indeterminate instead of guessed at.
    let mut distinct = true;
    for i in 0..eigs.len() {
        for j in (i + 1)..eigs.len() {
            if (eigs[i] - eigs[j]).norm() < EIGENVALUE_DISTINCT_TOL {
                distinct = false;
            }
        }
    }
    let nonderogatory = if distinct {
        Nonderogatory::Confirmed
    } else {
        reasons.push("repeated eigenvalues: nonderogatory check is indeterminate".into());
        Nonderogatory::Indeterminate
    };
    if nonderogatory == Nonderogatory::Indeterminate {
        ok = false;
    }

    Ok(LseApplicability {
        ok,
        nonderogatory,
        reasons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vect_stacks_columns() {
        let m = Matrix::from_rows(&[vec![1.0, 3.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(vect(&m).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let id = Matrix::<f64>::identity(2);
        assert_eq!(vect(&id).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
        let one = Matrix::from_rows(&[vec![5.0]]).unwrap();
        assert_eq!(vect(&one).unwrap(), vec![5.0]);
    }

    #[test]
    fn unvect_inverts_vect() {
        let m = Matrix::from_rows(&[vec![1.0, 3.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(unvect(&vect(&m).unwrap(), 2).unwrap(), m);
    }

    #[test]
    fn kron_definition() {
        let i2 = Matrix::<f64>::identity(2);
        assert_eq!(kron(&i2, &i2), Matrix::identity(4));

        let s = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(kron(&s, &b), b.scale(2.0));

        let swap = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let expect = Matrix::from_rows(&[
            vec![0.0, 0.0, 1.0, 2.0],
            vec![0.0, 0.0, 3.0, 4.0],
            vec![1.0, 2.0, 0.0, 0.0],
            vec![3.0, 4.0, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(kron(&swap, &b), expect);
    }

    #[test]
    fn boxkron_single_block_is_kron() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.5, 1.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(boxkron(&a, &b, 1).unwrap(), kron(&a, &b));
    }

    #[test]
    fn blocktranspose_scalar_blocks_is_transpose() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(blocktranspose(&a, 2).unwrap(), a.transpose());
    }

    #[test]
    fn blocktranspose_is_involution() {
        let c = Matrix::from_vec(4, 4, (0..16).map(|x| x as f64).collect()).unwrap();
        let t = blocktranspose(&c, 2).unwrap();
        assert_eq!(blocktranspose(&t, 2).unwrap(), c);
    }

    #[test]
    fn blocktranspose_block_diagonal_fixed() {
        let c = Matrix::from_rows(&[
            vec![1.0, 2.0, 0.0, 0.0],
            vec![3.0, 4.0, 0.0, 0.0],
            vec![0.0, 0.0, 5.0, 6.0],
            vec![0.0, 0.0, 7.0, 8.0],
        ])
        .unwrap();
        assert_eq!(blocktranspose(&c, 2).unwrap(), c);
    }

    #[test]
    fn sym_inv_sqrt_diagonal() {
        let s = Matrix::<f64>::from_rows(&[vec![4.0, 0.0], vec![0.0, 9.0]]).unwrap();
        let r = sym_inv_sqrt(&s).unwrap();
        assert!((r[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((r[(1, 1)] - 1.0 / 3.0).abs() < 1e-12);
        assert!(r[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn sym_inv_sqrt_rejects_asymmetric() {
        let s = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_inv_sqrt(&s), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn sym_inv_sqrt_rejects_near_singular() {
        let s = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1e-14]]).unwrap();
        assert!(matches!(sym_inv_sqrt(&s), Err(Error::NearSingular { .. })));
    }

    #[test]
    fn perron_scalar() {
        let a = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let p = perron(&a).unwrap();
        assert!((p.rho - 2.0).abs() < 1e-10);
        assert!((p.u[0] - 1.0).abs() < 1e-10);
        assert!((p.v[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn perron_symmetric_2x2() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 4.0]]).unwrap();
        let p = perron(&a).unwrap();
        assert!((p.rho - 5.0).abs() < 1e-10);
        assert!((p.u[0] - 1.0).abs() < 1e-10 && (p.u[1] - 1.0).abs() < 1e-10);
        assert!((p.v[0] - 0.5).abs() < 1e-10 && (p.v[1] - 0.5).abs() < 1e-10);
        assert!((p.gap - 2.0).abs() < 1e-8);
    }

    #[test]
    fn perron_rejects_non_primitive() {
        let swap = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(perron(&swap), Err(Error::NotPrimitive)));
    }

    #[test]
    fn primitivity_cases() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 4.0]]).unwrap();
        assert!(is_primitive(&a).unwrap());
        assert!(!is_primitive(&Matrix::<f64>::identity(2)).unwrap());
        let swap = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(!is_primitive(&swap).unwrap());
    }

    #[test]
    fn lse_applicability_examples() {
        // eigenvalues 3.5 and 2.5; 2.5^2 = 6.25 > 3.5
        let good = Matrix::from_rows(&[vec![3.0, 0.5], vec![0.5, 3.0]]).unwrap();
        let p = perron(&good).unwrap();
        assert!(lse_applicable(&good, &p).unwrap().ok);

        // eigenvalues 2 and 1; 1 <= 2
        let bad = Matrix::from_rows(&[vec![1.5, 0.5], vec![0.5, 1.5]]).unwrap();
        let p = perron(&bad).unwrap();
        let rep = lse_applicable(&bad, &p).unwrap();
        assert!(!rep.ok);
        assert!(!rep.reasons.is_empty());

        // scalar case: vacuous
        let one = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let p = perron(&one).unwrap();
        assert!(lse_applicable(&one, &p).unwrap().ok);
    }
}
