//! Mean and covariance estimators: the maximum-likelihood and empirical
//! (Lotka–Nagaev) estimators of the reproduction means, the full-law MLE,
//! the recursive least-squares estimator of the mean matrix, and the two
//! covariance estimators built from the quadratic strong law.

use std::collections::BTreeMap;

use crate::blockmat::Matrix;
use crate::error::{Error, Result};
use crate::process::{ObservationLevel, Trajectory};

/// Full re-solve cadence for the recursive least-squares inverse.
const LSE_RESOLVE_EVERY: usize = 64;

/// Per-horizon paths of the mean estimators together with the normalizers,
/// computed in one pass over the trajectory.
#[derive(Debug, Clone)]
pub struct MeansPath {
    /// MLE matrices A-hat_k for k = 1..=n (column j zero while type j unseen).
    pub mle: Vec<Matrix<f64>>,
    /// Empirical matrices A-check_k for k = 1..=n (indicator convention).
    pub emp: Vec<Matrix<f64>>,
    /// S_{k-1}(j) for k = 1..=n.
    pub s_prev: Vec<Vec<f64>>,
    /// X_{k-1}(j) for k = 1..=n.
    pub x_prev: Vec<Vec<f64>>,
}

fn require_totals(traj: &Trajectory, estimator: &str) -> Result<()> {
    if traj.level < ObservationLevel::Totals {
        return Err(Error::ObservationLevel {
            have: traj.level,
            need: ObservationLevel::Totals,
            estimator: estimator.into(),
        });
    }
    Ok(())
}

/// Compute the MLE and empirical mean-estimator paths.
pub fn means_path(traj: &Trajectory) -> Result<MeansPath> {
    require_totals(traj, "mean estimators")?;
    let d = traj.dim();
    let n = traj.horizon();
    let mut s = vec![0.0; d]; // running S_{k-1}(j)
    let mut y_cum = Matrix::<f64>::zeros(d, d); // column j = cumulative Y^j
    let mut mle = Vec::with_capacity(n);
    let mut emp = Vec::with_capacity(n);
    let mut s_prev = Vec::with_capacity(n);
    let mut x_prev = Vec::with_capacity(n);

    for k in 1..=n {
        let xp = traj.x_at(k - 1);
        for j in 0..d {
            s[j] += xp[j] as f64;
        }
        let y = traj.generations[k - 1]
            .y
            .as_ref()
            .expect("totals level guarantees y");
        let mut mle_k = Matrix::zeros(d, d);
        let mut emp_k = Matrix::zeros(d, d);
        for j in 0..d {
            for i in 0..d {
                y_cum[(i, j)] += y[j][i] as f64;
            }
            if s[j] > 0.0 {
                for i in 0..d {
                    mle_k[(i, j)] = y_cum[(i, j)] / s[j];
                }
            }
            if xp[j] > 0 {
                for i in 0..d {
                    emp_k[(i, j)] = y[j][i] as f64 / xp[j] as f64;
                }
            }
        }
        s_prev.push(s.clone());
        x_prev.push(xp.iter().map(|&v| v as f64).collect());
        mle.push(mle_k);
        emp.push(emp_k);
    }

    Ok(MeansPath {
        mle,
        emp,
        s_prev,
        x_prev,
    })
}

/// Terminal MLE of the mean matrix. Fails for a type that never appeared.
pub fn mle_means(traj: &Trajectory) -> Result<Matrix<f64>> {
    let path = means_path(traj)?;
    let n = traj.horizon();
    if n == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    for j in 0..traj.dim() {
        if path.s_prev[n - 1][j] == 0.0 {
            return Err(Error::UnseenType(j));
        }
    }
    Ok(path.mle[n - 1].clone())
}

/// Terminal empirical (Lotka–Nagaev) estimator; zero columns where the
/// indicator vanishes.
pub fn empirical_means(traj: &Trajectory) -> Result<Matrix<f64>> {
    let path = means_path(traj)?;
    path.emp
        .last()
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))
}

/// Per-type estimate of the full reproduction laws from FULL observations.
#[derive(Debug, Clone)]
pub struct LawEstimate {
    pub per_type: Vec<BTreeMap<Vec<u64>, f64>>,
}

impl LawEstimate {
    /// Mean vector of the estimated law of type j.
    pub fn mean(&self, j: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; d];
        for (l, p) in &self.per_type[j] {
            for i in 0..d {
                out[i] += p * l[i] as f64;
            }
        }
        out
    }
}

/// Maximum-likelihood estimate of the reproduction laws; requires FULL
/// observation so the individual offspring vectors are available.
pub fn mle_distribution(traj: &Trajectory) -> Result<LawEstimate> {
    if traj.level != ObservationLevel::Full {
        return Err(Error::ObservationLevel {
            have: traj.level,
            need: ObservationLevel::Full,
            estimator: "distribution MLE".into(),
        });
    }
    let d = traj.dim();
    let n = traj.horizon();
    let mut counts: Vec<BTreeMap<Vec<u64>, u64>> = vec![BTreeMap::new(); d];
    let mut parents = vec![0u64; d];
    for k in 1..=n {
        let xp = traj.x_at(k - 1);
        for j in 0..d {
            parents[j] += xp[j];
        }
        let detail = traj.generations[k - 1]
            .detail
            .as_ref()
            .expect("full level guarantees detail");
        for j in 0..d {
            for offspring in &detail[j] {
                *counts[j].entry(offspring.clone()).or_insert(0) += 1;
            }
        }
    }
    let mut per_type = Vec::with_capacity(d);
    for j in 0..d {
        let total = parents[j] as f64;
        let map = counts[j]
            .iter()
            .map(|(l, &c)| (l.clone(), c as f64 / total))
            .collect();
        per_type.push(map);
    }
    Ok(LawEstimate { per_type })
}

/// Path of least-squares estimates of the mean matrix for k = 1..=n,
/// computed by the rank-one recursion with a ridge regularizer
/// Q_k = I + sum_{p<=k} X_p X_p^T and a periodic full re-solve.
pub fn lse_path(traj: &Trajectory) -> Result<Vec<Matrix<f64>>> {
    let d = traj.dim();
    let n = traj.horizon();
    if n == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let xf = |k: usize| -> Vec<f64> { traj.x_at(k).iter().map(|&v| v as f64).collect() };

    // Q_0 = I + X_0 X_0^T
    let x0 = xf(0);
    let mut q = Matrix::<f64>::identity(d)
        .add(&Matrix::outer(&x0, &x0))
        .unwrap();
    let mut p = q.inv_spd()?;
    let mut a_tilde = Matrix::<f64>::zeros(d, d);
    let mut path = Vec::with_capacity(n);

    for k in 0..n {
        let xk = xf(k);
        let xk1 = xf(k + 1);
        // gain g = P_k x_k
        let g = p.mul_vec(&xk)?;
        // residual r = X_{k+1} - A_k X_k
        let ax = a_tilde.mul_vec(&xk)?;
        let r: Vec<f64> = xk1.iter().zip(&ax).map(|(a, b)| a - b).collect();
        a_tilde = a_tilde.add(&Matrix::outer(&r, &g))?;
        path.push(a_tilde.clone());

        // advance Q and its inverse with the next regressor
        let qx = p.mul_vec(&xk1)?;
        let denom = 1.0 + crate::blockmat::dot(&xk1, &qx);
        let correction = Matrix::outer(&qx, &qx).scale(1.0 / denom);
        p = p.sub(&correction)?;
        q = q.add(&Matrix::outer(&xk1, &xk1))?;
        if (k + 1) % LSE_RESOLVE_EVERY == 0 {
            p = q.inv_spd()?;
        }
    }
    Ok(path)
}

/// Terminal least-squares estimate of the mean matrix.
pub fn lse_means(traj: &Trajectory) -> Result<Matrix<f64>> {
    Ok(lse_path(traj)?.pop().unwrap())
}

/// Closed-form ridge solution A (I + sum_{p<n} X_p X_p^T) = sum_{k<=n} X_k X_{k-1}^T,
/// used as the independent check of the recursion.
pub fn lse_closed_form(traj: &Trajectory) -> Result<Matrix<f64>> {
    let d = traj.dim();
    let n = traj.horizon();
    let xf = |k: usize| -> Vec<f64> { traj.x_at(k).iter().map(|&v| v as f64).collect() };
    let mut q = Matrix::<f64>::identity(d);
    for k in 0..n {
        let x = xf(k);
        q = q.add(&Matrix::outer(&x, &x))?;
    }
    let mut b = Matrix::<f64>::zeros(d, d);
    for k in 1..=n {
        b = b.add(&Matrix::outer(&xf(k), &xf(k - 1)))?;
    }
    // Solve A Q = B, i.e. Q A^T = B^T columnwise.
    let bt = b.transpose();
    let mut at = Matrix::<f64>::zeros(d, d);
    for j in 0..d {
        let col = q.solve_spd(&bt.col_vec(j))?;
        for i in 0..d {
            at[(i, j)] = col[i];
        }
    }
    Ok(at.transpose())
}

/// QSL-based covariance blocks: K-hat_n^j as the S_{k-1}(j)-weighted average
/// of outer products of deviations of the MLE path from its terminal value.
/// Horizons where a type is still unseen carry zero weight.
pub fn qsl_covariance(traj: &Trajectory, path: &MeansPath) -> Result<Vec<Matrix<f64>>> {
    covariance_blocks(traj, &path.mle, &path.s_prev)
}

/// Empirical covariance blocks: K-check_n^j with X_{k-1}(j) weights over the
/// empirical estimator path.
pub fn empirical_covariance(traj: &Trajectory, path: &MeansPath) -> Result<Vec<Matrix<f64>>> {
    covariance_blocks(traj, &path.emp, &path.x_prev)
}

fn covariance_blocks(
    traj: &Trajectory,
    estimates: &[Matrix<f64>],
    weights: &[Vec<f64>],
) -> Result<Vec<Matrix<f64>>> {
    let d = traj.dim();
    let n = estimates.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let terminal = &estimates[n - 1];
    let mut blocks = vec![Matrix::<f64>::zeros(d, d); d];
    for k in 0..n {
        for j in 0..d {
            let w = weights[k][j];
            if w == 0.0 {
                continue;
            }
            let dev: Vec<f64> = (0..d)
                .map(|i| estimates[k][(i, j)] - terminal[(i, j)])
                .collect();
            let outer = Matrix::outer(&dev, &dev).scale(w);
            blocks[j] = blocks[j].add(&outer)?;
        }
    }
    let scale = 1.0 / n as f64;
    Ok(blocks.into_iter().map(|b| b.scale(scale)).collect())
}

/// One-type least-squares variance estimator: the time average of
/// T_{k-1}^{-1} Q_{k-1}^2 (a-tilde_k - a-tilde_n)^2 with T_m = sum X_p^3 and
/// Q_m = sum X_p^2.
pub fn lse_variance_1d(traj: &Trajectory, lse_path: &[Matrix<f64>]) -> Result<f64> {
    if traj.dim() != 1 {
        return Err(Error::InvalidArgument(
            "lse_variance_1d requires a one-type trajectory".into(),
        ));
    }
    let n = lse_path.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let terminal = lse_path[n - 1][(0, 0)];
    let mut t_sum = 0.0; // T_{k-1}
    let mut q_sum = 0.0; // Q_{k-1}
    let mut acc = 0.0;
    for k in 1..=n {
        let x = traj.x_at(k - 1)[0] as f64;
        t_sum += x * x * x;
        q_sum += x * x;
        if t_sum > 0.0 {
            let dev = lse_path[k - 1][(0, 0)] - terminal;
            acc += q_sum * q_sum / t_sum * dev * dev;
        }
    }
    Ok(acc / n as f64)
}

/// Normalizers recorded alongside an estimate set.
#[derive(Debug, Clone)]
pub struct Normalizers {
    /// Terminal S_{n-1}(j).
    pub s_prev: Vec<f64>,
    /// Terminal X_{n-1}(j).
    pub x_prev: Vec<f64>,
    /// Terminal ridge Gram matrix Q_{n-1} of the LSE.
    pub q: Matrix<f64>,
}

/// All estimates of a trajectory at its final horizon.
#[derive(Debug, Clone)]
pub struct EstimateSet {
    pub horizon: usize,
    pub mle_means: Matrix<f64>,
    pub emp_means: Matrix<f64>,
    pub lse_means: Option<Matrix<f64>>,
    pub qsl_cov: Vec<Matrix<f64>>,
    pub emp_cov: Vec<Matrix<f64>>,
    pub normalizers: Normalizers,
}

/// Compute every estimator the observation level allows. The LSE is always
/// available (it needs only counts); the mean and covariance estimators need
/// TOTALS.
pub fn estimate_all(traj: &Trajectory) -> Result<EstimateSet> {
    let d = traj.dim();
    let n = traj.horizon();
    let path = means_path(traj)?;
    let mle = mle_means(traj)?;
    let emp = path.emp[n - 1].clone();
    let qsl_cov = qsl_covariance(traj, &path)?;
    let emp_cov = empirical_covariance(traj, &path)?;
    let lse = lse_means(traj).ok();

    let mut q = Matrix::<f64>::identity(d);
    for k in 0..n {
        let x: Vec<f64> = traj.x_at(k).iter().map(|&v| v as f64).collect();
        q = q.add(&Matrix::outer(&x, &x))?;
    }

    Ok(EstimateSet {
        horizon: n,
        mle_means: mle,
        emp_means: emp,
        lse_means: lse,
        qsl_cov,
        emp_cov,
        normalizers: Normalizers {
            s_prev: path.s_prev[n - 1].clone(),
            x_prev: path.x_prev[n - 1].clone(),
            q,
        },
    })
}
