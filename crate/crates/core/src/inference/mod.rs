//! Asymptotic pivots, quantiles, the growth-ratio estimator, joint
//! confidence regions and the theoretical limit covariances used as
//! normality targets in the Monte Carlo checks.

pub mod special;

use serde::{Deserialize, Serialize};

use crate::blockmat::{blocktranspose, kron, sym_inv_sqrt, vect, Matrix};
use crate::error::{Error, Result};
use crate::estimators::EstimateSet;
use crate::process::{ProcessModel, Trajectory};
use special::{beta_inc, bisect_inverse, chi2_cdf, normal_cdf};

/// Which covariance estimate is plugged into a pivot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovChoice {
    Qsl,
    Empirical,
}

/// Standard normal quantile by bracketing bisection on the CDF.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(0.0 < p && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "normal_quantile: p = {p} outside (0, 1)"
        )));
    }
    Ok(bisect_inverse(normal_cdf, p, -40.0, 40.0))
}

/// Chi-square quantile by bracketing bisection on the CDF.
pub fn chi2_quantile(df: usize, p: f64) -> Result<f64> {
    if df == 0 || !(0.0 < p && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "chi2_quantile: df = {df}, p = {p}"
        )));
    }
    let mut hi = df as f64 + 10.0 * (2.0 * df as f64).sqrt() + 10.0;
    while chi2_cdf(df, hi)? < p {
        hi *= 2.0;
    }
    Ok(bisect_inverse(
        |x| chi2_cdf(df, x).unwrap_or(0.0),
        p,
        0.0,
        hi,
    ))
}

/// Beta quantile (used for exact binomial intervals).
pub fn beta_quantile(a: f64, b: f64, p: f64) -> Result<f64> {
    if !(0.0 < p && p < 1.0) {
        return Err(Error::InvalidArgument(format!("beta_quantile: p = {p}")));
    }
    Ok(bisect_inverse(
        |x| beta_inc(a, b, x).unwrap_or(0.0),
        p,
        0.0,
        1.0,
    ))
}

/// Data-driven estimate of (rho - 1)/(rho + 1):
/// <X_n, 1> / (<X_n, 1> + 2 <S_{n-1}, 1>).
pub fn rho_ratio(traj: &Trajectory) -> Result<f64> {
    let n = traj.horizon();
    if n == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let xn: f64 = traj.x_at(n).iter().map(|&v| v as f64).sum();
    let mut s_prev = 0.0;
    for k in 0..n {
        s_prev += traj.x_at(k).iter().map(|&v| v as f64).sum::<f64>();
    }
    let denom = xn + 2.0 * s_prev;
    if denom == 0.0 {
        return Err(Error::InvalidArgument(
            "rho_ratio: degenerate trajectory".into(),
        ));
    }
    Ok(xn / denom)
}

fn chosen_blocks<'a>(est: &'a EstimateSet, choice: CovChoice) -> &'a [Matrix<f64>] {
    match choice {
        CovChoice::Qsl => &est.qsl_cov,
        CovChoice::Empirical => &est.emp_cov,
    }
}

/// Quadratic-form pivot sum_j S_{n-1}(j) ||(K_n^j)^{-1/2} (a-hat_n^j - a0^j)||^2,
/// asymptotically chi-square with d^2 degrees of freedom at the true means.
pub fn mean_pivot(est: &EstimateSet, a0: &Matrix<f64>, choice: CovChoice) -> Result<f64> {
    let d = a0.rows();
    let blocks = chosen_blocks(est, choice);
    let mut stat = 0.0;
    for j in 0..d {
        let r = sym_inv_sqrt(&blocks[j])?;
        let dev: Vec<f64> = (0..d)
            .map(|i| est.mle_means[(i, j)] - a0[(i, j)])
            .collect();
        let z = r.mul_vec(&dev)?;
        let norm2: f64 = z.iter().map(|v| v * v).sum();
        stat += est.normalizers.s_prev[j] * norm2;
    }
    Ok(stat)
}

/// Standardized trace statistic against hypothesized blocks K0^j. For the
/// QSL covariance the scale uses the data-driven growth ratio; for the
/// empirical covariance it is sqrt(n / (2 d^2)).
pub fn trace_stat(
    traj: &Trajectory,
    est: &EstimateSet,
    k0: &[Matrix<f64>],
    choice: CovChoice,
) -> Result<f64> {
    let d = traj.dim();
    let n = est.horizon as f64;
    let blocks = chosen_blocks(est, choice);
    let mut trace_sum = 0.0;
    for j in 0..d {
        let r = sym_inv_sqrt(&k0[j])?;
        let m = r.matmul(&blocks[j])?.matmul(&r)?;
        trace_sum += m.trace();
    }
    let dev = trace_sum - (d * d) as f64;
    let scale = match choice {
        CovChoice::Qsl => {
            let ratio = rho_ratio(traj)?;
            (n * ratio / (2.0 * (d * d) as f64)).sqrt()
        }
        CovChoice::Empirical => (n / (2.0 * (d * d) as f64)).sqrt(),
    };
    Ok(scale * dev)
}

/// Verdict of a joint confidence region / hypothesis test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Inside,
    Outside,
}

/// Joint region statistics at a hypothesized parameter set.
#[derive(Debug, Clone, Serialize)]
pub struct RegionReport {
    pub horizon: usize,
    pub which_cov: CovChoice,
    pub trace_stat: f64,
    pub chi_stat: f64,
    pub z_threshold: f64,
    pub chi_threshold: f64,
    pub level: (f64, f64),
    pub verdict: Verdict,
    pub ratio_estimate: f64,
}

/// Hypothesized reproduction means and covariance blocks.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub a0: Matrix<f64>,
    pub k0: Vec<Matrix<f64>>,
}

/// Joint confidence region of the means and covariance blocks: inside iff
/// |trace_stat| stays within the normal threshold at level alpha1 and the
/// chi-square pivot stays within its threshold at level alpha2. The joint
/// asymptotic level is (1 - alpha1)(1 - alpha2) by the independence of the
/// two limit components.
pub fn confidence_region(
    traj: &Trajectory,
    est: &EstimateSet,
    hypothesis: &Hypothesis,
    levels: (f64, f64),
    choice: CovChoice,
) -> Result<RegionReport> {
    let d = traj.dim();
    let (alpha1, alpha2) = levels;
    let z = normal_quantile(1.0 - alpha1 / 2.0)?;
    let chi = chi2_quantile(d * d, 1.0 - alpha2)?;
    let t = trace_stat(traj, est, &hypothesis.k0, choice)?;
    let c = mean_pivot(est, &hypothesis.a0, choice)?;
    let verdict = if t.abs() <= z && c <= chi {
        Verdict::Inside
    } else {
        Verdict::Outside
    };
    Ok(RegionReport {
        horizon: est.horizon,
        which_cov: choice,
        trace_stat: t,
        chi_stat: c,
        z_threshold: z,
        chi_threshold: chi,
        level: levels,
        verdict,
        ratio_estimate: rho_ratio(traj)?,
    })
}

/// Split a joint confidence level evenly: solve (1 - a)^2 = target.
pub fn split_joint_level(target: f64) -> f64 {
    1.0 - target.sqrt()
}

/// Distributional target selected in `limit_covariance`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitTarget {
    MeanPivot,
    CovQsl,
    CovEmp,
    TraceQsl,
    TraceEmp,
}

/// A limit covariance: a matrix for the vector-valued targets, a scalar
/// variance for the trace statistics.
#[derive(Debug, Clone)]
pub enum LimitCovariance {
    Matrix(Matrix<f64>),
    Scalar(f64),
}

/// Theoretical limit covariances of the estimator CLTs: the block form
/// K^j (x) K^j + blocktranspose(Vect K^j Vect K^j^T) for the covariance
/// estimators (scaled by (rho+1)/(rho-1) for the QSL variant), the full
/// covariance for the mean pivot, and the scalar variances of the trace
/// statistics.
pub fn limit_covariance(target: LimitTarget, model: &ProcessModel) -> Result<LimitCovariance> {
    let d = model.dim();
    let rho = model
        .perron
        .as_ref()
        .map(|p| p.rho)
        .ok_or_else(|| Error::Assumption("model is not positively regular".into()))?;
    let qsl_factor = (rho + 1.0) / (rho - 1.0);

    let block_form = |k: &Matrix<f64>| -> Result<Matrix<f64>> {
        let kk = kron(k, k);
        let v = vect(k)?;
        let vv = Matrix::outer(&v, &v);
        kk.add(&blocktranspose(&vv, d)?)
    };
    let diag_of = |blocks: Vec<Matrix<f64>>| -> Matrix<f64> {
        let b = blocks[0].rows();
        let mut out = Matrix::zeros(d * b, d * b);
        for (j, blk) in blocks.iter().enumerate() {
            for i in 0..b {
                for l in 0..b {
                    out[(j * b + i, j * b + l)] = blk[(i, l)];
                }
            }
        }
        out
    };

    match target {
        LimitTarget::MeanPivot => Ok(LimitCovariance::Matrix(diag_of(model.cov_blocks.clone()))),
        LimitTarget::CovEmp => {
            let blocks = model
                .cov_blocks
                .iter()
                .map(&block_form)
                .collect::<Result<Vec<_>>>()?;
            Ok(LimitCovariance::Matrix(diag_of(blocks)))
        }
        LimitTarget::CovQsl => {
            let blocks = model
                .cov_blocks
                .iter()
                .map(|k| block_form(k).map(|b| b.scale(qsl_factor)))
                .collect::<Result<Vec<_>>>()?;
            Ok(LimitCovariance::Matrix(diag_of(blocks)))
        }
        LimitTarget::TraceEmp => Ok(LimitCovariance::Scalar(2.0 * (d * d) as f64)),
        LimitTarget::TraceQsl => Ok(LimitCovariance::Scalar(2.0 * (d * d) as f64 * qsl_factor)),
    }
}
