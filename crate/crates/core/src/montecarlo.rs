//! Seeded replication harness: runs trajectory ensembles in parallel,
//! aggregates estimator errors and pivot samples, and produces the
//! calibration diagnostics (coverage, variance ratios, KS distances).

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::blockmat::{sym_inv_sqrt, Matrix};
use crate::error::{Error, Result};
use crate::estimators::{estimate_all, means_path, EstimateSet};
use crate::inference::special::{chi2_cdf, normal_cdf};
use crate::inference::{
    beta_quantile, confidence_region, mean_pivot, rho_ratio, trace_stat, CovChoice, Hypothesis,
    Verdict,
};
use crate::process::{
    simulate_trajectory, Caps, ObservationLevel, ProcessModel, Trajectory,
};

/// Derive the seed of replication `r` from the master seed (SplitMix64 step,
/// so neighbouring indices give unrelated streams).
pub fn child_seed(master: u64, r: u64) -> u64 {
    let mut z = master.wrapping_add(r.wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// A complete description of one ensemble run.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub model: ProcessModel,
    pub horizon: usize,
    pub replications: usize,
    pub master_seed: u64,
    pub level: ObservationLevel,
    pub caps: Caps,
    /// Hypothesized parameters for the pivots and the region verdict.
    pub hypothesis: Option<Hypothesis>,
    /// (alpha1, alpha2) of the joint region.
    pub levels: (f64, f64),
    pub cov_choice: CovChoice,
    pub condition_on_survival: bool,
}

impl ExperimentPlan {
    pub fn new(model: ProcessModel, horizon: usize, replications: usize, master_seed: u64) -> Self {
        ExperimentPlan {
            model,
            horizon,
            replications,
            master_seed,
            level: ObservationLevel::Totals,
            caps: Caps::default(),
            hypothesis: None,
            levels: (0.05, 0.05),
            cov_choice: CovChoice::Empirical,
            condition_on_survival: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidArgument("replications must be >= 1".into()));
        }
        if self.horizon < 2 {
            return Err(Error::InvalidArgument("horizon must be >= 2".into()));
        }
        Ok(())
    }
}

/// Short hash of the plan for embedding in artifact file names.
pub fn plan_hash(plan: &ExperimentPlan) -> String {
    let laws: Vec<Vec<serde_json::Value>> = plan
        .model
        .laws
        .iter()
        .map(|l| {
            l.atoms()
                .iter()
                .map(|(a, p)| serde_json::json!([a, format!("{p:.17e}")]))
                .collect()
        })
        .collect();
    let canon = serde_json::json!({
        "model": plan.model.name,
        "laws": laws,
        "x0": plan.model.x0,
        "horizon": plan.horizon,
        "replications": plan.replications,
        "master_seed": plan.master_seed,
        "level": plan.level,
        "caps": [plan.caps.max_total_population, plan.caps.max_generation as u64],
        "levels": [plan.levels.0, plan.levels.1],
        "cov": plan.cov_choice,
        "condition": plan.condition_on_survival,
        "hypothesis": plan.hypothesis.is_some(),
    });
    let digest = Sha256::digest(canon.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Results of one replication. Fields are absent where the path died too
/// early or an estimator's guard rejected it.
#[derive(Debug, Clone, Serialize)]
pub struct Replication {
    pub index: usize,
    pub seed: u64,
    pub status: String,
    pub survived: bool,
    pub horizon: usize,
    pub mle_err: Option<f64>,
    pub emp_err: Option<f64>,
    pub lse_err: Option<f64>,
    pub qsl_cov_err: Option<f64>,
    pub emp_cov_err: Option<f64>,
    pub chi_stat: Option<f64>,
    pub trace_stat: Option<f64>,
    pub rho_ratio: Option<f64>,
    pub inside: Option<bool>,
    /// sqrt(n) (sum_j tr(R K-hat^j R) - d^2) with R from the true blocks.
    pub trace_dev_qsl: Option<f64>,
    pub trace_dev_emp: Option<f64>,
}

/// Location statistics of a nonnegative error sample.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q10: f64,
    pub q90: f64,
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

fn error_stats(values: &[f64]) -> Option<ErrorStats> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(ErrorStats {
        count: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        median: quantile_sorted(&sorted, 0.5),
        q10: quantile_sorted(&sorted, 0.1),
        q90: quantile_sorted(&sorted, 0.9),
    })
}

/// Moment band plus KS distance of a pivot sample against its limit law.
#[derive(Debug, Clone, Serialize)]
pub struct PivotDiagnostics {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub ks_distance: f64,
}

fn pivot_diagnostics<F: Fn(f64) -> f64>(values: &[f64], target_cdf: F) -> Option<PivotDiagnostics> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut ks = 0.0_f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = target_cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        ks = ks.max((f - lo).abs()).max((hi - f).abs());
    }
    Some(PivotDiagnostics {
        count: values.len(),
        mean,
        variance: m2,
        skewness,
        ks_distance: ks,
    })
}

/// Exact Clopper-Pearson interval for x successes out of n.
pub fn clopper_pearson(x: usize, n: usize, alpha: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::InvalidArgument("clopper_pearson: n = 0".into()));
    }
    let lo = if x == 0 {
        0.0
    } else {
        beta_quantile(x as f64, (n - x + 1) as f64, alpha / 2.0)?
    };
    let hi = if x == n {
        1.0
    } else {
        beta_quantile((x + 1) as f64, (n - x) as f64, 1.0 - alpha / 2.0)?
    };
    Ok((lo, hi))
}

/// Coverage of the joint region over the surviving subset.
#[derive(Debug, Clone, Serialize)]
pub struct Coverage {
    pub inside: usize,
    pub total: usize,
    pub rate: f64,
    pub ci95: (f64, f64),
}

/// Order-independent aggregate of an ensemble.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub plan_hash: String,
    pub replications: usize,
    pub surviving: usize,
    pub extinct: usize,
    pub capped: usize,
    pub survival_fraction: f64,
    pub survival_ci95: (f64, f64),
    pub mle_err: Option<ErrorStats>,
    pub emp_err: Option<ErrorStats>,
    pub lse_err: Option<ErrorStats>,
    pub qsl_cov_err: Option<ErrorStats>,
    pub emp_cov_err: Option<ErrorStats>,
    pub chi_diag: Option<PivotDiagnostics>,
    pub trace_diag: Option<PivotDiagnostics>,
    pub rho_ratio_mean: Option<f64>,
    pub coverage: Option<Coverage>,
    /// Sample variances of the sqrt(n)-scaled trace deviations under the
    /// true covariance blocks, and their ratio (QSL over empirical).
    pub trace_dev_var_qsl: Option<f64>,
    pub trace_dev_var_emp: Option<f64>,
    pub variance_ratio: Option<f64>,
    #[serde(skip)]
    pub rows: Vec<Replication>,
}

fn frobenius_err(est: &Matrix<f64>, truth: &Matrix<f64>) -> Option<f64> {
    est.sub(truth).ok().map(|d| d.frobenius_norm())
}

fn blocks_err(est: &[Matrix<f64>], truth: &[Matrix<f64>]) -> Option<f64> {
    let mut acc = 0.0;
    for (a, b) in est.iter().zip(truth) {
        let e = frobenius_err(a, b)?;
        acc += e * e;
    }
    Some(acc.sqrt())
}

fn trace_deviation(
    blocks: &[Matrix<f64>],
    roots: &[Matrix<f64>],
    n: usize,
) -> Option<f64> {
    let d = blocks.len();
    let mut total = 0.0;
    for (b, r) in blocks.iter().zip(roots) {
        total += r.matmul(b).ok()?.matmul(r).ok()?.trace();
    }
    Some((n as f64).sqrt() * (total - (d * d) as f64))
}

fn run_one(plan: &ExperimentPlan, index: usize, true_roots: &Option<Vec<Matrix<f64>>>) -> Replication {
    let seed = child_seed(plan.master_seed, index as u64);
    let traj = simulate_trajectory(&plan.model, plan.horizon, plan.caps, seed, plan.level)
        .expect("plan validated before dispatch");
    let survived = traj.survived();
    let mut rep = Replication {
        index,
        seed,
        status: traj.status.label(),
        survived,
        horizon: traj.horizon(),
        mle_err: None,
        emp_err: None,
        lse_err: None,
        qsl_cov_err: None,
        emp_cov_err: None,
        chi_stat: None,
        trace_stat: None,
        rho_ratio: None,
        inside: None,
        trace_dev_qsl: None,
        trace_dev_emp: None,
    };
    if plan.condition_on_survival && !survived {
        return rep;
    }
    let est: EstimateSet = match estimate_all(&traj) {
        Ok(e) => e,
        Err(_) => return rep,
    };
    let a = &plan.model.mean_matrix;
    rep.mle_err = frobenius_err(&est.mle_means, a);
    rep.emp_err = frobenius_err(&est.emp_means, a);
    rep.lse_err = est.lse_means.as_ref().and_then(|l| frobenius_err(l, a));
    rep.qsl_cov_err = blocks_err(&est.qsl_cov, &plan.model.cov_blocks);
    rep.emp_cov_err = blocks_err(&est.emp_cov, &plan.model.cov_blocks);
    rep.rho_ratio = rho_ratio(&traj).ok();
    if let Some(roots) = true_roots {
        let n = est.horizon;
        rep.trace_dev_qsl = trace_deviation(&est.qsl_cov, roots, n);
        rep.trace_dev_emp = trace_deviation(&est.emp_cov, roots, n);
    }
    if let Some(hyp) = &plan.hypothesis {
        rep.chi_stat = mean_pivot(&est, &hyp.a0, plan.cov_choice).ok();
        rep.trace_stat = trace_stat(&traj, &est, &hyp.k0, plan.cov_choice).ok();
        rep.inside = confidence_region(&traj, &est, hyp, plan.levels, plan.cov_choice)
            .ok()
            .map(|r| r.verdict == Verdict::Inside);
    }
    rep
}

/// Run every replication of the plan (in parallel when a rayon pool with
/// more than one thread is active) and reduce to a summary. Deterministic
/// given the master seed; the reduction ignores replication order.
pub fn run_ensemble(plan: &ExperimentPlan) -> Result<EnsembleSummary> {
    plan.validate()?;
    // Inverse square roots of the true covariance blocks, when they exist.
    let true_roots = plan
        .model
        .cov_blocks
        .iter()
        .map(sym_inv_sqrt)
        .collect::<Result<Vec<_>>>()
        .ok();

    let mut rows: Vec<Replication> = (0..plan.replications)
        .into_par_iter()
        .map(|i| run_one(plan, i, &true_roots))
        .collect();
    rows.sort_by_key(|r| r.index);
    Ok(summarize(plan, rows))
}

fn summarize(plan: &ExperimentPlan, rows: Vec<Replication>) -> EnsembleSummary {
    let n = rows.len();
    let surviving = rows.iter().filter(|r| r.survived).count();
    let extinct = rows
        .iter()
        .filter(|r| r.status.starts_with("extinct"))
        .count();
    // capped paths count as surviving; surviving = n - extinct
    let capped = rows.iter().filter(|r| r.status.starts_with("capped")).count();
    let survival_fraction = surviving as f64 / n as f64;
    let survival_ci95 = clopper_pearson(surviving, n, 0.05).unwrap_or((0.0, 1.0));

    let collect = |f: &dyn Fn(&Replication) -> Option<f64>| -> Vec<f64> {
        rows.iter().filter_map(|r| f(r)).collect()
    };
    let d = plan.model.dim();
    let chi_samples = collect(&|r| r.chi_stat);
    let trace_samples = collect(&|r| r.trace_stat);
    let ratios = collect(&|r| r.rho_ratio);
    let dev_qsl = collect(&|r| r.trace_dev_qsl);
    let dev_emp = collect(&|r| r.trace_dev_emp);
    let var = |v: &[f64]| -> Option<f64> {
        if v.len() < 2 {
            return None;
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        Some(v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
    };
    let trace_dev_var_qsl = var(&dev_qsl);
    let trace_dev_var_emp = var(&dev_emp);
    let variance_ratio = match (trace_dev_var_qsl, trace_dev_var_emp) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };

    let coverage = {
        let verdicts: Vec<bool> = rows.iter().filter_map(|r| r.inside).collect();
        if verdicts.is_empty() {
            None
        } else {
            let inside = verdicts.iter().filter(|&&v| v).count();
            let total = verdicts.len();
            Some(Coverage {
                inside,
                total,
                rate: inside as f64 / total as f64,
                ci95: clopper_pearson(inside, total, 0.05).unwrap_or((0.0, 1.0)),
            })
        }
    };

    EnsembleSummary {
        plan_hash: plan_hash(plan),
        replications: n,
        surviving,
        extinct,
        capped,
        survival_fraction,
        survival_ci95,
        mle_err: error_stats(&collect(&|r| r.mle_err)),
        emp_err: error_stats(&collect(&|r| r.emp_err)),
        lse_err: error_stats(&collect(&|r| r.lse_err)),
        qsl_cov_err: error_stats(&collect(&|r| r.qsl_cov_err)),
        emp_cov_err: error_stats(&collect(&|r| r.emp_cov_err)),
        chi_diag: pivot_diagnostics(&chi_samples, |x| chi2_cdf(d * d, x).unwrap_or(0.0)),
        trace_diag: pivot_diagnostics(&trace_samples, normal_cdf),
        rho_ratio_mean: if ratios.is_empty() {
            None
        } else {
            Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
        },
        coverage,
        trace_dev_var_qsl,
        trace_dev_var_emp,
        variance_ratio,
        rows,
    }
}

/// Running averages s_k of the weighted squared standardized deviations of
/// the chosen mean-estimator path from the true mean matrix; s_n estimates
/// d^2 for surviving supercritical paths.
pub fn qsl_series(traj: &Trajectory, model: &ProcessModel, choice: CovChoice) -> Result<Vec<f64>> {
    let d = traj.dim();
    let roots = model
        .cov_blocks
        .iter()
        .map(sym_inv_sqrt)
        .collect::<Result<Vec<_>>>()?;
    let path = means_path(traj)?;
    let (estimates, weights) = match choice {
        CovChoice::Qsl => (&path.mle, &path.s_prev),
        CovChoice::Empirical => (&path.emp, &path.x_prev),
    };
    let n = estimates.len();
    let mut out = Vec::with_capacity(n);
    let mut acc = 0.0;
    for k in 0..n {
        for j in 0..d {
            let w = weights[k][j];
            if w == 0.0 {
                continue;
            }
            let dev: Vec<f64> = (0..d)
                .map(|i| estimates[k][(i, j)] - model.mean_matrix[(i, j)])
                .collect();
            let z = roots[j].mul_vec(&dev)?;
            acc += w * z.iter().map(|v| v * v).sum::<f64>();
        }
        out.push(acc / (k + 1) as f64);
    }
    Ok(out)
}

/// Path-average check of the pivot distribution along a single trajectory:
/// the empirical law of the first standardized coordinate of the mean
/// deviations, compared to the standard normal by KS distance. Diagnostic
/// only; `None` when the model has a singular covariance block.
#[derive(Debug, Clone, Serialize)]
pub struct AscltDiagnostic {
    pub ks_distance: f64,
    pub samples: usize,
}

pub fn asclt_check(
    traj: &Trajectory,
    model: &ProcessModel,
    choice: CovChoice,
) -> Result<Option<AscltDiagnostic>> {
    if !model.covariances_invertible {
        return Ok(None);
    }
    let root0 = sym_inv_sqrt(&model.cov_blocks[0])?;
    let path = means_path(traj)?;
    let (estimates, weights) = match choice {
        CovChoice::Qsl => (&path.mle, &path.s_prev),
        CovChoice::Empirical => (&path.emp, &path.x_prev),
    };
    let d = traj.dim();
    let mut pivots = Vec::new();
    for k in 0..estimates.len() {
        let w = weights[k][0];
        if w == 0.0 {
            continue;
        }
        let dev: Vec<f64> = (0..d)
            .map(|i| estimates[k][(i, 0)] - model.mean_matrix[(i, 0)])
            .collect();
        let z = root0.mul_vec(&dev)?;
        pivots.push(w.sqrt() * z[0]);
    }
    Ok(pivot_diagnostics(&pivots, normal_cdf).map(|d| AscltDiagnostic {
        ks_distance: d.ks_distance,
        samples: d.count,
    }))
}

/// Run the plan with its hypothesis and report the region coverage.
pub fn coverage_experiment(plan: &ExperimentPlan) -> Result<Coverage> {
    if plan.hypothesis.is_none() {
        return Err(Error::InvalidArgument(
            "coverage_experiment needs a hypothesis".into(),
        ));
    }
    let summary = run_ensemble(plan)?;
    summary
        .coverage
        .ok_or_else(|| Error::InvalidArgument("no replication produced a verdict".into()))
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.12e}"),
        None => String::new(),
    }
}

/// One row per replication, fixed column order (see the schema file).
pub fn write_replications_csv(summary: &EnsembleSummary, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "index,seed,status,survived,horizon,mle_err,emp_err,lse_err,qsl_cov_err,emp_cov_err,chi_stat,trace_stat,rho_ratio,inside"
    )?;
    for r in &summary.rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.index,
            r.seed,
            r.status,
            r.survived,
            r.horizon,
            fmt_opt(r.mle_err),
            fmt_opt(r.emp_err),
            fmt_opt(r.lse_err),
            fmt_opt(r.qsl_cov_err),
            fmt_opt(r.emp_cov_err),
            fmt_opt(r.chi_stat),
            fmt_opt(r.trace_stat),
            fmt_opt(r.rho_ratio),
            r.inside.map(|b| b.to_string()).unwrap_or_default(),
        )?;
    }
    Ok(())
}

/// Aggregate digest as pretty JSON (rows live in the CSV, not here).
pub fn write_digest_json(summary: &EnsembleSummary, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
