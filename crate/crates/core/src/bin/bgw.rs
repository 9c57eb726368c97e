//! Command-line front end: validate model files, simulate trajectories,
//! estimate from them, and run Monte Carlo ensembles. Every command is
//! deterministic given its config (seeds are explicit, never time-based),
//! and outputs embed a hash of the config for reproducibility audits.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use bgw::blockmat::{lse_applicable, Matrix};
use bgw::error::Error;
use bgw::estimators::{estimate_all, mle_distribution};
use bgw::inference::{confidence_region, CovChoice, Hypothesis};
use bgw::montecarlo::{
    plan_hash, run_ensemble, write_digest_json, write_replications_csv, ExperimentPlan,
};
use bgw::process::{
    extinction_probability, simulate_trajectory, Caps, GenerationRecord, ObservationLevel,
    ProcessModel, Trajectory, TrajectoryStatus,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_ASSUMPTION: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "bgw", about = "Multitype branching process simulation and inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for the Monte Carlo phase (default 1, reproducible).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory (default: current directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the observation level.
    #[arg(long, global = true, value_parser = parse_level)]
    level: Option<ObservationLevel>,
}

fn parse_level(s: &str) -> Result<ObservationLevel, String> {
    match s {
        "counts" => Ok(ObservationLevel::Counts),
        "totals" => Ok(ObservationLevel::Totals),
        "full" => Ok(ObservationLevel::Full),
        other => Err(format!("unknown level '{other}' (counts|totals|full)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file against the standing assumptions.
    Validate {
        /// Model JSON file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Simulate a trajectory and write it as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compute every applicable estimator from a simulated trajectory.
    Estimate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a replicated Monte Carlo experiment.
    Mc {
        #[arg(long)]
        config: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Parse(_)
        | Error::InvalidLaw(_)
        | Error::InvalidArgument(_)
        | Error::Dimension(_)
        | Error::ObservationLevel { .. } => EXIT_CONFIG,
        Error::Assumption(_) | Error::NotPrimitive => EXIT_ASSUMPTION,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 1 {
        // A failed build means a pool already exists; keep going with it.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let result = match &cli.command {
        Command::Validate { config } => cmd_validate(config),
        Command::Simulate { config } => cmd_simulate(config, &out_dir, cli.seed, cli.level),
        Command::Estimate { config } => cmd_estimate(config, &out_dir),
        Command::Mc { config } => cmd_mc(config, &out_dir, cli.seed, cli.level),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn config_hash(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

fn print_matrix(label: &str, m: &Matrix<f64>) {
    println!("{label}:");
    for i in 0..m.rows() {
        let row: Vec<String> = (0..m.cols()).map(|j| format!("{:.6}", m[(i, j)])).collect();
        println!("  [{}]", row.join(", "));
    }
}

fn cmd_validate(model_path: &Path) -> Result<ExitCode, Error> {
    let model = ProcessModel::from_json_file(model_path)?;
    let d = model.dim();
    println!("model: {} (d = {d})", model.name);
    print_matrix("mean matrix A", &model.mean_matrix);
    for (j, k) in model.cov_blocks.iter().enumerate() {
        print_matrix(&format!("covariance block K^{}", j + 1), k);
    }
    match &model.perron {
        Some(p) => {
            println!("rho = {:.10}", p.rho);
            println!("u = {:?}", p.u);
            println!("v = {:?}", p.v);
            println!("spectral gap = {:.6}", p.gap);
            println!("positively regular: yes");
            println!(
                "supercritical: {}",
                if p.rho > 1.0 { "yes" } else { "no" }
            );
            match lse_applicable(&model.mean_matrix, p) {
                Ok(rep) => {
                    println!("least-squares applicability: {}", if rep.ok { "ok" } else { "not satisfied" });
                    for r in &rep.reasons {
                        println!("  - {r}");
                    }
                }
                Err(e) => println!("least-squares applicability: check failed ({e})"),
            }
        }
        None => println!("positively regular: no (mean matrix is not primitive)"),
    }
    println!(
        "covariance blocks invertible: {}",
        if model.covariances_invertible { "yes" } else { "no" }
    );
    let q = extinction_probability(&model, 1e-12)?;
    println!("extinction probability q = {q:?}");

    if !model.supercritical_regular {
        eprintln!("assumption failure: model is not positively regular and supercritical");
        return Ok(ExitCode::from(EXIT_ASSUMPTION));
    }
    if !model.covariances_invertible {
        eprintln!("assumption failure: a covariance block is singular");
        return Ok(ExitCode::from(EXIT_ASSUMPTION));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct CapsConfig {
    max_total_population: Option<u64>,
    max_generation: Option<usize>,
}

impl CapsConfig {
    fn to_caps(&self) -> Caps {
        let d = Caps::default();
        Caps {
            max_total_population: self.max_total_population.unwrap_or(d.max_total_population),
            max_generation: self.max_generation.unwrap_or(d.max_generation),
        }
    }
}

#[derive(Deserialize)]
struct SimulateConfig {
    model: PathBuf,
    horizon: usize,
    seed: Option<u64>,
    level: Option<ObservationLevel>,
    caps: Option<CapsConfig>,
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn cmd_simulate(
    config_path: &Path,
    out_dir: &Path,
    seed_flag: Option<u64>,
    level_flag: Option<ObservationLevel>,
) -> Result<ExitCode, Error> {
    let cfg: SimulateConfig = load_config(config_path)?;
    let seed = seed_flag.or(cfg.seed).ok_or_else(|| {
        Error::InvalidArgument("simulate requires a seed (config or --seed)".into())
    })?;
    let level = level_flag.or(cfg.level).unwrap_or(ObservationLevel::Totals);
    let caps = cfg.caps.as_ref().map(|c| c.to_caps()).unwrap_or_default();
    let model = ProcessModel::from_json_file(&resolve(config_path, &cfg.model))?;
    let traj = simulate_trajectory(&model, cfg.horizon, caps, seed, level)?;
    let hash = config_hash(config_path)?;
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(format!("trajectory_{hash}.csv"));
    write_trajectory_csv(&traj, &hash, &csv_path)?;
    println!("wrote {}", csv_path.display());
    if level == ObservationLevel::Full {
        let detail_path = out_dir.join(format!("detail_{hash}.json"));
        write_detail_json(&traj, &detail_path)?;
        println!("wrote {}", detail_path.display());
    }
    println!("status: {}", traj.status.label());
    Ok(ExitCode::SUCCESS)
}

fn write_trajectory_csv(traj: &Trajectory, hash: &str, path: &Path) -> Result<(), Error> {
    use std::io::Write;
    let d = traj.dim();
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "# model={} seed={} level={} config_hash={hash}",
        traj.model_name,
        traj.seed,
        match traj.level {
            ObservationLevel::Counts => "counts",
            ObservationLevel::Totals => "totals",
            ObservationLevel::Full => "full",
        }
    )?;
    let mut header = vec!["generation".to_string(), "status".to_string()];
    for i in 0..d {
        header.push(format!("x_{i}"));
    }
    if traj.level >= ObservationLevel::Totals {
        for j in 0..d {
            for i in 0..d {
                header.push(format!("y_{j}_{i}"));
            }
        }
    }
    writeln!(f, "{}", header.join(","))?;
    for n in 0..=traj.horizon() {
        let status = if n == traj.horizon() {
            traj.status.label()
        } else {
            "alive".to_string()
        };
        let mut row = vec![n.to_string(), status];
        for &x in traj.x_at(n) {
            row.push(x.to_string());
        }
        if traj.level >= ObservationLevel::Totals {
            if n == 0 {
                for _ in 0..d * d {
                    row.push(String::new());
                }
            } else {
                let y = traj.generations[n - 1].y.as_ref().expect("level checked");
                for yj in y {
                    for &v in yj {
                        row.push(v.to_string());
                    }
                }
            }
        }
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

fn write_detail_json(traj: &Trajectory, path: &Path) -> Result<(), Error> {
    let detail: Vec<_> = traj
        .generations
        .iter()
        .map(|g| g.detail.clone().expect("full level"))
        .collect();
    let text = serde_json::to_string(&detail).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn read_trajectory_csv(path: &Path, detail_path: Option<&Path>) -> Result<Trajectory, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut model_name = "unknown".to_string();
    let mut seed = 0u64;
    let mut lines = Vec::new();
    for line in text.lines() {
        if let Some(meta) = line.strip_prefix('#') {
            for token in meta.split_whitespace() {
                if let Some(v) = token.strip_prefix("model=") {
                    model_name = v.to_string();
                }
                if let Some(v) = token.strip_prefix("seed=") {
                    seed = v.parse().unwrap_or(0);
                }
            }
        } else if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    if lines.len() < 2 {
        return Err(Error::Parse(format!("{}: no data rows", path.display())));
    }
    let header: Vec<&str> = lines[0].split(',').collect();
    let d = header.iter().filter(|h| h.starts_with("x_")).count();
    let has_y = header.iter().any(|h| h.starts_with("y_"));
    if d == 0 {
        return Err(Error::Parse(format!("{}: no x columns", path.display())));
    }

    let parse_row = |line: &str| -> Result<(Vec<u64>, Option<Vec<Vec<u64>>>, String), Error> {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Parse(format!("{}: ragged row", path.display())));
        }
        let status = cells[1].to_string();
        let mut x = Vec::with_capacity(d);
        for c in &cells[2..2 + d] {
            x.push(
                c.parse::<u64>()
                    .map_err(|_| Error::Parse(format!("bad count '{c}'")))?,
            );
        }
        let y = if has_y && !cells[2 + d].is_empty() {
            let mut y = vec![vec![0u64; d]; d];
            for j in 0..d {
                for i in 0..d {
                    let c = cells[2 + d + j * d + i];
                    y[j][i] = c
                        .parse::<u64>()
                        .map_err(|_| Error::Parse(format!("bad count '{c}'")))?;
                }
            }
            Some(y)
        } else {
            None
        };
        Ok((x, y, status))
    };

    let (x0, _, _) = parse_row(lines[1])?;
    let mut generations = Vec::new();
    let mut status = TrajectoryStatus::Alive;
    for line in &lines[2..] {
        let (x, y, s) = parse_row(line)?;
        generations.push(GenerationRecord { x, y, detail: None });
        if let Some(n) = s.strip_prefix("extinct-at-") {
            status = TrajectoryStatus::ExtinctAt(n.parse().unwrap_or(generations.len()));
        } else if let Some(n) = s.strip_prefix("capped-at-") {
            status = TrajectoryStatus::CappedAt(n.parse().unwrap_or(generations.len()));
        }
    }
    let mut level = if has_y {
        ObservationLevel::Totals
    } else {
        ObservationLevel::Counts
    };
    if let Some(dp) = detail_path {
        let text = std::fs::read_to_string(dp)?;
        let detail: Vec<Vec<Vec<Vec<u64>>>> =
            serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        if detail.len() != generations.len() {
            return Err(Error::Parse("detail file length mismatch".into()));
        }
        for (g, det) in generations.iter_mut().zip(detail) {
            g.detail = Some(det);
        }
        level = ObservationLevel::Full;
    }
    Ok(Trajectory {
        model_name,
        seed,
        x0,
        generations,
        status,
        level,
    })
}

#[derive(Deserialize)]
struct EstimateConfig {
    trajectory: PathBuf,
    detail: Option<PathBuf>,
    hypothesis: Option<PathBuf>,
    cov: Option<CovChoice>,
    levels: Option<(f64, f64)>,
    /// Estimators that must be available; "distribution" forces FULL level.
    require: Option<Vec<String>>,
}

fn parse_json_num(v: &serde_json::Value, what: &str) -> Result<f64, Error> {
    match v {
        serde_json::Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| Error::Parse(format!("{what}: invalid number"))),
        serde_json::Value::String(s) => s
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("{what}: invalid number string '{s}'"))),
        _ => Err(Error::Parse(format!("{what}: expected a number"))),
    }
}

fn parse_matrix(v: &serde_json::Value, what: &str) -> Result<Matrix<f64>, Error> {
    let rows = v
        .as_array()
        .ok_or_else(|| Error::Parse(format!("{what}: expected an array of rows")))?;
    let mut data = Vec::new();
    for row in rows {
        let cells = row
            .as_array()
            .ok_or_else(|| Error::Parse(format!("{what}: row is not an array")))?;
        let mut r = Vec::with_capacity(cells.len());
        for c in cells {
            r.push(parse_json_num(c, what)?);
        }
        data.push(r);
    }
    Matrix::from_rows(&data)
}

fn load_hypothesis(path: &Path) -> Result<Hypothesis, Error> {
    let text = std::fs::read_to_string(path)?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    let a0 = parse_matrix(
        v.get("a0")
            .ok_or_else(|| Error::Parse("hypothesis: missing 'a0'".into()))?,
        "a0",
    )?;
    let k0_val = v
        .get("k0")
        .and_then(|k| k.as_array())
        .ok_or_else(|| Error::Parse("hypothesis: missing 'k0'".into()))?;
    let mut k0 = Vec::with_capacity(k0_val.len());
    for (j, blk) in k0_val.iter().enumerate() {
        k0.push(parse_matrix(blk, &format!("k0[{j}]"))?);
    }
    Ok(Hypothesis { a0, k0 })
}

fn cmd_estimate(config_path: &Path, out_dir: &Path) -> Result<ExitCode, Error> {
    let cfg: EstimateConfig = load_config(config_path)?;
    let traj_path = resolve(config_path, &cfg.trajectory);
    let detail_path = cfg.detail.as_ref().map(|p| resolve(config_path, p));
    let traj = read_trajectory_csv(&traj_path, detail_path.as_deref())?;

    if let Some(required) = &cfg.require {
        for name in required {
            let needed = match name.as_str() {
                "lse" => ObservationLevel::Counts,
                "mle" | "empirical" | "covariance" => ObservationLevel::Totals,
                "distribution" => ObservationLevel::Full,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown estimator '{other}' (lse|mle|empirical|covariance|distribution)"
                    )))
                }
            };
            if traj.level < needed {
                return Err(Error::ObservationLevel {
                    have: traj.level,
                    need: needed,
                    estimator: name.clone(),
                });
            }
        }
    }

    let est = estimate_all(&traj)?;
    let hash = config_hash(config_path)?;
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(format!("estimates_{hash}.csv"));
    write_estimates_csv(&est, &traj, &hash, &csv_path)?;
    println!("wrote {}", csv_path.display());

    if traj.level == ObservationLevel::Full {
        let law = mle_distribution(&traj)?;
        let law_path = out_dir.join(format!("law_{hash}.json"));
        let text =
            serde_json::to_string_pretty(&law_json(&law)).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&law_path, text + "\n")?;
        println!("wrote {}", law_path.display());
    }

    if let Some(hyp_path) = &cfg.hypothesis {
        let hyp = load_hypothesis(&resolve(config_path, hyp_path))?;
        let choice = cfg.cov.unwrap_or(CovChoice::Empirical);
        let levels = cfg.levels.unwrap_or((0.05, 0.05));
        let report = confidence_region(&traj, &est, &hyp, levels, choice)?;
        let json_path = out_dir.join(format!("region_{hash}.json"));
        let text =
            serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&json_path, text + "\n")?;
        println!("wrote {}", json_path.display());
        println!("verdict: {:?}", report.verdict);
    }
    Ok(ExitCode::SUCCESS)
}

fn law_json(law: &bgw::estimators::LawEstimate) -> serde_json::Value {
    let per_type: Vec<serde_json::Value> = law
        .per_type
        .iter()
        .map(|m| {
            serde_json::Value::Array(
                m.iter()
                    .map(|(l, p)| serde_json::json!([l, p]))
                    .collect(),
            )
        })
        .collect();
    serde_json::json!({ "per_type": per_type })
}

fn write_estimates_csv(
    est: &bgw::estimators::EstimateSet,
    traj: &Trajectory,
    hash: &str,
    path: &Path,
) -> Result<(), Error> {
    use std::io::Write;
    let d = traj.dim();
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# model={} seed={} config_hash={hash}", traj.model_name, traj.seed)?;
    writeln!(f, "quantity,block,row,col,value")?;
    let mut write_mat = |name: &str, block: &str, m: &Matrix<f64>| -> std::io::Result<()> {
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                writeln!(f, "{name},{block},{i},{j},{:.17e}", m[(i, j)])?;
            }
        }
        Ok(())
    };
    write_mat("mle_means", "", &est.mle_means)?;
    write_mat("emp_means", "", &est.emp_means)?;
    if let Some(l) = &est.lse_means {
        write_mat("lse_means", "", l)?;
    }
    for j in 0..d {
        write_mat("qsl_cov", &j.to_string(), &est.qsl_cov[j])?;
        write_mat("emp_cov", &j.to_string(), &est.emp_cov[j])?;
    }
    for j in 0..d {
        writeln!(f, "s_prev,{j},0,0,{:.17e}", est.normalizers.s_prev[j])?;
        writeln!(f, "x_prev,{j},0,0,{:.17e}", est.normalizers.x_prev[j])?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct McConfig {
    model: PathBuf,
    horizon: usize,
    replications: usize,
    seed: Option<u64>,
    level: Option<ObservationLevel>,
    caps: Option<CapsConfig>,
    cov: Option<CovChoice>,
    levels: Option<(f64, f64)>,
    condition_on_survival: Option<bool>,
    /// Path to a hypothesis file, or the string "truth" for the generating
    /// parameters.
    hypothesis: Option<serde_json::Value>,
}

fn cmd_mc(
    config_path: &Path,
    out_dir: &Path,
    seed_flag: Option<u64>,
    level_flag: Option<ObservationLevel>,
) -> Result<ExitCode, Error> {
    let cfg: McConfig = load_config(config_path)?;
    let seed = seed_flag.or(cfg.seed).ok_or_else(|| {
        Error::InvalidArgument("mc requires a seed (config or --seed)".into())
    })?;
    let model = ProcessModel::from_json_file(&resolve(config_path, &cfg.model))?;
    let hypothesis = match &cfg.hypothesis {
        None => None,
        Some(serde_json::Value::String(s)) if s == "truth" => Some(Hypothesis {
            a0: model.mean_matrix.clone(),
            k0: model.cov_blocks.clone(),
        }),
        Some(serde_json::Value::String(s)) => {
            Some(load_hypothesis(&resolve(config_path, Path::new(s)))?)
        }
        Some(_) => {
            return Err(Error::Parse(
                "mc: 'hypothesis' must be a file path or \"truth\"".into(),
            ))
        }
    };
    let mut plan = ExperimentPlan::new(model, cfg.horizon, cfg.replications, seed);
    plan.level = level_flag.or(cfg.level).unwrap_or(ObservationLevel::Totals);
    plan.caps = cfg.caps.as_ref().map(|c| c.to_caps()).unwrap_or_default();
    plan.hypothesis = hypothesis;
    if let Some(l) = cfg.levels {
        plan.levels = l;
    }
    if let Some(c) = cfg.cov {
        plan.cov_choice = c;
    }
    if let Some(c) = cfg.condition_on_survival {
        plan.condition_on_survival = c;
    }

    let summary = run_ensemble(&plan)?;
    let hash = plan_hash(&plan);
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(format!("replications_{hash}.csv"));
    let json_path = out_dir.join(format!("digest_{hash}.json"));
    write_replications_csv(&summary, &csv_path)?;
    write_digest_json(&summary, &json_path)?;

    println!("plan {hash}: {} replications", summary.replications);
    println!(
        "survival: {}/{} = {:.4} (95% CI {:.4}..{:.4})",
        summary.surviving,
        summary.replications,
        summary.survival_fraction,
        summary.survival_ci95.0,
        summary.survival_ci95.1
    );
    if let Some(e) = &summary.mle_err {
        println!("mle error: mean {:.6} median {:.6}", e.mean, e.median);
    }
    if let Some(e) = &summary.lse_err {
        println!("lse error: mean {:.6} median {:.6}", e.mean, e.median);
    }
    if let Some(c) = &summary.coverage {
        println!(
            "coverage: {}/{} = {:.4} (95% CI {:.4}..{:.4})",
            c.inside, c.total, c.rate, c.ci95.0, c.ci95.1
        );
    }
    if let Some(r) = summary.variance_ratio {
        println!("trace-deviation variance ratio (qsl/empirical): {r:.4}");
    }
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());
    Ok(ExitCode::SUCCESS)
}
