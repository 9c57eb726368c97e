//! Reproduction laws, the multitype branching model, trajectory simulation at
//! three observation granularities, and the probability-generating-function
//! fixed point for extinction probabilities.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::blockmat::{is_primitive, jacobi_eigen, perron, Matrix, PerronData, SPD_EIG_FLOOR_REL};
use crate::error::{Error, Result};

/// Probability mass on a law must sum to one within this tolerance; loaders
/// renormalize deviations below it and reject anything larger.
pub const LAW_PROB_TOL: f64 = 1e-12;

/// Default cap on the total population of a trajectory.
pub const DEFAULT_POPULATION_CAP: u64 = 100_000_000;

/// How much of each generation is retained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationLevel {
    /// Population vectors X_n only.
    Counts,
    /// X_n plus the per-parent-type totals Y_n^j.
    Totals,
    /// X_n, Y_n^j and the individual offspring vectors.
    Full,
}

/// Finite-support offspring distribution of one parent type over d-vectors.
#[derive(Debug, Clone)]
pub struct OffspringLaw {
    dim: usize,
    atoms: Vec<(Vec<u64>, f64)>,
    cumulative: Vec<f64>,
}

impl OffspringLaw {
    pub fn new(dim: usize, atoms: Vec<(Vec<u64>, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidLaw("law needs at least one atom".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut total = 0.0;
        for (l, p) in &atoms {
            if l.len() != dim {
                return Err(Error::InvalidLaw(format!(
                    "atom {:?} has dimension {}, expected {}",
                    l,
                    l.len(),
                    dim
                )));
            }
            if !(*p > 0.0 && *p <= 1.0) {
                return Err(Error::InvalidLaw(format!("probability {p} outside (0, 1]")));
            }
            if !seen.insert(l.clone()) {
                return Err(Error::InvalidLaw(format!("duplicate atom {:?}", l)));
            }
            total += p;
        }
        if (total - 1.0).abs() > LAW_PROB_TOL {
            return Err(Error::InvalidLaw(format!(
                "probabilities sum to {total}, deviation exceeds {LAW_PROB_TOL}"
            )));
        }
        // Renormalize the residual rounding error.
        let atoms: Vec<(Vec<u64>, f64)> = atoms
            .into_iter()
            .map(|(l, p)| (l, p / total))
            .collect();
        let mut cumulative = Vec::with_capacity(atoms.len());
        let mut acc = 0.0;
        for (_, p) in &atoms {
            acc += p;
            cumulative.push(acc);
        }
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(OffspringLaw {
            dim,
            atoms,
            cumulative,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> &[(Vec<u64>, f64)] {
        &self.atoms
    }

    /// Exact first moment and central second moment from the finite support.
    pub fn moments(&self) -> (Vec<f64>, Matrix<f64>) {
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for (l, p) in &self.atoms {
            for i in 0..d {
                mean[i] += p * l[i] as f64;
            }
        }
        let mut cov = Matrix::zeros(d, d);
        for (l, p) in &self.atoms {
            for i in 0..d {
                let di = l[i] as f64 - mean[i];
                for j in 0..d {
                    let dj = l[j] as f64 - mean[j];
                    cov[(i, j)] += p * di * dj;
                }
            }
        }
        (mean, cov)
    }

    /// One draw from the law by binary search on the cumulative table.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> &[u64] {
        let u: f64 = rng.gen();
        let idx = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&u).unwrap())
        {
            Ok(i) => i + 1,
            Err(i) => i,
        };
        &self.atoms[idx.min(self.atoms.len() - 1)].0
    }

    /// Probability generating function evaluated at q in [0,1]^d.
    pub fn pgf(&self, q: &[f64]) -> f64 {
        self.atoms
            .iter()
            .map(|(l, p)| {
                p * l
                    .iter()
                    .zip(q)
                    .map(|(&li, &qi)| qi.powi(li as i32))
                    .product::<f64>()
            })
            .sum()
    }
}

/// A d-type branching model: offspring laws with their exact moments, the
/// Perron data of the mean matrix, and the assumption flags.
#[derive(Debug, Clone)]
pub struct ProcessModel {
    pub name: String,
    pub laws: Vec<OffspringLaw>,
    /// Mean matrix A, column j = mean of law j.
    pub mean_matrix: Matrix<f64>,
    /// Covariance blocks K^j.
    pub cov_blocks: Vec<Matrix<f64>>,
    /// Perron data, present when the mean matrix is primitive.
    pub perron: Option<PerronData>,
    pub x0: Vec<u64>,
    /// Every K^j invertible (invertible-covariance assumption).
    pub covariances_invertible: bool,
    /// Primitive mean matrix with Perron root > 1.
    pub supercritical_regular: bool,
}

impl ProcessModel {
    pub fn from_laws(name: &str, laws: Vec<OffspringLaw>, x0: Option<Vec<u64>>) -> Result<Self> {
        let d = laws.len();
        if d == 0 {
            return Err(Error::InvalidLaw("model needs at least one type".into()));
        }
        if laws.iter().any(|l| l.dim() != d) {
            return Err(Error::InvalidLaw(
                "every law must have dimension equal to the number of types".into(),
            ));
        }
        let x0 = x0.unwrap_or_else(|| vec![1; d]);
        if x0.len() != d {
            return Err(Error::Dimension("x0 dimension mismatch".into()));
        }

        let mut mean_matrix = Matrix::zeros(d, d);
        let mut cov_blocks = Vec::with_capacity(d);
        for (j, law) in laws.iter().enumerate() {
            let (mean, cov) = law.moments();
            for i in 0..d {
                mean_matrix[(i, j)] = mean[i];
            }
            cov_blocks.push(cov);
        }

        let covariances_invertible = cov_blocks.iter().all(|k| {
            jacobi_eigen(k)
                .map(|(w, _)| {
                    let max = w.iter().cloned().fold(0.0, f64::max);
                    w.iter().all(|&x| x > SPD_EIG_FLOOR_REL * max.max(1.0))
                })
                .unwrap_or(false)
        });

        let primitive = is_primitive(&mean_matrix)?;
        let perron_data = if primitive {
            Some(perron(&mean_matrix)?)
        } else {
            None
        };
        let supercritical_regular = perron_data.as_ref().map_or(false, |p| p.rho > 1.0);

        Ok(ProcessModel {
            name: name.to_string(),
            laws,
            mean_matrix,
            cov_blocks,
            perron: perron_data,
            x0,
            covariances_invertible,
            supercritical_regular,
        })
    }

    pub fn dim(&self) -> usize {
        self.laws.len()
    }

    /// Parse the JSON model description. Probabilities may be doubles or
    /// decimal strings.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Parse("model file must be a JSON object".into()))?;
        let dim = obj
            .get("dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Parse("missing or invalid field 'dim'".into()))?
            as usize;
        let name = obj
            .get("name")
            .and_then(|v| v.as_str())
            .unwrap_or("unnamed")
            .to_string();
        let laws_val = obj
            .get("laws")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Parse("missing or invalid field 'laws'".into()))?;
        if laws_val.len() != dim {
            return Err(Error::Parse(format!(
                "'laws' has {} entries, expected dim = {dim}",
                laws_val.len()
            )));
        }
        let mut laws = Vec::with_capacity(dim);
        for (j, law_val) in laws_val.iter().enumerate() {
            let atoms_val = law_val
                .as_array()
                .ok_or_else(|| Error::Parse(format!("law {j}: expected an array of atoms")))?;
            let mut atoms = Vec::with_capacity(atoms_val.len());
            for (k, atom) in atoms_val.iter().enumerate() {
                let pair = atom.as_array().filter(|a| a.len() == 2).ok_or_else(|| {
                    Error::Parse(format!("law {j} atom {k}: expected [counts, probability]"))
                })?;
                let counts: Vec<u64> = pair[0]
                    .as_array()
                    .ok_or_else(|| Error::Parse(format!("law {j} atom {k}: counts not an array")))?
                    .iter()
                    .map(|c| {
                        c.as_u64().ok_or_else(|| {
                            Error::Parse(format!("law {j} atom {k}: counts must be nonnegative integers"))
                        })
                    })
                    .collect::<Result<_>>()?;
                let prob = match &pair[1] {
                    serde_json::Value::Number(n) => n.as_f64().ok_or_else(|| {
                        Error::Parse(format!("law {j} atom {k}: invalid probability"))
                    })?,
                    serde_json::Value::String(s) => s.parse::<f64>().map_err(|_| {
                        Error::Parse(format!("law {j} atom {k}: invalid probability string '{s}'"))
                    })?,
                    _ => {
                        return Err(Error::Parse(format!(
                            "law {j} atom {k}: probability must be a number or decimal string"
                        )))
                    }
                };
                atoms.push((counts, prob));
            }
            laws.push(OffspringLaw::new(dim, atoms)?);
        }
        let x0 = match obj.get("x0") {
            None => None,
            Some(v) => Some(
                v.as_array()
                    .ok_or_else(|| Error::Parse("'x0' must be an array".into()))?
                    .iter()
                    .map(|c| {
                        c.as_u64()
                            .ok_or_else(|| Error::Parse("'x0' entries must be nonnegative integers".into()))
                    })
                    .collect::<Result<Vec<u64>>>()?,
            ),
        };
        ProcessModel::from_laws(&name, laws, x0)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }
}

/// Trajectory caps; breaching them is a status, not an error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Caps {
    pub max_total_population: u64,
    pub max_generation: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            max_total_population: DEFAULT_POPULATION_CAP,
            max_generation: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectoryStatus {
    Alive,
    ExtinctAt(usize),
    CappedAt(usize),
}

impl TrajectoryStatus {
    pub fn label(&self) -> String {
        match self {
            TrajectoryStatus::Alive => "alive".into(),
            TrajectoryStatus::ExtinctAt(n) => format!("extinct-at-{n}"),
            TrajectoryStatus::CappedAt(n) => format!("capped-at-{n}"),
        }
    }
}

/// One simulated generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRecord {
    /// Population vector X_n.
    pub x: Vec<u64>,
    /// Per-parent-type totals Y_n^j; absent at COUNTS level.
    pub y: Option<Vec<Vec<u64>>>,
    /// Individual offspring vectors per type, present at FULL level:
    /// detail[j][k] is the offspring of the k-th type-j parent.
    pub detail: Option<Vec<Vec<Vec<u64>>>>,
}

/// A simulated path: X_0 plus the records of generations 1..=horizon, with
/// the extinction / cap status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub model_name: String,
    pub seed: u64,
    pub x0: Vec<u64>,
    pub generations: Vec<GenerationRecord>,
    pub status: TrajectoryStatus,
    pub level: ObservationLevel,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    /// Number of recorded generations beyond X_0.
    pub fn horizon(&self) -> usize {
        self.generations.len()
    }

    /// X_n with X_0 = x0.
    pub fn x_at(&self, n: usize) -> &[u64] {
        if n == 0 {
            &self.x0
        } else {
            &self.generations[n - 1].x
        }
    }

    /// Whether the population is still alive at the last recorded generation.
    pub fn survived(&self) -> bool {
        !matches!(self.status, TrajectoryStatus::ExtinctAt(_))
    }
}

/// Simulate one generation from `x_prev`. At FULL level each parent is
/// sampled individually so the offspring vectors are retained; at TOTALS and
/// COUNTS levels the per-type totals are drawn by an exactly equivalent
/// multinomial decomposition into conditional binomials.
pub fn simulate_generation(
    model: &ProcessModel,
    x_prev: &[u64],
    rng: &mut ChaCha12Rng,
    level: ObservationLevel,
) -> Result<GenerationRecord> {
    let d = model.dim();
    if x_prev.len() != d {
        return Err(Error::Dimension("simulate_generation: x_prev dimension".into()));
    }
    let mut y: Vec<Vec<u64>> = vec![vec![0; d]; d];
    let mut detail: Option<Vec<Vec<Vec<u64>>>> = if level == ObservationLevel::Full {
        Some(vec![Vec::new(); d])
    } else {
        None
    };

    for j in 0..d {
        let parents = x_prev[j];
        if parents == 0 {
            continue;
        }
        let law = &model.laws[j];
        if level == ObservationLevel::Full {
            let det = &mut detail.as_mut().unwrap()[j];
            det.reserve(parents as usize);
            for _ in 0..parents {
                let offspring = law.sample(rng).to_vec();
                for i in 0..d {
                    y[j][i] = y[j][i]
                        .checked_add(offspring[i])
                        .ok_or(Error::PopulationCap {
                            cap: u64::MAX,
                            generation: 0,
                        })?;
                }
                det.push(offspring);
            }
        } else {
            // Multinomial over atoms via sequential conditional binomials.
            let mut remaining = parents;
            let mut rest_prob = 1.0;
            for (idx, (atom, p)) in law.atoms().iter().enumerate() {
                if remaining == 0 {
                    break;
                }
                let count = if idx + 1 == law.atoms().len() {
                    remaining
                } else {
                    let cond = (p / rest_prob).clamp(0.0, 1.0);
                    let bin = Binomial::new(remaining, cond)
                        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    bin.sample(rng)
                };
                for i in 0..d {
                    y[j][i] = y[j][i]
                        .checked_add(count.saturating_mul(atom[i]))
                        .ok_or(Error::PopulationCap {
                            cap: u64::MAX,
                            generation: 0,
                        })?;
                }
                remaining -= count;
                rest_prob -= p;
            }
        }
    }

    let mut x = vec![0u64; d];
    for j in 0..d {
        for i in 0..d {
            x[i] += y[j][i];
        }
    }

    let y = if level == ObservationLevel::Counts {
        None
    } else {
        Some(y)
    };
    Ok(GenerationRecord { x, y, detail })
}

/// Simulate a trajectory from the model's X_0, stopping at the horizon, at
/// extinction, or when a cap is breached.
pub fn simulate_trajectory(
    model: &ProcessModel,
    horizon: usize,
    caps: Caps,
    seed: u64,
    level: ObservationLevel,
) -> Result<Trajectory> {
    use rand::SeedableRng;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut generations = Vec::with_capacity(horizon);
    let mut status = TrajectoryStatus::Alive;
    let mut x_prev = model.x0.clone();
    let max_gen = horizon.min(caps.max_generation);

    for n in 1..=max_gen {
        let record = simulate_generation(model, &x_prev, &mut rng, level)?;
        let total: u64 = record.x.iter().sum();
        x_prev = record.x.clone();
        generations.push(record);
        if total == 0 {
            status = TrajectoryStatus::ExtinctAt(n);
            break;
        }
        if total > caps.max_total_population {
            status = TrajectoryStatus::CappedAt(n);
            break;
        }
    }
    if status == TrajectoryStatus::Alive && max_gen < horizon {
        status = TrajectoryStatus::CappedAt(max_gen);
    }

    Ok(Trajectory {
        model_name: model.name.clone(),
        seed,
        x0: model.x0.clone(),
        generations,
        status,
        level,
    })
}

/// Smallest fixed point of the vector pgf system q = f(q), iterated from
/// zero. Componentwise monotone nondecreasing in the iteration index.
pub fn extinction_probability(model: &ProcessModel, tol: f64) -> Result<Vec<f64>> {
    let d = model.dim();
    let mut q = vec![0.0; d];
    let max_iter = 1_000_000;
    for _ in 0..max_iter {
        let next: Vec<f64> = (0..d).map(|j| model.laws[j].pgf(&q)).collect();
        debug_assert!(next.iter().zip(&q).all(|(n, o)| *n >= *o - 1e-15));
        let diff = next
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        q = next;
        if diff < tol {
            return Ok(q);
        }
    }
    // Critical models approach 1 sublinearly; report the iterate.
    Ok(q)
}

/// Per-generation estimates of the growth limit W: rho^{-n} <v, X_n>.
pub fn growth_diagnostics(traj: &Trajectory, perron: &PerronData) -> Vec<f64> {
    let mut out = Vec::with_capacity(traj.horizon() + 1);
    for n in 0..=traj.horizon() {
        let x = traj.x_at(n);
        let vx: f64 = x
            .iter()
            .zip(&perron.v)
            .map(|(&xi, &vi)| xi as f64 * vi)
            .sum();
        out.push(perron.rho.powi(-(n as i32)) * vx);
    }
    out
}
