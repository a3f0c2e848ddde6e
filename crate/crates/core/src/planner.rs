//! Turns an index and a request into an optimization problem, runs the
//! engine and picks a concrete, integral execution plan from the front.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::moea::{
    self, Bounds, EvalError, Evaluation, Individual, MoeaConfig, MoeaError, Problem,
};
use crate::objectives::{
    Evaluator, ExecutionRequest, ObjectiveError, ObjectiveVector, Penalties, TechnologyProfile,
    DEFAULT_PENALTY, VARS_PER_NODE,
};
use crate::routing::DataRoute;
use crate::system_model::{NodeId, SystemIndex};

/// Objective vectors closer than this in every component are one point.
pub const FRONT_DEDUP_TOLERANCE: f64 = 1e-12;

const COMPONENTS: [&str; VARS_PER_NODE] = ["cpu", "gpu", "arm"];

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("index has no nodes")]
    EmptyIndex,
    #[error("entry node {0} is not in the index")]
    UnknownEntryNode(NodeId),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no feasible solution")]
    NoFeasibleSolution,
    #[error("rounded plan is infeasible: {0}")]
    RoundingInfeasible(String),
    #[error("front has {len} points, index {index} out of range")]
    PolicyIndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Objective(ObjectiveError),
    #[error(transparent)]
    Moea(#[from] MoeaError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl From<ObjectiveError> for PlanError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::UnknownEntryNode(id) => PlanError::UnknownEntryNode(id),
            ObjectiveError::InvalidRequest(m) => PlanError::InvalidRequest(m),
            other => PlanError::Objective(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Closest point to the ideal after min-max normalization.
    #[default]
    Knee,
    MinTime,
    MinEnergy,
    /// Position in the time-sorted front.
    UserIndex(usize),
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionPolicy::Knee => f.write_str("knee"),
            SelectionPolicy::MinTime => f.write_str("min_time"),
            SelectionPolicy::MinEnergy => f.write_str("min_energy"),
            SelectionPolicy::UserIndex(i) => write!(f, "user_index:{i}"),
        }
    }
}

impl FromStr for SelectionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "knee" => Ok(SelectionPolicy::Knee),
            "min_time" => Ok(SelectionPolicy::MinTime),
            "min_energy" => Ok(SelectionPolicy::MinEnergy),
            other => other
                .strip_prefix("user_index:")
                .and_then(|i| i.parse().ok())
                .map(SelectionPolicy::UserIndex)
                .ok_or_else(|| format!("unknown policy `{other}`")),
        }
    }
}

/// Everything tunable about a planning run. Deserializes from the planner
/// config file; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub profile: TechnologyProfile,
    pub moea: MoeaConfig,
    pub policy: SelectionPolicy,
    pub penalty_time: f64,
    pub penalty_energy: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            profile: TechnologyProfile::default(),
            moea: MoeaConfig::default(),
            policy: SelectionPolicy::Knee,
            penalty_time: DEFAULT_PENALTY,
            penalty_energy: DEFAULT_PENALTY,
        }
    }
}

impl PlannerConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn penalties(&self) -> Penalties {
        Penalties {
            time: self.penalty_time,
            energy: self.penalty_energy,
        }
    }
}

/// The optimization problem for one request against one index version.
#[derive(Debug, Clone)]
pub struct PlanningProblem {
    request_id: String,
    index_version: u64,
    bounds: Vec<(f64, f64)>,
    evaluator: Evaluator,
}

impl Problem for PlanningProblem {
    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn evaluate(&self, genome: &[f64]) -> Result<Evaluation, EvalError> {
        Ok(to_evaluation(self.evaluator.evaluate(genome)?))
    }
}

fn to_evaluation(v: ObjectiveVector) -> Evaluation {
    Evaluation {
        objectives: vec![v.time, v.energy],
        constraints: v.constraints,
        feasible: v.feasible,
    }
}

impl PlanningProblem {
    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    pub fn request_id(&self) -> &str {
        &self.request_id
    }

    pub fn index_version(&self) -> u64 {
        self.index_version
    }
}

/// Bounds are `[0, capacity]` per (node, component) in id order; the
/// evaluator holds the precomputed routes and base costs.
pub fn build_problem(
    index: &SystemIndex,
    request: &ExecutionRequest,
    config: &PlannerConfig,
) -> Result<PlanningProblem, PlanError> {
    if index.node_count() == 0 {
        return Err(PlanError::EmptyIndex);
    }
    let evaluator = Evaluator::new(index, request, config.profile, config.penalties())?;
    let bounds = index
        .nodes()
        .iter()
        .flat_map(|n| n.capacities())
        .map(|cap| (0.0, cap as f64))
        .collect();
    Ok(PlanningProblem {
        request_id: request.request_id.clone(),
        index_version: index.version(),
        bounds,
        evaluator,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontPoint {
    pub time_s: f64,
    pub energy_j: f64,
    pub feasible: bool,
    pub genome: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontMetadata {
    pub request_id: String,
    pub index_version: u64,
    pub seed: u64,
    pub config: PlannerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontExport {
    pub points: Vec<FrontPoint>,
    pub metadata: FrontMetadata,
}

/// Feasible rank-0 members, deduplicated on objectives and sorted by time.
pub fn extract_front(
    population: &[Individual],
    metadata: FrontMetadata,
) -> Result<FrontExport, PlanError> {
    let mut points: Vec<FrontPoint> = population
        .iter()
        .filter(|ind| ind.rank == Some(0))
        .filter_map(|ind| {
            let ev = ind.evaluation.as_ref()?;
            ev.feasible.then(|| FrontPoint {
                time_s: ev.objectives[0],
                energy_j: ev.objectives[1],
                feasible: true,
                genome: ind.genome.clone(),
            })
        })
        .collect();
    if points.is_empty() {
        return Err(PlanError::NoFeasibleSolution);
    }
    points.sort_by(|a, b| {
        a.time_s
            .total_cmp(&b.time_s)
            .then(a.energy_j.total_cmp(&b.energy_j))
    });
    let mut unique: Vec<FrontPoint> = Vec::with_capacity(points.len());
    for p in points {
        let duplicate = unique.iter().any(|q| {
            (q.time_s - p.time_s).abs() <= FRONT_DEDUP_TOLERANCE
                && (q.energy_j - p.energy_j).abs() <= FRONT_DEDUP_TOLERANCE
        });
        if !duplicate {
            unique.push(p);
        }
    }
    Ok(FrontExport {
        points: unique,
        metadata,
    })
}

/// Index of the front point chosen by `policy`.
pub fn choose_point(front: &[FrontPoint], policy: SelectionPolicy) -> Result<usize, PlanError> {
    if front.is_empty() {
        return Err(PlanError::NoFeasibleSolution);
    }
    let first_min = |key: &dyn Fn(&FrontPoint) -> f64| {
        front
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, p)| {
                let k = key(p);
                if k < best.1 {
                    (i, k)
                } else {
                    best
                }
            })
            .0
    };
    Ok(match policy {
        SelectionPolicy::MinTime => first_min(&|p| p.time_s),
        SelectionPolicy::MinEnergy => first_min(&|p| p.energy_j),
        SelectionPolicy::UserIndex(i) if i < front.len() => i,
        SelectionPolicy::UserIndex(index) => {
            return Err(PlanError::PolicyIndexOutOfRange {
                index,
                len: front.len(),
            })
        }
        SelectionPolicy::Knee => {
            let range = |f: fn(&FrontPoint) -> f64| {
                let lo = front.iter().map(f).fold(f64::INFINITY, f64::min);
                let hi = front.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
                (lo, hi - lo)
            };
            let (t0, tr) = range(|p| p.time_s);
            let (e0, er) = range(|p| p.energy_j);
            let norm = |v: f64, lo: f64, r: f64| if r > 0.0 { (v - lo) / r } else { 0.0 };
            first_min(&|p| {
                let t = norm(p.time_s, t0, tr);
                let e = norm(p.energy_j, e0, er);
                (t * t + e * e).sqrt()
            })
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub cpu: u32,
    pub gpu: u32,
    pub arm: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub request_id: String,
    pub index_version: u64,
    pub assignments: BTreeMap<NodeId, Assignment>,
    pub routes: BTreeMap<String, DataRoute>,
    pub predicted: ObjectiveVector,
    pub selection: SelectionPolicy,
}

impl ExecutionPlan {
    /// The integral plan as a genome.
    pub fn genome(&self) -> Vec<f64> {
        self.assignments
            .values()
            .flat_map(|a| [a.cpu as f64, a.gpu as f64, a.arm as f64])
            .collect()
    }
}

/// Rounds a genome to whole cores within capacity. A node whose block rounds
/// to all zeros gets its largest gene rounded up instead.
pub fn round_genome(genome: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    let mut out: Vec<f64> = genome
        .iter()
        .zip(bounds)
        .map(|(g, &(lo, hi))| g.round().clamp(lo, hi))
        .collect();
    for node in 0..out.len() / VARS_PER_NODE {
        let span = node * VARS_PER_NODE..(node + 1) * VARS_PER_NODE;
        if out[span.clone()].iter().sum::<f64>() != 0.0 {
            continue;
        }
        let largest = span
            .clone()
            .filter(|&k| genome[k] > 0.0)
            .fold(None::<usize>, |best, k| match best {
                Some(b) if genome[b] >= genome[k] => Some(b),
                _ => Some(k),
            });
        if let Some(k) = largest {
            out[k] = genome[k].ceil().min(bounds[k].1);
        }
    }
    out
}

/// Picks a front point, rounds it to whole cores and re-checks it.
pub fn select_plan(
    problem: &PlanningProblem,
    front: &FrontExport,
    policy: SelectionPolicy,
) -> Result<ExecutionPlan, PlanError> {
    let chosen = &front.points[choose_point(&front.points, policy)?];
    let genome = round_genome(&chosen.genome, &problem.bounds);
    let predicted = problem.evaluator.evaluate(&genome)?;
    if !predicted.feasible {
        return Err(PlanError::RoundingInfeasible(format!(
            "rounded genome {genome:?} violates constraints"
        )));
    }
    let assignments = genome
        .chunks(VARS_PER_NODE)
        .enumerate()
        .map(|(i, hw)| {
            (
                i as NodeId + 1,
                Assignment {
                    cpu: hw[0] as u32,
                    gpu: hw[1] as u32,
                    arm: hw[2] as u32,
                },
            )
        })
        .collect();
    Ok(ExecutionPlan {
        request_id: problem.request_id.clone(),
        index_version: problem.index_version,
        assignments,
        routes: problem.evaluator.routes().clone(),
        predicted,
        selection: policy,
    })
}

/// Output of one full planning run.
#[derive(Debug, Clone)]
pub struct PlanningRun {
    pub plan: ExecutionPlan,
    pub front: FrontExport,
    pub population: Vec<Individual>,
}

/// Optimizes and returns the final population without selecting a plan.
pub fn optimize(
    index: &SystemIndex,
    request: &ExecutionRequest,
    config: &PlannerConfig,
) -> Result<(PlanningProblem, Vec<Individual>), PlanError> {
    let problem = build_problem(index, request, config)?;
    let population = moea::run(&problem, &config.moea)?;
    Ok((problem, population))
}

pub fn plan_run(
    index: &SystemIndex,
    request: &ExecutionRequest,
    config: &PlannerConfig,
) -> Result<PlanningRun, PlanError> {
    let (problem, population) = optimize(index, request, config)?;
    let front = extract_front(&population, front_metadata(&problem, config))?;
    let plan = select_plan(&problem, &front, config.policy)?;
    Ok(PlanningRun {
        plan,
        front,
        population,
    })
}

/// End to end: problem, engine, front, selection.
pub fn plan(
    index: &SystemIndex,
    request: &ExecutionRequest,
    config: &PlannerConfig,
) -> Result<(ExecutionPlan, FrontExport), PlanError> {
    let run = plan_run(index, request, config)?;
    Ok((run.plan, run.front))
}

pub fn front_metadata(problem: &PlanningProblem, config: &PlannerConfig) -> FrontMetadata {
    FrontMetadata {
        request_id: problem.request_id.clone(),
        index_version: problem.index_version,
        seed: config.moea.seed,
        config: config.clone(),
    }
}

fn genome_header(len: usize) -> Vec<String> {
    (0..len)
        .map(|k| {
            format!(
                "n{}_{}",
                k / VARS_PER_NODE + 1,
                COMPONENTS[k % VARS_PER_NODE]
            )
        })
        .collect()
}

/// Path of the JSON file written next to a CSV export.
pub fn json_twin(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `time_s,energy_j,feasible,<genome...>` rows plus a JSON twin with
/// metadata. Floats use shortest round-trip formatting.
pub fn export_point_cloud(front: &FrontExport, path: &Path) -> Result<(), PlanError> {
    let width = front.points.first().map_or(0, |p| p.genome.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time_s".to_string(), "energy_j".into(), "feasible".into()];
    header.extend(genome_header(width));
    w.write_record(&header)?;
    for p in &front.points {
        let mut row = vec![
            p.time_s.to_string(),
            p.energy_j.to_string(),
            p.feasible.to_string(),
        ];
        row.extend(p.genome.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    write_json(&json_twin(path), front)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PlanError> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reads back a CSV written by [`export_point_cloud`].
pub fn read_point_cloud(path: &Path) -> Result<Vec<FrontPoint>, PlanError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut points = Vec::new();
    for record in r.records() {
        let record = record?;
        let num = |i: usize| -> Result<f64, PlanError> {
            record[i]
                .parse()
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{e}")).into())
        };
        points.push(FrontPoint {
            time_s: num(0)?,
            energy_j: num(1)?,
            feasible: record[2] == *"true",
            genome: (3..record.len()).map(num).collect::<Result<_, _>>()?,
        });
    }
    Ok(points)
}

/// One member of the final population, for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudPoint {
    pub time_s: f64,
    pub energy_j: f64,
    pub feasible: bool,
    pub rank: usize,
    pub genome: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationCloud {
    pub points: Vec<CloudPoint>,
    pub metadata: FrontMetadata,
}

/// The whole final population, feasible or not, in survival order.
pub fn population_cloud(population: &[Individual], metadata: FrontMetadata) -> PopulationCloud {
    let points = population
        .iter()
        .filter_map(|ind| {
            let ev = ind.evaluation.as_ref()?;
            Some(CloudPoint {
                time_s: ev.objectives[0],
                energy_j: ev.objectives[1],
                feasible: ev.feasible,
                rank: ind.rank.unwrap_or(usize::MAX),
                genome: ind.genome.clone(),
            })
        })
        .collect();
    PopulationCloud { points, metadata }
}

/// Like [`export_point_cloud`] with an extra `rank` column after `feasible`.
pub fn export_population_cloud(cloud: &PopulationCloud, path: &Path) -> Result<(), PlanError> {
    let width = cloud.points.first().map_or(0, |p| p.genome.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "time_s".to_string(),
        "energy_j".into(),
        "feasible".into(),
        "rank".into(),
    ];
    header.extend(genome_header(width));
    w.write_record(&header)?;
    for p in &cloud.points {
        let mut row = vec![
            p.time_s.to_string(),
            p.energy_j.to_string(),
            p.feasible.to_string(),
            p.rank.to_string(),
        ];
        row.extend(p.genome.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    write_json(&json_twin(path), cloud)
}

pub fn write_plan(plan: &ExecutionPlan, path: &Path) -> Result<(), PlanError> {
    write_json(path, plan)
}
