//! Execution-time and energy objectives for a candidate plan.
//!
//! A plan vector holds `P = 3` allocated core counts (CPU, GPU, ARM) per
//! node, laid out by node id: the `K`-th variable of node `N` lives at
//! `P * (N - 1) + (K - 1)`.
//!
//! Per node, the allocation is normalized into contributions
//! `c_j = h_j / Σ h`. A share of base time `T` costs `Σ T / c_j^p_j` and a
//! share of base energy `E` costs `Σ E * c_j^p_j`, summed over components
//! with `c_j > 0`. Blocks not hosted at the entry node are shipped to their
//! cheapest holder; both transfer legs are charged and the holder's own
//! `(1 + load)` factor is applied once to everything it executes. The whole
//! expression is then scaled by the entry node's `(1 + load)`.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::routing::{dijkstra, route_to_block, DataRoute, RouteOutcome};
use crate::system_model::{ConnectionsMatrix, NodeId, SystemIndex};

/// Decision variables per node.
pub const VARS_PER_NODE: usize = 3;

pub const DEFAULT_PENALTY: f64 = 1e9;

/// Constraint value for a satisfied constraint.
pub const VALID: f64 = -1.0;
/// Constraint value for a violated constraint.
pub const NOT_VALID: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("plan has {actual} variables, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("hardware allocation sums to zero")]
    AllZero,
    #[error("invalid technology profile: {0}")]
    InvalidProfile(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("entry node {0} is not in the index")]
    UnknownEntryNode(NodeId),
}

/// Position of decision variable `component` (1-based) of node `node`
/// (1-based) in a plan vector with `width` variables per node.
pub fn gene_index(width: usize, node: NodeId, component: usize) -> usize {
    width * (node as usize - 1) + (component - 1)
}

/// Returns [`NOT_VALID`] as soon as one node's block of `width` variables
/// sums to zero, [`VALID`] otherwise.
pub fn constraint_not_only_zero(
    vars: &[f64],
    width: usize,
    nodes: usize,
) -> Result<f64, ObjectiveError> {
    if width == 0 || vars.len() != width * nodes {
        return Err(ObjectiveError::LengthMismatch {
            expected: width * nodes,
            actual: vars.len(),
        });
    }
    for block in vars.chunks(width) {
        let sum: f64 = block.iter().sum();
        if sum == 0.0 {
            return Ok(NOT_VALID);
        }
    }
    Ok(VALID)
}

/// Fraction of the node's allocated hardware held by each component.
pub fn contributions(hardware: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
    let total: f64 = hardware.iter().sum();
    if total <= 0.0 {
        return Err(ObjectiveError::AllZero);
    }
    Ok(hardware.iter().map(|h| h / total).collect())
}

/// Per-component speed exponents plus transfer cost coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct TechnologyProfile {
    p_cpu: f64,
    p_gpu: f64,
    p_arm: f64,
    kappa_transfer: f64,
    t_unit_transfer: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    #[serde(default = "defaults::p_cpu")]
    p_cpu: f64,
    #[serde(default = "defaults::p_gpu")]
    p_gpu: f64,
    #[serde(default = "defaults::p_arm")]
    p_arm: f64,
    #[serde(default = "defaults::unit")]
    kappa_transfer: f64,
    #[serde(default = "defaults::unit")]
    t_unit_transfer: f64,
}

mod defaults {
    pub fn p_cpu() -> f64 {
        1.0
    }
    pub fn p_gpu() -> f64 {
        2.0
    }
    pub fn p_arm() -> f64 {
        0.5
    }
    pub fn unit() -> f64 {
        1.0
    }
}

impl TryFrom<RawProfile> for TechnologyProfile {
    type Error = ObjectiveError;

    fn try_from(r: RawProfile) -> Result<Self, Self::Error> {
        TechnologyProfile::new(
            r.p_cpu,
            r.p_gpu,
            r.p_arm,
            r.kappa_transfer,
            r.t_unit_transfer,
        )
    }
}

impl From<TechnologyProfile> for RawProfile {
    fn from(p: TechnologyProfile) -> Self {
        RawProfile {
            p_cpu: p.p_cpu,
            p_gpu: p.p_gpu,
            p_arm: p.p_arm,
            kappa_transfer: p.kappa_transfer,
            t_unit_transfer: p.t_unit_transfer,
        }
    }
}

impl Default for TechnologyProfile {
    fn default() -> Self {
        Self {
            p_cpu: defaults::p_cpu(),
            p_gpu: defaults::p_gpu(),
            p_arm: defaults::p_arm(),
            kappa_transfer: defaults::unit(),
            t_unit_transfer: defaults::unit(),
        }
    }
}

impl TechnologyProfile {
    /// Exponents must be positive with `p_cpu < p_gpu`; transfer
    /// coefficients must be non-negative.
    pub fn new(
        p_cpu: f64,
        p_gpu: f64,
        p_arm: f64,
        kappa_transfer: f64,
        t_unit_transfer: f64,
    ) -> Result<Self, ObjectiveError> {
        for (name, p) in [("p_cpu", p_cpu), ("p_gpu", p_gpu), ("p_arm", p_arm)] {
            if !(p.is_finite() && p > 0.0) {
                return Err(ObjectiveError::InvalidProfile(format!(
                    "{name} must be positive, got {p}"
                )));
            }
        }
        if p_cpu >= p_gpu {
            return Err(ObjectiveError::InvalidProfile(format!(
                "p_cpu ({p_cpu}) must be below p_gpu ({p_gpu})"
            )));
        }
        for (name, k) in [
            ("kappa_transfer", kappa_transfer),
            ("t_unit_transfer", t_unit_transfer),
        ] {
            if !(k.is_finite() && k >= 0.0) {
                return Err(ObjectiveError::InvalidProfile(format!(
                    "{name} must be non-negative, got {k}"
                )));
            }
        }
        Ok(Self {
            p_cpu,
            p_gpu,
            p_arm,
            kappa_transfer,
            t_unit_transfer,
        })
    }

    pub fn exponents(&self) -> [f64; VARS_PER_NODE] {
        [self.p_cpu, self.p_gpu, self.p_arm]
    }

    pub fn kappa_transfer(&self) -> f64 {
        self.kappa_transfer
    }

    pub fn t_unit_transfer(&self) -> f64 {
        self.t_unit_transfer
    }
}

/// `(1/c^p, c^p)` picked within one ulp of the rounded powers so that their
/// floating-point product is exactly 1.
pub fn factor_pair(contribution: f64, exponent: f64) -> (f64, f64) {
    let e0 = contribution.powf(exponent);
    for e in [e0, e0.next_up(), e0.next_down()] {
        let t0 = 1.0 / e;
        for t in [
            t0,
            t0.next_up(),
            t0.next_down(),
            t0.next_up().next_up(),
            t0.next_down().next_down(),
        ] {
            if t * e == 1.0 {
                return (t, e);
            }
        }
    }
    (1.0 / e0, e0)
}

/// Slowdown applied to a component holding fraction `c` of the work.
pub fn time_factor(contribution: f64, exponent: f64) -> f64 {
    factor_pair(contribution, exponent).0
}

/// Energy counterpart of [`time_factor`].
pub fn energy_factor(contribution: f64, exponent: f64) -> f64 {
    factor_pair(contribution, exponent).1
}

type NodeCost = fn(&[f64], &TechnologyProfile, f64) -> Result<f64, ObjectiveError>;

fn node_cost(
    hardware: &[f64],
    profile: &TechnologyProfile,
    base: f64,
    factor: fn(f64, f64) -> f64,
) -> Result<f64, ObjectiveError> {
    let contrib = contributions(hardware)?;
    Ok(contrib
        .iter()
        .zip(profile.exponents())
        .filter(|(c, _)| **c > 0.0)
        .map(|(&c, p)| factor(c, p) * base)
        .sum())
}

/// Time to run a share costing `base` seconds on the given allocation.
pub fn node_compute_time(
    hardware: &[f64],
    profile: &TechnologyProfile,
    base: f64,
) -> Result<f64, ObjectiveError> {
    node_cost(hardware, profile, base, time_factor)
}

/// Energy to run a share costing `base` joules on the given allocation.
pub fn node_compute_energy(
    hardware: &[f64],
    profile: &TechnologyProfile,
    base: f64,
) -> Result<f64, ObjectiveError> {
    node_cost(hardware, profile, base, energy_factor)
}

/// A function to place plus its cost distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionRequest {
    pub request_id: String,
    pub required_blocks: BTreeSet<String>,
    pub entry_node: NodeId,
    pub base_time_mean: f64,
    #[serde(default)]
    pub base_time_std: f64,
    pub base_energy_mean: f64,
    #[serde(default)]
    pub base_energy_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ExecutionRequest {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::InvalidRequest(m));
        if self.request_id.is_empty() {
            return bad("request_id is empty".into());
        }
        if self.required_blocks.is_empty() {
            return bad("required_blocks is empty".into());
        }
        for (name, mean, std) in [
            ("base_time", self.base_time_mean, self.base_time_std),
            ("base_energy", self.base_energy_mean, self.base_energy_std),
        ] {
            if !(mean.is_finite() && mean > 0.0) {
                return bad(format!("{name}_mean must be positive, got {mean}"));
            }
            if !(std.is_finite() && std >= 0.0) {
                return bad(format!("{name}_std must be non-negative, got {std}"));
            }
        }
        Ok(())
    }
}

/// Base time and energy for one request, drawn once so that every plan in a
/// run is priced against the same costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseCosts {
    pub time: f64,
    pub energy: f64,
}

fn clamped_normal(mean: f64, std: f64, seed: u64) -> f64 {
    let draw = if std == 0.0 {
        mean
    } else {
        let normal = Normal::new(mean, std).expect("validated std");
        normal.sample(&mut ChaCha8Rng::seed_from_u64(seed))
    };
    draw.max(0.01 * mean)
}

impl BaseCosts {
    /// Time uses `seed`, energy uses `seed + 1`. Both are clamped to at least
    /// 1% of their mean.
    pub fn draw(request: &ExecutionRequest) -> Self {
        Self {
            time: clamped_normal(request.base_time_mean, request.base_time_std, request.seed),
            energy: clamped_normal(
                request.base_energy_mean,
                request.base_energy_std,
                request.seed.wrapping_add(1),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    #[serde(rename = "time_s")]
    pub time: f64,
    #[serde(rename = "energy_j")]
    pub energy: f64,
    pub constraints: Vec<f64>,
    /// False when a constraint is violated or a penalty fired.
    pub feasible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    pub time: f64,
    pub energy: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Self {
            time: DEFAULT_PENALTY,
            energy: DEFAULT_PENALTY,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Objective {
    Time,
    Energy,
}

/// Plan-independent parts of the evaluation, precomputed per request.
#[derive(Debug, Clone)]
struct Workload {
    /// Blocks executed on the entry node.
    local_blocks: usize,
    /// Holder position (0-based) to number of blocks it executes.
    remote_blocks: BTreeMap<usize, usize>,
    /// Σ over remote blocks of 2 · path cost · block size.
    transfer_volume: f64,
    unreachable: bool,
}

/// Evaluates plans for one (index, request, profile) triple.
#[derive(Debug, Clone)]
pub struct Evaluator {
    loads: Vec<f64>,
    entry: usize,
    profile: TechnologyProfile,
    penalties: Penalties,
    base: BaseCosts,
    block_count: usize,
    routes: BTreeMap<String, DataRoute>,
    workload: Workload,
}

impl Evaluator {
    pub fn new(
        index: &SystemIndex,
        request: &ExecutionRequest,
        profile: TechnologyProfile,
        penalties: Penalties,
    ) -> Result<Self, ObjectiveError> {
        let matrix = index.to_connections_matrix();
        Self::with_matrix(
            index,
            &matrix,
            request,
            profile,
            penalties,
            BaseCosts::draw(request),
        )
    }

    /// Like [`Evaluator::new`] with an explicit matrix and pre-drawn costs.
    pub fn with_matrix(
        index: &SystemIndex,
        matrix: &ConnectionsMatrix,
        request: &ExecutionRequest,
        profile: TechnologyProfile,
        penalties: Penalties,
        base: BaseCosts,
    ) -> Result<Self, ObjectiveError> {
        request.validate()?;
        if index.node(request.entry_node).is_none() {
            return Err(ObjectiveError::UnknownEntryNode(request.entry_node));
        }
        let paths = dijkstra(matrix, request.entry_node);
        let mut routes = BTreeMap::new();
        let mut workload = Workload {
            local_blocks: 0,
            remote_blocks: BTreeMap::new(),
            transfer_volume: 0.0,
            unreachable: false,
        };
        for block in &request.required_blocks {
            let route = route_to_block(index, &paths, block);
            match &route.outcome {
                RouteOutcome::Local => workload.local_blocks += 1,
                RouteOutcome::Remote(p) => {
                    *workload
                        .remote_blocks
                        .entry(p.target as usize - 1)
                        .or_default() += 1;
                    // outbound and return legs
                    workload.transfer_volume += 2.0 * p.cost * index.block_size(block);
                }
                RouteOutcome::Unreachable => workload.unreachable = true,
            }
            routes.insert(block.clone(), route);
        }
        Ok(Self {
            loads: index.nodes().iter().map(|n| n.load).collect(),
            entry: request.entry_node as usize - 1,
            profile,
            penalties,
            base,
            block_count: request.required_blocks.len(),
            routes,
            workload,
        })
    }

    pub fn node_count(&self) -> usize {
        self.loads.len()
    }

    pub fn plan_len(&self) -> usize {
        self.loads.len() * VARS_PER_NODE
    }

    pub fn base_costs(&self) -> BaseCosts {
        self.base
    }

    pub fn routes(&self) -> &BTreeMap<String, DataRoute> {
        &self.routes
    }

    pub fn penalties(&self) -> Penalties {
        self.penalties
    }

    fn check_len(&self, plan: &[f64]) -> Result<(), ObjectiveError> {
        if plan.len() != self.plan_len() {
            return Err(ObjectiveError::LengthMismatch {
                expected: self.plan_len(),
                actual: plan.len(),
            });
        }
        Ok(())
    }

    fn hardware<'a>(&self, plan: &'a [f64], node: usize) -> &'a [f64] {
        &plan[node * VARS_PER_NODE..(node + 1) * VARS_PER_NODE]
    }

    /// `None` when a penalty applies.
    fn objective(&self, plan: &[f64], which: Objective) -> Option<f64> {
        let w = &self.workload;
        if w.unreachable {
            return None;
        }
        let (base, per_unit, compute): (f64, f64, NodeCost) = match which {
            Objective::Time => (
                self.base.time,
                self.profile.t_unit_transfer,
                node_compute_time,
            ),
            Objective::Energy => (
                self.base.energy,
                self.profile.kappa_transfer,
                node_compute_energy,
            ),
        };
        let share = base / self.block_count as f64;

        let mut inner = w.transfer_volume * per_unit;
        for (&node, &blocks) in &w.remote_blocks {
            let cost = compute(
                self.hardware(plan, node),
                &self.profile,
                share * blocks as f64,
            )
            .ok()?;
            inner += (1.0 + self.loads[node]) * cost;
        }
        if w.local_blocks > 0 {
            inner += compute(
                self.hardware(plan, self.entry),
                &self.profile,
                share * w.local_blocks as f64,
            )
            .ok()?;
        }
        Some((1.0 + self.loads[self.entry]) * inner)
    }

    /// Execution time in seconds, or the time penalty.
    pub fn time(&self, plan: &[f64]) -> Result<f64, ObjectiveError> {
        self.check_len(plan)?;
        Ok(self
            .objective(plan, Objective::Time)
            .unwrap_or(self.penalties.time))
    }

    /// Energy in joules, or the energy penalty.
    pub fn energy(&self, plan: &[f64]) -> Result<f64, ObjectiveError> {
        self.check_len(plan)?;
        Ok(self
            .objective(plan, Objective::Energy)
            .unwrap_or(self.penalties.energy))
    }

    pub fn evaluate(&self, plan: &[f64]) -> Result<ObjectiveVector, ObjectiveError> {
        let constraint = constraint_not_only_zero(plan, VARS_PER_NODE, self.node_count())?;
        let time = self.objective(plan, Objective::Time);
        let energy = self.objective(plan, Objective::Energy);
        let penalized = time.is_none() || energy.is_none();
        Ok(ObjectiveVector {
            time: time.unwrap_or(self.penalties.time),
            energy: energy.unwrap_or(self.penalties.energy),
            constraints: vec![constraint],
            feasible: constraint <= 0.0 && !penalized,
        })
    }
}
