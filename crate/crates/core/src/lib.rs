//! Execution planning for functions over distributed data blocks.
//!
//! Given a [`SystemIndex`] describing the node federation and an
//! [`ExecutionRequest`], the planner searches per-node CPU/GPU/ARM core
//! allocations with a constrained NSGA-II engine, trading execution time
//! against energy. Work on blocks a node does not host is shipped to the
//! cheapest holder along shortest paths.
//!
//! Modules, bottom up:
//!
//! * [`system_model`] parses and versions the index document.
//! * [`routing`] runs Dijkstra and resolves block holders.
//! * [`objectives`] prices a plan vector in seconds and joules.
//! * [`moea`] is the optimization engine.
//! * [`planner`] wires it all together and exports fronts and plans.

pub mod moea;
pub mod objectives;
pub mod planner;
pub mod routing;
pub mod system_model;

pub use moea::{Evaluation, Individual, MoeaConfig, MoeaError};
pub use objectives::{
    BaseCosts, Evaluator, ExecutionRequest, ObjectiveError, ObjectiveVector, Penalties,
    TechnologyProfile,
};
pub use planner::{
    ExecutionPlan, FrontExport, FrontPoint, PlanError, PlannerConfig, SelectionPolicy,
};
pub use routing::{DataRoute, PathResult, RouteOutcome};
pub use system_model::{
    parse_index, Connection, ConnectionsMatrix, IndexDocument, IndexError, IndexUpdate, NodeId,
    NodeSpec, SystemIndex,
};
