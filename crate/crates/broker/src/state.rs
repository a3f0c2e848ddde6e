//! Broker state: the live index, the request log and stored fronts.
//!
//! Mutations go through a single writer lock which also owns the persistence
//! log. Planner runs work on an `Arc` snapshot of the index taken under a
//! short read lock, so they never block index reads.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;
use std::sync::Arc;

use dataplan_core::planner::{self, PlanError, PlanningRun};
use dataplan_core::{
    ExecutionPlan, ExecutionRequest, FrontExport, IndexDocument, PlannerConfig, SystemIndex,
};
use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::store::{LogRecord, LogStore};

/// Error surfaced to clients as `{"error":{"code":…,"message":…}}`.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{code} ({status}): {message}")]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: u16, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn body(&self) -> Value {
        json!({"error": {"code": self.code, "message": self.message}})
    }
}

impl From<PlanError> for ApiError {
    fn from(e: PlanError) -> Self {
        let msg = e.to_string();
        match e {
            PlanError::NoFeasibleSolution => ApiError::new(409, "no_feasible_solution", msg),
            PlanError::RoundingInfeasible(_) => ApiError::new(409, "rounding_infeasible", msg),
            PlanError::UnknownEntryNode(_) => ApiError::new(404, "unknown_entry_node", msg),
            PlanError::InvalidRequest(_) => ApiError::new(422, "invalid_request", msg),
            PlanError::EmptyIndex => ApiError::new(409, "empty_index", msg),
            _ => ApiError::new(500, "internal", msg),
        }
    }
}

fn io_error(e: io::Error) -> ApiError {
    ApiError::new(500, "storage", e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanRecord {
    pub request: ExecutionRequest,
    pub plan: ExecutionPlan,
    pub front_id: String,
}

#[derive(Default)]
struct State {
    index: Option<Arc<SystemIndex>>,
    plans: BTreeMap<String, PlanRecord>,
    fronts: BTreeMap<String, FrontExport>,
    fronts_issued: u64,
}

impl State {
    fn version(&self) -> u64 {
        self.index.as_ref().map_or(0, |i| i.version())
    }

    fn apply(&mut self, record: LogRecord) -> Result<(), String> {
        match record {
            LogRecord::Index { version, document } => {
                let index = SystemIndex::from_document(document, version)
                    .map_err(|e| format!("logged index v{version} is invalid: {e}"))?;
                self.index = Some(Arc::new(index));
            }
            LogRecord::Plan {
                request,
                plan,
                front_id,
                front,
            } => {
                self.fronts_issued += 1;
                self.fronts.insert(front_id.clone(), *front);
                self.plans.insert(
                    request.request_id.clone(),
                    PlanRecord {
                        request,
                        plan,
                        front_id,
                    },
                );
            }
        }
        Ok(())
    }
}

pub struct Broker {
    config: PlannerConfig,
    state: RwLock<State>,
    writer: Mutex<Option<LogStore>>,
}

impl Broker {
    /// A broker without persistence.
    pub fn in_memory(config: PlannerConfig) -> Self {
        Self {
            config,
            state: RwLock::new(State::default()),
            writer: Mutex::new(None),
        }
    }

    /// A broker persisting to `data_dir`, restored from its log.
    pub fn open(data_dir: &Path, config: PlannerConfig) -> io::Result<Self> {
        let (store, records) = LogStore::open(data_dir)?;
        let mut state = State::default();
        for record in records {
            state
                .apply(record)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        }
        Ok(Self {
            config,
            state: RwLock::new(state),
            writer: Mutex::new(Some(store)),
        })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn current_version(&self) -> u64 {
        self.state.read().version()
    }

    pub fn snapshot(&self) -> Option<Arc<SystemIndex>> {
        self.state.read().index.clone()
    }

    /// Persists and applies `record` while the caller holds the writer lock.
    fn commit(&self, store: &mut Option<LogStore>, record: LogRecord) -> Result<(), ApiError> {
        if let Some(store) = store.as_mut() {
            store.append(&record).map_err(io_error)?;
        }
        self.state
            .write()
            .apply(record)
            .map_err(|e| ApiError::new(500, "internal", e))
    }

    pub fn put_index(&self, body: &str) -> Result<Value, ApiError> {
        let document: IndexDocument = serde_json::from_str(body)
            .map_err(|e| ApiError::new(400, "schema_error", e.to_string()))?;
        let mut store = self.writer.lock();
        let version = self.current_version() + 1;
        SystemIndex::from_document(document.clone(), version)
            .map_err(|e| ApiError::new(400, "validation_error", e.to_string()))?;
        self.commit(&mut store, LogRecord::Index { version, document })?;
        tracing::info!("index replaced, now at version {version}");
        Ok(json!({ "version": version }))
    }

    pub fn get_index(&self) -> Result<Value, ApiError> {
        let index = self
            .snapshot()
            .ok_or_else(|| ApiError::new(404, "no_index", "no index has been loaded"))?;
        Ok(json!({
            "version": index.version(),
            "document": index.to_document(),
        }))
    }

    fn run_planner(
        &self,
        index: &SystemIndex,
        request: &ExecutionRequest,
    ) -> Result<PlanningRun, ApiError> {
        Ok(planner::plan_run(index, request, &self.config)?)
    }

    fn require_index(&self) -> Result<Arc<SystemIndex>, ApiError> {
        self.snapshot()
            .ok_or_else(|| ApiError::new(409, "no_index", "no index has been loaded"))
    }

    /// Plans a new request against the current index and logs it.
    pub fn submit_request(&self, body: &str) -> Result<Value, ApiError> {
        let request: ExecutionRequest = serde_json::from_str(body)
            .map_err(|e| ApiError::new(422, "malformed_request", e.to_string()))?;
        request
            .validate()
            .map_err(|e| ApiError::new(422, "invalid_request", e.to_string()))?;
        let duplicate = |state: &State| {
            state.plans.contains_key(&request.request_id).then(|| {
                ApiError::new(
                    422,
                    "duplicate_request_id",
                    format!("request {} already exists", request.request_id),
                )
            })
        };
        if let Some(e) = duplicate(&self.state.read()) {
            return Err(e);
        }

        let index = self.require_index()?;
        let run = self.run_planner(&index, &request)?;

        let mut store = self.writer.lock();
        if let Some(e) = duplicate(&self.state.read()) {
            return Err(e);
        }
        let front_id = self.record_run(&mut store, request.clone(), run)?;
        drop(store);
        self.get_plan(&request.request_id).map(|mut v| {
            v["front_id"] = json!(front_id);
            v
        })
    }

    fn record_run(
        &self,
        store: &mut Option<LogStore>,
        request: ExecutionRequest,
        run: PlanningRun,
    ) -> Result<String, ApiError> {
        let front_id = format!("front-{}", self.state.read().fronts_issued + 1);
        self.commit(
            store,
            LogRecord::Plan {
                request,
                plan: run.plan,
                front_id: front_id.clone(),
                front: Box::new(run.front),
            },
        )?;
        Ok(front_id)
    }

    /// Re-runs a logged request against the current index. The logged plan
    /// is superseded only when replanning succeeds.
    pub fn replan(&self, request_id: &str) -> Result<Value, ApiError> {
        let previous = self
            .state
            .read()
            .plans
            .get(request_id)
            .cloned()
            .ok_or_else(|| unknown_request(request_id))?;
        let index = self.require_index()?;
        let run = self.run_planner(&index, &previous.request)?;

        let mut store = self.writer.lock();
        self.record_run(&mut store, previous.request.clone(), run)?;
        drop(store);

        let mut body = self.get_plan(request_id)?;
        body["previous"] = json!({
            "index_version": previous.plan.index_version,
            "front_id": previous.front_id,
            "predicted": previous.plan.predicted,
        });
        Ok(body)
    }

    pub fn get_plan(&self, request_id: &str) -> Result<Value, ApiError> {
        let state = self.state.read();
        let record = state
            .plans
            .get(request_id)
            .ok_or_else(|| unknown_request(request_id))?;
        let current = state.version();
        Ok(json!({
            "request_id": request_id,
            "index_version": record.plan.index_version,
            "current_version": current,
            "stale": record.plan.index_version < current,
            "front_id": record.front_id,
            "plan": record.plan,
        }))
    }

    pub fn get_front(&self, front_id: &str) -> Result<Value, ApiError> {
        let state = self.state.read();
        let front = state
            .fronts
            .get(front_id)
            .ok_or_else(|| ApiError::new(404, "unknown_front", format!("no front {front_id}")))?;
        let current = state.version();
        Ok(json!({
            "front_id": front_id,
            "index_version": front.metadata.index_version,
            "current_version": current,
            "stale": front.metadata.index_version < current,
            "front": front,
        }))
    }

    pub fn health(&self) -> Value {
        let state = self.state.read();
        json!({
            "status": "ok",
            "index_version": state.index.as_ref().map(|i| i.version()),
            "plans": state.plans.len(),
        })
    }

    /// Flushes the persistence log to disk.
    pub fn sync(&self) -> io::Result<()> {
        match self.writer.lock().as_ref() {
            Some(store) => store.sync(),
            None => Ok(()),
        }
    }
}

fn unknown_request(id: &str) -> ApiError {
    ApiError::new(404, "unknown_request", format!("no request {id}"))
}
