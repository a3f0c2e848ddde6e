//! `dataplan`: validate indexes, plan requests, export point clouds and run
//! the broker.
//!
//! Exit codes: 0 success, 1 validation or configuration error, 2 planning
//! infeasibility or an unplannable request.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use dataplan_broker::Broker;
use dataplan_core::planner::{self, PlanError};
use dataplan_core::{parse_index, ExecutionRequest, PlannerConfig, SelectionPolicy, SystemIndex};

#[derive(Debug, Parser)]
#[command(
    name = "dataplan",
    version,
    about = "Data-locality aware execution planner"
)]
struct Cli {
    /// Overrides the optimizer seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// knee, min_time, min_energy or user_index:N
    #[arg(long, global = true)]
    policy: Option<SelectionPolicy>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check an index document and summarize it.
    Validate { index: PathBuf },
    /// Plan one request; writes plan.json, front.csv and front.json.
    Plan(PlanArgs),
    /// Export the whole final population; writes cloud.csv and cloud.json.
    Cloud(PlanArgs),
    /// Run the broker until interrupted.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    request: PathBuf,
    /// Planner config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "DATAPLAN_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Where the state log lives; state is kept in memory only when omitted.
    #[arg(long, env = "DATAPLAN_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<PlanError> for Failure {
    fn from(e: PlanError) -> Self {
        let code = match e {
            PlanError::NoFeasibleSolution
            | PlanError::RoundingInfeasible(_)
            | PlanError::InvalidRequest(_) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", path.display())))
}

fn load_index(path: &Path) -> Result<SystemIndex, Failure> {
    parse_index(&read(path)?).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>, cli: &Cli) -> Result<PlannerConfig, Failure> {
    let mut config = match path {
        Some(p) => PlannerConfig::from_json(&read(p)?)
            .map_err(|e| Failure::invalid(format!("{}: {e}", p.display())))?,
        None => PlannerConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.moea.seed = seed;
    }
    if let Some(policy) = cli.policy {
        config.policy = policy;
    }
    config
        .moea
        .validate()
        .map_err(|e| Failure::invalid(e.to_string()))?;
    Ok(config)
}

fn load_inputs(
    args: &PlanArgs,
    cli: &Cli,
) -> Result<(SystemIndex, ExecutionRequest, PlannerConfig), Failure> {
    let index = load_index(&args.index)?;
    let request: ExecutionRequest = serde_json::from_str(&read(&args.request)?)
        .map_err(|e| Failure::invalid(format!("{}: {e}", args.request.display())))?;
    let config = load_config(args.config.as_deref(), cli)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| Failure::invalid(format!("cannot create {}: {e}", args.out.display())))?;
    Ok((index, request, config))
}

fn validate(path: &Path) -> Result<(), Failure> {
    let index = load_index(path)?;
    let components = index.component_count();
    println!(
        "{} nodes, {} blocks, {} connected component{}",
        index.node_count(),
        index.data_catalog().len(),
        components,
        if components == 1 { "" } else { "s" }
    );
    if components > 1 {
        eprintln!(
            "warning: the network is not connected; blocks on other components are unreachable"
        );
    }
    Ok(())
}

fn plan(args: &PlanArgs, cli: &Cli) -> Result<(), Failure> {
    let (index, request, config) = load_inputs(args, cli)?;
    let (plan, front) = planner::plan(&index, &request, &config)?;
    planner::write_plan(&plan, &args.out.join("plan.json"))?;
    planner::export_point_cloud(&front, &args.out.join("front.csv"))?;
    println!(
        "policy {}: time {} s, energy {} J ({} front points)",
        config.policy,
        plan.predicted.time,
        plan.predicted.energy,
        front.points.len()
    );
    Ok(())
}

fn cloud(args: &PlanArgs, cli: &Cli) -> Result<(), Failure> {
    let (index, request, config) = load_inputs(args, cli)?;
    let (problem, population) = planner::optimize(&index, &request, &config)?;
    let cloud = planner::population_cloud(&population, planner::front_metadata(&problem, &config));
    planner::export_population_cloud(&cloud, &args.out.join("cloud.csv"))?;
    let feasible = cloud.points.iter().filter(|p| p.feasible).count();
    println!("{} points, {} feasible", cloud.points.len(), feasible);
    Ok(())
}

fn serve(args: &ServeArgs, cli: &Cli) -> Result<(), Failure> {
    let config = load_config(args.config.as_deref(), cli)?;
    let broker = match &args.data_dir {
        Some(dir) => Broker::open(dir, config).map_err(|e| {
            Failure::invalid(format!("cannot open state in {}: {e}", dir.display()))
        })?,
        None => {
            tracing::warn!("no data directory; state will not survive a restart");
            Broker::in_memory(config)
        }
    };
    let runtime = tokio::runtime::Runtime::new()
        .map_err(|e| Failure::invalid(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.listen)
            .await
            .map_err(|e| Failure::invalid(format!("cannot listen on {}: {e}", args.listen)))?;
        let addr = listener
            .local_addr()
            .map_err(|e| Failure::invalid(e.to_string()))?;
        println!("listening on {addr}");
        dataplan_broker::serve(
            listener,
            Arc::new(broker),
            dataplan_broker::shutdown_signal(),
        )
        .await
        .map_err(|e| Failure::invalid(format!("server error: {e}")))
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    // usage errors are configuration errors; clap's own exit code 2 is taken
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Validate { index } => validate(index),
        Command::Plan(args) => plan(args, &cli),
        Command::Cloud(args) => cloud(args, &cli),
        Command::Serve(args) => serve(args, &cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
