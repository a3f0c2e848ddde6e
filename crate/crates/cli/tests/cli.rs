mod common;

use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

use common::{fixture, Server};

use dataplan_core::planner::{read_point_cloud, FrontExport, PopulationCloud};
use dataplan_core::{ExecutionPlan, RouteOutcome, SelectionPolicy};

fn dataplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dataplan"))
        .args(args)
        .env_remove("DATAPLAN_LISTEN")
        .env_remove("DATAPLAN_DATA_DIR")
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn plan_args<'a>(sub: &'a str, index: &'a Path, request: &'a Path, out: &'a Path) -> Vec<String> {
    vec![
        sub.into(),
        "--index".into(),
        index.display().to_string(),
        "--request".into(),
        request.display().to_string(),
        "--config".into(),
        fixture("config.json").display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ]
}

fn run(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    dataplan(&refs)
}

#[test]
fn validate_reports_summary() {
    let out = dataplan(&["validate", fixture("three_sites.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        text(&out.stdout).trim(),
        "3 nodes, 2 blocks, 1 connected component"
    );
}

#[test]
fn validate_rejects_bad_load() {
    let out = dataplan(&["validate", fixture("bad_load.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("LOAD"), "{}", text(&out.stderr));
}

#[test]
fn validate_warns_on_disconnected_graph() {
    let out = dataplan(&["validate", fixture("disconnected.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).contains("2 connected components"));
    assert!(text(&out.stderr).contains("warning"));
}

#[test]
fn validate_missing_file_is_an_error() {
    let out = dataplan(&["validate", "/nonexistent/index.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn plan_single_node_is_local() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&plan_args(
        "plan",
        &fixture("single_node.json"),
        &fixture("request_local.json"),
        dir.path(),
    ));
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("policy knee"));

    let plan: ExecutionPlan =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("plan.json")).unwrap())
            .unwrap();
    assert!(plan
        .routes
        .values()
        .all(|r| r.outcome == RouteOutcome::Local));
    let points = read_point_cloud(&dir.path().join("front.csv")).unwrap();
    let front: FrontExport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("front.json")).unwrap())
            .unwrap();
    assert_eq!(points, front.points);
}

#[test]
fn plan_infeasible_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&plan_args(
        "plan",
        &fixture("three_sites.json"),
        &fixture("request_missing.json"),
        dir.path(),
    ));
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("no feasible solution"));
}

#[test]
fn plan_is_byte_identical_under_fixed_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let mut args = plan_args(
            "plan",
            &fixture("three_sites.json"),
            &fixture("request_remote.json"),
            dir,
        );
        args.extend(["--seed".into(), "7".into()]);
        assert_eq!(run(&args).status.code(), Some(0));
    }
    for f in ["plan.json", "front.csv", "front.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let front: FrontExport =
        serde_json::from_slice(&std::fs::read(a.path().join("front.json")).unwrap()).unwrap();
    assert_eq!(front.metadata.seed, 7);
}

#[test]
fn policy_flag_selects_extremes() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = plan_args(
        "plan",
        &fixture("single_node.json"),
        &fixture("request_local.json"),
        dir.path(),
    );
    args.extend(["--policy".into(), "min_energy".into()]);
    assert_eq!(run(&args).status.code(), Some(0));
    let plan: ExecutionPlan =
        serde_json::from_slice(&std::fs::read(dir.path().join("plan.json")).unwrap()).unwrap();
    let front: FrontExport =
        serde_json::from_slice(&std::fs::read(dir.path().join("front.json")).unwrap()).unwrap();
    assert_eq!(plan.selection, SelectionPolicy::MinEnergy);
    let lowest = front
        .points
        .iter()
        .min_by(|a, b| a.energy_j.total_cmp(&b.energy_j))
        .unwrap();
    let rounded: Vec<f64> = lowest.genome.iter().map(|g| g.round()).collect();
    if rounded.iter().sum::<f64>() > 0.0 {
        assert_eq!(plan.genome(), rounded);
    }

    args.pop();
    args.push("fastest".into());
    let out = run(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("unknown policy"));
}

#[test]
fn cloud_exports_population() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&plan_args(
        "cloud",
        &fixture("single_node.json"),
        &fixture("request_local.json"),
        dir.path(),
    ));
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("cloud.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "time_s,energy_j,feasible,rank,n1_cpu,n1_gpu,n1_arm"
    );
    assert!(lines.count() <= 40);

    let cloud: PopulationCloud =
        serde_json::from_slice(&std::fs::read(dir.path().join("cloud.json")).unwrap()).unwrap();
    let mut front: Vec<(f64, f64)> = cloud
        .points
        .iter()
        .filter(|p| p.feasible && p.rank == 0)
        .map(|p| (p.time_s, p.energy_j))
        .collect();
    front.sort_by(|a, b| a.0.total_cmp(&b.0));
    front.dedup();
    assert!(front.len() > 1);
    for w in front.windows(2) {
        assert!(w[0].1 >= w[1].1, "{:?}", w);
    }
}

#[test]
fn cloud_with_empty_blocks_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&plan_args(
        "cloud",
        &fixture("single_node.json"),
        &fixture("request_empty.json"),
        dir.path(),
    ));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"moea": {"population_size": 7}}"#).unwrap();
    let out = dataplan(&[
        "plan",
        "--index",
        fixture("single_node.json").to_str().unwrap(),
        "--request",
        fixture("request_local.json").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn serve_smoke_chain_and_restart() {
    let data = tempfile::tempdir().unwrap();
    let server = Server::start(data.path());
    let index = std::fs::read_to_string(fixture("three_sites.json")).unwrap();
    let request = std::fs::read_to_string(fixture("request_remote.json")).unwrap();

    let (s, body) = server.call("PUT", "/index", &index);
    assert_eq!((s, body["version"].as_u64()), (200, Some(1)));
    let (s, _) = server.call("POST", "/requests", &request);
    assert_eq!(s, 200);
    let (s, before) = server.call("GET", "/plans/cubes-1", "");
    assert_eq!(s, 200);
    assert_eq!(before["stale"], false);
    assert_eq!(server.terminate(), Some(0));

    let server = Server::start(data.path());
    let (s, after) = server.call("GET", "/plans/cubes-1", "");
    assert_eq!(s, 200);
    assert_eq!(after, before);
    server.terminate();
}

#[test]
fn serve_reports_port_in_use() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let out = dataplan(&["serve", "--listen", &addr]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        text(&out.stderr).contains("cannot listen"),
        "{}",
        text(&out.stderr)
    );
}

#[test]
fn listen_flag_wins_over_env() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    // env points at a free port; the flag points at the taken one
    let out = Command::new(env!("CARGO_BIN_EXE_dataplan"))
        .args(["serve", "--listen", &addr])
        .env("DATAPLAN_LISTEN", "127.0.0.1:0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_dataplan"))
        .arg("serve")
        .env("DATAPLAN_LISTEN", &addr)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains(&addr));
}
