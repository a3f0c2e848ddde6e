//! Shortest paths over the node graph and holder resolution for data blocks.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::system_model::{ConnectionsMatrix, NodeId, SystemIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    pub target: NodeId,
    pub cost: f64,
    /// Node ids from source to target, both inclusive.
    pub hops: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RouteOutcome {
    Local,
    Remote(PathResult),
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRoute {
    pub block: String,
    #[serde(flatten)]
    pub outcome: RouteOutcome,
}

impl DataRoute {
    pub fn cost(&self) -> Option<f64> {
        match &self.outcome {
            RouteOutcome::Local => Some(0.0),
            RouteOutcome::Remote(p) => Some(p.cost),
            RouteOutcome::Unreachable => None,
        }
    }

    /// Node where the block's share of the function runs.
    pub fn executing_node(&self, source: NodeId) -> Option<NodeId> {
        match &self.outcome {
            RouteOutcome::Local => Some(source),
            RouteOutcome::Remote(p) => Some(p.target),
            RouteOutcome::Unreachable => None,
        }
    }
}

/// Single-source shortest-path tree. Indices are 0-based positions.
#[derive(Debug, Clone)]
pub struct ShortestPaths {
    source: usize,
    dist: Vec<Option<f64>>,
    pred: Vec<Option<usize>>,
}

impl ShortestPaths {
    pub fn source(&self) -> NodeId {
        self.source as NodeId + 1
    }

    /// Path cost to `target`, `None` when unreachable.
    pub fn cost(&self, target: NodeId) -> Option<f64> {
        self.dist.get(target as usize - 1).copied().flatten()
    }

    pub fn predecessor(&self, target: NodeId) -> Option<NodeId> {
        self.pred
            .get(target as usize - 1)
            .copied()
            .flatten()
            .map(|p| p as NodeId + 1)
    }

    pub fn path(&self, target: NodeId) -> Option<PathResult> {
        let cost = self.cost(target)?;
        let mut hops = vec![target];
        let mut at = target as usize - 1;
        while let Some(p) = self.pred[at] {
            hops.push(p as NodeId + 1);
            at = p;
        }
        hops.reverse();
        Some(PathResult { target, cost, hops })
    }
}

#[derive(PartialEq)]
struct QueueEntry {
    cost: f64,
    node: usize,
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, then on node position
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from `source` (1-based id) over edges with positive weight.
pub fn dijkstra(matrix: &ConnectionsMatrix, source: NodeId) -> ShortestPaths {
    let m = matrix.size();
    assert!(
        source >= 1 && source as usize <= m,
        "source {source} outside 1..={m}"
    );
    let src = source as usize - 1;
    let mut dist: Vec<Option<f64>> = vec![None; m];
    let mut pred = vec![None; m];
    let mut done = vec![false; m];
    let mut heap = BinaryHeap::new();

    dist[src] = Some(0.0);
    heap.push(QueueEntry {
        cost: 0.0,
        node: src,
    });

    while let Some(QueueEntry { cost, node: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for v in 0..m {
            if done[v] || !matrix.is_connected(u, v) {
                continue;
            }
            let next = cost + matrix.get(u, v);
            if dist[v].is_none_or(|d| next < d) {
                dist[v] = Some(next);
                pred[v] = Some(u);
                heap.push(QueueEntry {
                    cost: next,
                    node: v,
                });
            }
        }
    }

    ShortestPaths {
        source: src,
        dist,
        pred,
    }
}

/// Finds where a block should be read from when a request lands on `source`.
pub fn route_to_block(index: &SystemIndex, paths: &ShortestPaths, block: &str) -> DataRoute {
    let source = paths.source();
    let outcome = match index.holders(block) {
        Some(holders) if holders.contains(&source) => RouteOutcome::Local,
        Some(holders) => holders
            .iter()
            .filter_map(|&h| paths.cost(h).map(|c| (c, h)))
            // holders iterate in ascending id; only a strictly cheaper holder replaces the best
            .fold(None::<(f64, NodeId)>, |best, (c, h)| match best {
                Some((bc, _)) if bc <= c => best,
                _ => Some((c, h)),
            })
            .and_then(|(_, h)| paths.path(h))
            .map_or(RouteOutcome::Unreachable, RouteOutcome::Remote),
        None => RouteOutcome::Unreachable,
    };
    DataRoute {
        block: block.to_string(),
        outcome,
    }
}

/// Convenience wrapper computing the shortest-path tree on the fly.
pub fn route_from(
    index: &SystemIndex,
    matrix: &ConnectionsMatrix,
    source: NodeId,
    block: &str,
) -> DataRoute {
    route_to_block(index, &dijkstra(matrix, source), block)
}
