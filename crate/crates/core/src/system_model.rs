//! The system information index: nodes, their hardware, load, hosted data
//! blocks and network connections.
//!
//! An index is an immutable value. Every change goes through
//! [`SystemIndex::apply_update`], which returns a new index with the version
//! bumped by one.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size assumed for a block absent from `block_sizes`.
pub const DEFAULT_BLOCK_SIZE: f64 = 1.0;

/// Marker stored in a [`ConnectionsMatrix`] for an absent edge.
pub const NOT_CONNECTED: f64 = -1.0;

pub type NodeId = u32;
pub type BlockId = String;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndexError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error: {0}")]
    Validation(String),
}

fn invalid(msg: impl Into<String>) -> IndexError {
    IndexError::Validation(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Connection {
    pub to: NodeId,
    pub weight: f64,
}

/// One node of the federation, as declared in the index document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    #[serde(rename = "ID")]
    pub id: NodeId,
    #[serde(rename = "NAME")]
    pub name: String,
    #[serde(rename = "CPU")]
    pub cpu: u32,
    #[serde(rename = "GPU")]
    pub gpu: u32,
    #[serde(rename = "ARM")]
    pub arm: u32,
    /// Utilization over the trailing window, in `[0, 1]`.
    #[serde(rename = "LOAD")]
    pub load: f64,
    #[serde(rename = "CONNECTIONS")]
    pub connections: Vec<Connection>,
    #[serde(rename = "DATA")]
    pub data: BTreeSet<BlockId>,
}

impl NodeSpec {
    /// Core capacities in plan order: CPU, GPU, ARM.
    pub fn capacities(&self) -> [u32; 3] {
        [self.cpu, self.gpu, self.arm]
    }

    fn validate(&self) -> Result<(), IndexError> {
        if self.id == 0 {
            return Err(invalid("ID must be a positive integer"));
        }
        if !(0.0..=1.0).contains(&self.load) {
            return Err(invalid(format!(
                "node {}: LOAD {} outside [0, 1]",
                self.id, self.load
            )));
        }
        for c in &self.connections {
            if c.to == self.id {
                return Err(invalid(format!("node {}: self-connection", self.id)));
            }
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(invalid(format!(
                    "node {}: connection weight to {} must be positive, got {}",
                    self.id, c.to, c.weight
                )));
            }
        }
        Ok(())
    }
}

/// Wire form of the index document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexDocument {
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub block_sizes: BTreeMap<BlockId, f64>,
}

/// A validated, versioned view of the federation.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemIndex {
    nodes: Vec<NodeSpec>,
    version: u64,
    data_catalog: BTreeMap<BlockId, BTreeSet<NodeId>>,
    block_sizes: BTreeMap<BlockId, f64>,
}

/// A single mutation of the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum IndexUpdate {
    /// The new node must take id `M + 1`.
    NodeAdded {
        node: NodeSpec,
    },
    /// Only the highest id may be removed; anything else would need
    /// re-indexing, which has to be done through a new document.
    NodeRemoved {
        id: NodeId,
    },
    DataBlockAdded {
        node: NodeId,
        block: BlockId,
        #[serde(default)]
        size: Option<f64>,
    },
    DataBlockRemoved {
        node: NodeId,
        block: BlockId,
    },
    LoadChanged {
        node: NodeId,
        load: f64,
    },
    /// `weight: None` drops the declared connection.
    ConnectionChanged {
        from: NodeId,
        to: NodeId,
        weight: Option<f64>,
    },
}

/// Parses an index document from JSON text. The result has version 1.
pub fn parse_index(document: &str) -> Result<SystemIndex, IndexError> {
    let doc: IndexDocument =
        serde_json::from_str(document).map_err(|e| IndexError::Schema(e.to_string()))?;
    SystemIndex::from_document(doc, 1)
}

impl SystemIndex {
    /// Validates a document and tags the result with `version`.
    pub fn from_document(doc: IndexDocument, version: u64) -> Result<Self, IndexError> {
        Self::build(doc.nodes, doc.block_sizes, version, BTreeSet::new())
    }

    fn build(
        mut nodes: Vec<NodeSpec>,
        block_sizes: BTreeMap<BlockId, f64>,
        version: u64,
        known_blocks: BTreeSet<BlockId>,
    ) -> Result<Self, IndexError> {
        nodes.sort_by_key(|n| n.id);
        for (pos, node) in nodes.iter().enumerate() {
            node.validate()?;
            if pos > 0 && nodes[pos - 1].id == node.id {
                return Err(invalid(format!("duplicate node ID {}", node.id)));
            }
            if node.id as usize != pos + 1 {
                return Err(invalid(format!(
                    "node ids must be the contiguous range 1..{}, found ID {} at position {}",
                    nodes.len(),
                    node.id,
                    pos + 1
                )));
            }
        }
        let m = nodes.len() as NodeId;
        for node in &nodes {
            if let Some(c) = node.connections.iter().find(|c| c.to == 0 || c.to > m) {
                return Err(invalid(format!(
                    "node {}: connection to unknown peer {}",
                    node.id, c.to
                )));
            }
        }
        for (block, size) in &block_sizes {
            if !(size.is_finite() && *size > 0.0) {
                return Err(invalid(format!(
                    "block {block}: size must be positive, got {size}"
                )));
            }
        }

        let mut data_catalog: BTreeMap<BlockId, BTreeSet<NodeId>> = known_blocks
            .into_iter()
            .chain(block_sizes.keys().cloned())
            .map(|b| (b, BTreeSet::new()))
            .collect();
        for node in &nodes {
            for block in &node.data {
                data_catalog
                    .entry(block.clone())
                    .or_default()
                    .insert(node.id);
            }
        }

        Ok(Self {
            nodes,
            version,
            data_catalog,
            block_sizes,
        })
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        (id as usize)
            .checked_sub(1)
            .and_then(|pos| self.nodes.get(pos))
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Block id to the set of nodes hosting it. Blocks that lost their last
    /// holder keep an empty entry.
    pub fn data_catalog(&self) -> &BTreeMap<BlockId, BTreeSet<NodeId>> {
        &self.data_catalog
    }

    pub fn holders(&self, block: &str) -> Option<&BTreeSet<NodeId>> {
        self.data_catalog.get(block)
    }

    pub fn block_sizes(&self) -> &BTreeMap<BlockId, f64> {
        &self.block_sizes
    }

    pub fn block_size(&self, block: &str) -> f64 {
        self.block_sizes
            .get(block)
            .copied()
            .unwrap_or(DEFAULT_BLOCK_SIZE)
    }

    pub fn to_document(&self) -> IndexDocument {
        IndexDocument {
            nodes: self.nodes.clone(),
            block_sizes: self.block_sizes.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("index serializes")
    }

    /// Returns a new index with the mutation applied and the version bumped.
    pub fn apply_update(&self, update: &IndexUpdate) -> Result<SystemIndex, IndexError> {
        let mut nodes = self.nodes.clone();
        let mut block_sizes = self.block_sizes.clone();
        let m = nodes.len() as NodeId;

        let node_mut = |nodes: &mut Vec<NodeSpec>, id: NodeId| -> Result<usize, IndexError> {
            nodes
                .iter()
                .position(|n| n.id == id)
                .ok_or_else(|| invalid(format!("unknown node {id}")))
        };

        match update {
            IndexUpdate::NodeAdded { node } => {
                if node.id != m + 1 {
                    return Err(invalid(format!(
                        "new node must take ID {}, got {}",
                        m + 1,
                        node.id
                    )));
                }
                nodes.push(node.clone());
            }
            IndexUpdate::NodeRemoved { id } => {
                node_mut(&mut nodes, *id)?;
                if *id != m {
                    return Err(invalid(format!(
                        "removing node {id} of {m} would break contiguous ids; submit a re-indexed document"
                    )));
                }
                nodes.pop();
                for n in &mut nodes {
                    n.connections.retain(|c| c.to != *id);
                }
            }
            IndexUpdate::DataBlockAdded { node, block, size } => {
                let pos = node_mut(&mut nodes, *node)?;
                nodes[pos].data.insert(block.clone());
                if let Some(size) = size {
                    block_sizes.insert(block.clone(), *size);
                }
            }
            IndexUpdate::DataBlockRemoved { node, block } => {
                let pos = node_mut(&mut nodes, *node)?;
                if !nodes[pos].data.remove(block) {
                    return Err(invalid(format!("node {node} does not host block {block}")));
                }
            }
            IndexUpdate::LoadChanged { node, load } => {
                let pos = node_mut(&mut nodes, *node)?;
                nodes[pos].load = *load;
            }
            IndexUpdate::ConnectionChanged { from, to, weight } => {
                let pos = node_mut(&mut nodes, *from)?;
                node_mut(&mut nodes, *to)?;
                let conns = &mut nodes[pos].connections;
                conns.retain(|c| c.to != *to);
                if let Some(weight) = weight {
                    conns.push(Connection {
                        to: *to,
                        weight: *weight,
                    });
                }
            }
        }

        let known = self.data_catalog.keys().cloned().collect();
        Self::build(nodes, block_sizes, self.version + 1, known)
    }

    /// Symmetrized connection matrix. Both declared directions collapse to
    /// the smaller weight.
    pub fn to_connections_matrix(&self) -> ConnectionsMatrix {
        let m = self.nodes.len();
        let mut cells = vec![NOT_CONNECTED; m * m];
        for i in 0..m {
            cells[i * m + i] = 0.0;
        }
        for node in &self.nodes {
            let i = node.id as usize - 1;
            for c in &node.connections {
                let j = c.to as usize - 1;
                for (a, b) in [(i, j), (j, i)] {
                    let cell = &mut cells[a * m + b];
                    if *cell == NOT_CONNECTED || c.weight < *cell {
                        *cell = c.weight;
                    }
                }
            }
        }
        ConnectionsMatrix { size: m, cells }
    }

    /// Number of connected components of the symmetrized graph.
    pub fn component_count(&self) -> usize {
        let matrix = self.to_connections_matrix();
        let m = matrix.size();
        let mut seen = vec![false; m];
        let mut components = 0;
        for start in 0..m {
            if seen[start] {
                continue;
            }
            components += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(u) = stack.pop() {
                for (v, s) in seen.iter_mut().enumerate() {
                    if !*s && matrix.get(u, v) > 0.0 {
                        *s = true;
                        stack.push(v);
                    }
                }
            }
        }
        components
    }
}

/// Dense `M × M` edge-cost matrix, 0-based.
///
/// `get(i, j)` is `0.0` on the diagonal, [`NOT_CONNECTED`] for absent edges
/// and the (positive) edge weight otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionsMatrix {
    size: usize,
    cells: Vec<f64>,
}

impl ConnectionsMatrix {
    /// Builds a matrix from rows. Panics if the rows are not square.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let size = rows.len();
        assert!(
            rows.iter().all(|r| r.len() == size),
            "matrix must be square"
        );
        Self {
            size,
            cells: rows.into_iter().flatten().collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cells[i * self.size + j]
    }

    pub fn is_connected(&self, i: usize, j: usize) -> bool {
        i != j && self.get(i, j) > 0.0
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.cells
            .chunks(self.size.max(1))
            .map(<[f64]>::to_vec)
            .collect()
    }
}
