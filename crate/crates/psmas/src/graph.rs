//! Agent dependency DAGs with latency and token annotations.
//!
//! A [`DependencyGraph`] is validated at construction: ids are unique and nonempty,
//! latencies positive, edges well-formed, and the edge relation acyclic. The
//! topological order is fixed at build time with ties broken by ascending agent id,
//! so equal inputs always produce identical graphs.

use serde::{Deserialize, Serialize};
use std::collections::hash_map::Entry;
use std::collections::{BinaryHeap, HashMap, HashSet};

/// One agent: identity, expected inference latency, and token statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentProfile {
    /// Unique agent id, nonempty.
    pub id: String,
    /// Expected inference latency in seconds, strictly positive.
    pub latency_s: f64,
    /// Expected token cost of one invocation.
    pub cost_tokens: u64,
    /// Expected response length in tokens; contributes to the mean response length.
    pub response_tokens: u64,
}

impl AgentProfile {
    pub fn new(id: impl Into<String>, latency_s: f64, cost_tokens: u64, response_tokens: u64) -> Self {
        AgentProfile { id: id.into(), latency_s, cost_tokens, response_tokens }
    }
}

/// Validation and construction failures for dependency graphs.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("agent id must be nonempty")]
    EmptyAgentId,
    #[error("duplicate agent id {0:?}")]
    DuplicateAgentId(String),
    #[error("agent {0:?} has non-positive latency")]
    NonPositiveLatency(String),
    #[error("edge endpoint {0:?} is not a listed agent")]
    UnknownAgentId(String),
    #[error("duplicate edge {0:?} -> {1:?}")]
    DuplicateEdge(String, String),
    #[error("self edge on {0:?}")]
    SelfEdge(String),
    #[error("dependency edges contain a directed cycle")]
    CycleDetected,
    #[error("shape {shape} cannot be realized with n={n}")]
    IncompatibleShape { shape: GraphShape, n: usize },
}

/// Benchmark topology families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphShape {
    LinearChain,
    TwoBranchMerge,
    ForkDag,
}

impl std::fmt::Display for GraphShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GraphShape::LinearChain => "linear_chain",
            GraphShape::TwoBranchMerge => "two_branch_merge",
            GraphShape::ForkDag => "fork_dag",
        };
        f.write_str(s)
    }
}

/// Wire format for graph files:
/// `{"agents":[{"id":"A1","latency_s":2.0,"cost_tokens":1200,"response_tokens":300}],"edges":[["A1","A2"]]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    agents: Vec<AgentProfile>,
    edges: Vec<(String, String)>,
}

/// A validated dependency DAG over agents.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GraphFile", into = "GraphFile")]
pub struct DependencyGraph {
    agents: Vec<AgentProfile>,
    edges: Vec<(usize, usize)>,
    topo: Vec<usize>,
    index: HashMap<String, usize>,
}

impl TryFrom<GraphFile> for DependencyGraph {
    type Error = GraphError;
    fn try_from(f: GraphFile) -> Result<Self, GraphError> {
        build_graph(f.agents, f.edges)
    }
}

impl From<DependencyGraph> for GraphFile {
    fn from(g: DependencyGraph) -> GraphFile {
        let edges = g.edge_ids().map(|(a, b)| (a.to_owned(), b.to_owned())).collect();
        GraphFile { agents: g.agents, edges }
    }
}

/// Build and validate a dependency graph.
///
/// Edges are a set: duplicates and self-edges are rejected rather than ignored.
/// The topological order is computed here once, with ties broken by ascending id.
pub fn build_graph(
    agents: Vec<AgentProfile>,
    edges: Vec<(String, String)>,
) -> Result<DependencyGraph, GraphError> {
    let mut index = HashMap::with_capacity(agents.len());
    for (i, a) in agents.iter().enumerate() {
        if a.id.is_empty() {
            return Err(GraphError::EmptyAgentId);
        }
        if !(a.latency_s > 0.0) || !a.latency_s.is_finite() {
            return Err(GraphError::NonPositiveLatency(a.id.clone()));
        }
        match index.entry(a.id.clone()) {
            Entry::Occupied(_) => return Err(GraphError::DuplicateAgentId(a.id.clone())),
            Entry::Vacant(v) => {
                v.insert(i);
            }
        }
    }
    let mut edge_idx = Vec::with_capacity(edges.len());
    let mut seen = HashSet::with_capacity(edges.len());
    for (from, to) in &edges {
        let fi = *index.get(from).ok_or_else(|| GraphError::UnknownAgentId(from.clone()))?;
        let ti = *index.get(to).ok_or_else(|| GraphError::UnknownAgentId(to.clone()))?;
        if fi == ti {
            return Err(GraphError::SelfEdge(from.clone()));
        }
        if !seen.insert((fi, ti)) {
            return Err(GraphError::DuplicateEdge(from.clone(), to.clone()));
        }
        edge_idx.push((fi, ti));
    }
    let topo = kahn_min_id(&agents, &edge_idx)?;
    Ok(DependencyGraph { agents, edges: edge_idx, topo, index })
}

/// Kahn's algorithm with a min-heap on agent id, which yields the unique
/// lexicographically smallest topological order.
fn kahn_min_id(agents: &[AgentProfile], edges: &[(usize, usize)]) -> Result<Vec<usize>, GraphError> {
    let n = agents.len();
    let mut indeg = vec![0usize; n];
    let mut out = vec![Vec::new(); n];
    for &(f, t) in edges {
        indeg[t] += 1;
        out[f].push(t);
    }
    let mut ready: BinaryHeap<std::cmp::Reverse<(&str, usize)>> = BinaryHeap::new();
    for i in 0..n {
        if indeg[i] == 0 {
            ready.push(std::cmp::Reverse((agents[i].id.as_str(), i)));
        }
    }
    let mut order = Vec::with_capacity(n);
    while let Some(std::cmp::Reverse((_, i))) = ready.pop() {
        order.push(i);
        for &t in &out[i] {
            indeg[t] -= 1;
            if indeg[t] == 0 {
                ready.push(std::cmp::Reverse((agents[t].id.as_str(), t)));
            }
        }
    }
    if order.len() != n {
        return Err(GraphError::CycleDetected);
    }
    Ok(order)
}

/// The topological order as agent ids. Deterministic; repeated calls are identical.
pub fn topological_order(g: &DependencyGraph) -> Vec<String> {
    g.topo.iter().map(|&i| g.agents[i].id.clone()).collect()
}

/// Generate one of the benchmark topologies with uniform annotations.
///
/// Every agent gets the same latency and cost; response lengths are zero and can
/// be set by the caller afterwards. Shapes: a linear chain (n >= 1, n-1 edges),
/// a two-branch merge with a root shortcut (n >= 4, n+1 edges), and a fork DAG
/// where later agents depend on their two predecessors (n >= 4).
pub fn generate_benchmark_graph(
    shape: GraphShape,
    n: usize,
    latency_s: f64,
    tokens: u64,
) -> Result<DependencyGraph, GraphError> {
    let min_n = match shape {
        GraphShape::LinearChain => 1,
        GraphShape::TwoBranchMerge | GraphShape::ForkDag => 4,
    };
    if n < min_n {
        return Err(GraphError::IncompatibleShape { shape, n });
    }
    let id = |k: usize| format!("A{k}");
    let agents: Vec<AgentProfile> =
        (1..=n).map(|k| AgentProfile::new(id(k), latency_s, tokens, 0)).collect();
    let mut edges: Vec<(String, String)> = Vec::new();
    let mut push = |a: usize, b: usize| edges.push((id(a), id(b)));
    match shape {
        GraphShape::LinearChain => {
            for k in 1..n {
                push(k, k + 1);
            }
        }
        GraphShape::TwoBranchMerge => {
            let sinks = 2.min(n - 4);
            let m = n - 2 - sinks;
            let b1 = m.div_ceil(2);
            let branch1: Vec<usize> = (2..2 + b1).collect();
            let branch2: Vec<usize> = (2 + b1..2 + m).collect();
            let merge = 2 + m;
            push(1, branch1[0]);
            push(1, branch2[0]);
            for w in branch1.windows(2) {
                push(w[0], w[1]);
            }
            for w in branch2.windows(2) {
                push(w[0], w[1]);
            }
            push(*branch1.last().unwrap(), merge);
            push(*branch2.last().unwrap(), merge);
            for s in merge + 1..=n {
                push(merge, s);
            }
            push(1, merge);
        }
        GraphShape::ForkDag => {
            let w = 3.min(n - 2);
            for k in 1..=w {
                push(1, k + 1);
            }
            for k in w + 2..=n {
                push(k - 2, k);
                push(k - 1, k);
            }
        }
    }
    build_graph(agents, edges)
}

impl DependencyGraph {
    /// Number of agents.
    pub fn n(&self) -> usize {
        self.agents.len()
    }

    /// Agents in their declared order.
    pub fn agents(&self) -> &[AgentProfile] {
        &self.agents
    }

    /// Agent at a given index.
    pub fn agent(&self, idx: usize) -> &AgentProfile {
        &self.agents[idx]
    }

    /// Index of an agent id, if present.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Edges as index pairs, in declaration order.
    pub fn edge_indices(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Edges as id pairs, in declaration order.
    pub fn edge_ids(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.edges.iter().map(|&(f, t)| (self.agents[f].id.as_str(), self.agents[t].id.as_str()))
    }

    /// Whether the edge (from, to) is in the edge set.
    pub fn contains_edge(&self, from: &str, to: &str) -> bool {
        match (self.index_of(from), self.index_of(to)) {
            (Some(f), Some(t)) => self.edges.contains(&(f, t)),
            _ => false,
        }
    }

    /// The fixed topological order as agent indices.
    pub fn topo_indices(&self) -> &[usize] {
        &self.topo
    }

    /// Largest expected latency over all agents.
    pub fn t_max(&self) -> f64 {
        self.agents.iter().fold(0.0_f64, |m, a| m.max(a.latency_s))
    }

    /// Sum of expected latencies, accumulated in topological order.
    pub fn total_latency(&self) -> f64 {
        self.topo.iter().map(|&i| self.agents[i].latency_s).sum()
    }

    /// Mean response length over agents, in tokens.
    pub fn mean_response_tokens(&self) -> f64 {
        if self.agents.is_empty() {
            return 0.0;
        }
        let total: u64 = self.agents.iter().map(|a| a.response_tokens).sum();
        total as f64 / self.agents.len() as f64
    }

    /// Copy of this graph with every agent's response length replaced.
    pub fn with_response_tokens(&self, response_tokens: u64) -> DependencyGraph {
        let mut g = self.clone();
        for a in &mut g.agents {
            a.response_tokens = response_tokens;
        }
        g
    }
}
