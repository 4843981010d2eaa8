//! Radial feeder topology, validation and per-unit conversion.
//!
//! A network is loaded from a JSON document, checked to be a tree rooted at
//! the single slack node, and converted to per-unit before any power-flow or
//! sensitivity computation. Node ids in the input file are arbitrary strings;
//! the loader assigns dense integer ids for array indexing and keeps the name
//! map for reporting.

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("network spec is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("branch {from}-{to} closes a loop; the feeder must be radial")]
    CycleDetected { from: String, to: String },
    #[error("node {0} is not reachable from the slack node")]
    Disconnected(String),
    #[error("no node with kind \"slack\" in the network spec")]
    MissingSlack,
    #[error("more than one slack node ({0} and {1})")]
    MultipleSlack(String, String),
    #[error("branch {from}-{to}: resistance must be > 0 and reactance >= 0")]
    NonPositiveImpedance { from: String, to: String },
    #[error("duplicate node id {0}")]
    DuplicateNode(String),
    #[error("branch references unknown node {0}")]
    UnknownBranchNode(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("network is already in per-unit")]
    AlreadyPerUnit,
    #[error("network must be converted to per-unit first")]
    NotPerUnit,
    #[error("base values must be positive (v_base={v_base}, s_base={s_base})")]
    NonPositiveBase { v_base: f64, s_base: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Slack,
    Load,
}

/// Dense node index assigned by the loader, 0..n.
pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub kind: NodeKind,
    /// DER name attached at this node, if any.
    pub attached_der: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub from: NodeId,
    pub to: NodeId,
    /// Ohms before `to_per_unit`, pu after.
    pub resistance: f64,
    pub reactance: f64,
}

#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub nodes: Vec<Node>,
    pub branches: Vec<Branch>,
    pub slack: NodeId,
    pub v_base: f64,
    pub s_base: f64,
    pub v_nom_pu: f64,
    per_unit: bool,
    /// parent[n] = (parent node, branch index) on the path to the slack; None for the slack.
    parent: Vec<Option<(NodeId, usize)>>,
    depth: Vec<usize>,
}

// Input schema. Unknown keys are rejected.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkSpec {
    v_base_volts: f64,
    s_base_va: f64,
    #[serde(default)]
    v_nom_pu: Option<f64>,
    nodes: Vec<NodeSpec>,
    branches: Vec<BranchSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeSpec {
    id: String,
    kind: String,
    #[serde(default)]
    der: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchSpec {
    from: String,
    to: String,
    r_ohm: f64,
    x_ohm: f64,
}

/// Parses and validates a network spec document (JSON text).
pub fn load_network(spec: &str) -> Result<NetworkModel, GridError> {
    let spec: NetworkSpec = serde_json::from_str(spec)?;
    if spec.v_base_volts <= 0.0 || spec.s_base_va <= 0.0 {
        return Err(GridError::NonPositiveBase {
            v_base: spec.v_base_volts,
            s_base: spec.s_base_va,
        });
    }

    let mut nodes = Vec::with_capacity(spec.nodes.len());
    let mut slack: Option<NodeId> = None;
    for (idx, n) in spec.nodes.iter().enumerate() {
        if spec.nodes[..idx].iter().any(|m| m.id == n.id) {
            return Err(GridError::DuplicateNode(n.id.clone()));
        }
        let kind = match n.kind.as_str() {
            "slack" => {
                if let Some(s) = slack {
                    return Err(GridError::MultipleSlack(
                        spec.nodes[s].id.clone(),
                        n.id.clone(),
                    ));
                }
                slack = Some(idx);
                NodeKind::Slack
            }
            _ => NodeKind::Load,
        };
        nodes.push(Node {
            id: idx,
            name: n.id.clone(),
            kind,
            attached_der: n.der.clone(),
        });
    }
    let slack = slack.ok_or(GridError::MissingSlack)?;

    let find = |name: &str| -> Result<NodeId, GridError> {
        nodes
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| GridError::UnknownBranchNode(name.to_string()))
    };

    let mut branches = Vec::with_capacity(spec.branches.len());
    for b in &spec.branches {
        if b.r_ohm <= 0.0 || b.x_ohm < 0.0 {
            return Err(GridError::NonPositiveImpedance {
                from: b.from.clone(),
                to: b.to.clone(),
            });
        }
        branches.push(Branch {
            from: find(&b.from)?,
            to: find(&b.to)?,
            resistance: b.r_ohm,
            reactance: b.x_ohm,
        });
    }

    let (parent, depth) = check_tree(&nodes, &branches, slack)?;

    Ok(NetworkModel {
        nodes,
        branches,
        slack,
        v_base: spec.v_base_volts,
        s_base: spec.s_base_va,
        v_nom_pu: spec.v_nom_pu.unwrap_or(1.0),
        per_unit: false,
        parent,
        depth,
    })
}

/// DFS from the slack: rejects loops and unreachable nodes, builds parent pointers.
#[allow(clippy::type_complexity)]
fn check_tree(
    nodes: &[Node],
    branches: &[Branch],
    slack: NodeId,
) -> Result<(Vec<Option<(NodeId, usize)>>, Vec<usize>), GridError> {
    let n = nodes.len();
    let mut adj: Vec<Vec<(NodeId, usize)>> = vec![Vec::new(); n];
    for (bi, b) in branches.iter().enumerate() {
        adj[b.from].push((b.to, bi));
        adj[b.to].push((b.from, bi));
    }

    let mut parent: Vec<Option<(NodeId, usize)>> = vec![None; n];
    let mut depth = vec![0usize; n];
    let mut visited = vec![false; n];
    let mut stack = vec![slack];
    visited[slack] = true;
    while let Some(u) = stack.pop() {
        for &(v, bi) in &adj[u] {
            if let Some((_, pb)) = parent[u] {
                if pb == bi {
                    continue; // edge back to the parent
                }
            } else if u == slack && parent[slack].is_some() {
                unreachable!();
            }
            if visited[v] {
                return Err(GridError::CycleDetected {
                    from: nodes[branches[bi].from].name.clone(),
                    to: nodes[branches[bi].to].name.clone(),
                });
            }
            visited[v] = true;
            parent[v] = Some((u, bi));
            depth[v] = depth[u] + 1;
            stack.push(v);
        }
    }
    if let Some(u) = (0..n).find(|&u| !visited[u]) {
        return Err(GridError::Disconnected(nodes[u].name.clone()));
    }
    Ok((parent, depth))
}

/// Scales branch impedances from ohms to per-unit (Z_base = v_base^2 / s_base).
pub fn to_per_unit(network: &NetworkModel) -> Result<NetworkModel, GridError> {
    if network.per_unit {
        return Err(GridError::AlreadyPerUnit);
    }
    let z_base = network.v_base * network.v_base / network.s_base;
    let mut out = network.clone();
    for b in &mut out.branches {
        b.resistance /= z_base;
        b.reactance /= z_base;
    }
    out.per_unit = true;
    Ok(out)
}

impl NetworkModel {
    pub fn is_per_unit(&self) -> bool {
        self.per_unit
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_by_name(&self, name: &str) -> Result<NodeId, GridError> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| GridError::UnknownNode(name.to_string()))
    }

    /// Parent node and connecting branch index, None for the slack.
    pub fn parent(&self, n: NodeId) -> Option<(NodeId, usize)> {
        self.parent[n]
    }

    /// Node ids ordered root first, children after their parents.
    pub fn topo_order(&self) -> Vec<NodeId> {
        let mut order: Vec<NodeId> = (0..self.nodes.len()).collect();
        order.sort_by_key(|&n| self.depth[n]);
        order
    }

    /// Summed impedance of the branches shared by the slack->n and slack->d
    /// paths, i.e. the path from the slack down to the common ancestor of n
    /// and d. This is the equivalent (r_nd, x_nd) of the linearized voltage
    /// model on a radial feeder.
    pub fn path_impedance(&self, n: NodeId, d: NodeId) -> Result<(f64, f64), GridError> {
        if !self.per_unit {
            return Err(GridError::NotPerUnit);
        }
        if n >= self.nodes.len() {
            return Err(GridError::UnknownNode(n.to_string()));
        }
        if d >= self.nodes.len() {
            return Err(GridError::UnknownNode(d.to_string()));
        }
        // Walk both nodes up to their common ancestor, then sum slack->ancestor.
        let (mut a, mut b) = (n, d);
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].unwrap().0;
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].unwrap().0;
        }
        while a != b {
            a = self.parent[a].unwrap().0;
            b = self.parent[b].unwrap().0;
        }
        let mut r = 0.0;
        let mut x = 0.0;
        let mut u = a;
        while let Some((p, bi)) = self.parent[u] {
            r += self.branches[bi].resistance;
            x += self.branches[bi].reactance;
            u = p;
        }
        Ok((r, x))
    }
}
