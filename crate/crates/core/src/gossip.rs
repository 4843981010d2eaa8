//! Versioned epidemic dissemination of the multiplier vector.
//!
//! Every monitored node owns one entry of the vector and is the only writer
//! of its version counter, so a per-entry highest-version merge is a
//! join-semilattice: stale data never overwrites fresh data and any delivery
//! order converges to the same view. Agents push their full view to one
//! random neighbor per tick; the simulated transport applies a constant
//! latency and an optional i.i.d. drop probability.

use crate::grid_model::NodeId;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GossipError {
    #[error("lambda vectors cover different node sets")]
    NodeSetMismatch,
    #[error("agent {0} has no neighbors in the communication topology")]
    IsolatedAgent(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaEntry {
    pub node_id: NodeId,
    pub lambda_max: f64,
    pub lambda_min: f64,
    /// Owner-issued monotone counter; 0 means never updated.
    pub version: u64,
}

/// Complete multiplier vector over the monitored node set, kept sorted by
/// node id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaVector {
    entries: Vec<LambdaEntry>,
}

impl LambdaVector {
    pub fn zeros(nodes: &[NodeId]) -> Self {
        let mut ids: Vec<NodeId> = nodes.to_vec();
        ids.sort_unstable();
        ids.dedup();
        Self {
            entries: ids
                .into_iter()
                .map(|node_id| LambdaEntry {
                    node_id,
                    lambda_max: 0.0,
                    lambda_min: 0.0,
                    version: 0,
                })
                .collect(),
        }
    }

    pub fn entries(&self) -> &[LambdaEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [LambdaEntry] {
        &mut self.entries
    }

    pub fn entry(&self, node: NodeId) -> Option<&LambdaEntry> {
        self.entries
            .binary_search_by_key(&node, |e| e.node_id)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn entry_mut(&mut self, node: NodeId) -> Option<&mut LambdaEntry> {
        self.entries
            .binary_search_by_key(&node, |e| e.node_id)
            .ok()
            .map(|i| &mut self.entries[i])
    }

    fn same_node_set(&self, other: &LambdaVector) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.node_id == b.node_id)
    }

    /// Per-entry last-writer-wins by version; ties keep the local entry
    /// (equal versions are byte-identical by the single-writer rule).
    /// Returns whether any entry changed.
    pub fn merge_from(&mut self, incoming: &LambdaVector) -> Result<bool, GossipError> {
        if !self.same_node_set(incoming) {
            return Err(GossipError::NodeSetMismatch);
        }
        let mut changed = false;
        for (local, inc) in self.entries.iter_mut().zip(&incoming.entries) {
            if inc.version > local.version {
                *local = *inc;
                changed = true;
            }
        }
        Ok(changed)
    }
}

/// Pure form of the merge, for callers that want a new vector.
pub fn merge(local: &LambdaVector, incoming: &LambdaVector) -> Result<LambdaVector, GossipError> {
    let mut out = local.clone();
    out.merge_from(incoming)?;
    Ok(out)
}

/// Communication graph among agents (agent ids are dense indices).
#[derive(Debug, Clone)]
pub struct CommGraph {
    neighbors: Vec<Vec<usize>>,
}

impl CommGraph {
    pub fn complete(n: usize) -> Self {
        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| j != i).collect())
            .collect();
        Self { neighbors }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a != b && !neighbors[a].contains(&b) {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Self { neighbors }
    }

    pub fn neighbors(&self, agent: usize) -> &[usize] {
        &self.neighbors[agent]
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.neighbors.len();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &self.neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == n
    }
}

/// Uniform choice among the agent's neighbors.
pub fn select_peer(
    agent: usize,
    graph: &CommGraph,
    rng: &mut impl Rng,
) -> Result<usize, GossipError> {
    let neigh = graph.neighbors(agent);
    if neigh.is_empty() {
        return Err(GossipError::IsolatedAgent(agent));
    }
    Ok(neigh[rng.gen_range(0..neigh.len())])
}

/// Quasirandom peer schedule: a seeded random permutation of the agent's
/// neighbors, cycled and reshuffled when exhausted. Each draw is uniformly
/// distributed over the neighbors, but a neighbor is never picked twice
/// before every other neighbor had its turn, which tightens the tail of the
/// epidemic spreading time compared to independent uniform draws.
#[derive(Debug, Clone)]
pub struct PeerSelector {
    order: Vec<usize>,
    pos: usize,
}

impl PeerSelector {
    pub fn new(
        agent: usize,
        graph: &CommGraph,
        rng: &mut impl Rng,
    ) -> Result<Self, GossipError> {
        let mut order = graph.neighbors(agent).to_vec();
        if order.is_empty() {
            return Err(GossipError::IsolatedAgent(agent));
        }
        order.shuffle(rng);
        Ok(Self { order, pos: 0 })
    }

    pub fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.pos == self.order.len() {
            let last = *self.order.last().expect("non-empty by construction");
            loop {
                self.order.shuffle(rng);
                // Avoid an immediate repeat across the cycle boundary.
                if self.order.len() == 1 || self.order[0] != last {
                    break;
                }
            }
            self.pos = 0;
        }
        let peer = self.order[self.pos];
        self.pos += 1;
        peer
    }
}

#[derive(Debug, Clone)]
pub struct GossipMessage {
    pub sender: usize,
    pub receiver: usize,
    pub payload: LambdaVector,
    pub send_time_ms: u64,
}

/// One push per tick, unconditionally, carrying the agent's current view.
pub fn on_gossip_tick(
    agent: usize,
    view: &LambdaVector,
    selector: &mut PeerSelector,
    rng: &mut impl Rng,
    now_ms: u64,
) -> GossipMessage {
    GossipMessage {
        sender: agent,
        receiver: selector.next(rng),
        payload: view.clone(),
        send_time_ms: now_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random versions, but the payload is a deterministic function of
    /// (node, version): the single-writer rule makes equal-version entries
    /// byte-identical, and these generators respect it.
    fn random_vector(rng: &mut ChaCha8Rng, nodes: &[NodeId]) -> LambdaVector {
        let mut v = LambdaVector::zeros(nodes);
        for e in v.entries_mut() {
            e.version = rng.gen_range(0..20);
            e.lambda_max = ((e.node_id as u64 * 31 + e.version * 7) % 13) as f64 / 3.0;
            e.lambda_min = ((e.node_id as u64 * 17 + e.version * 11) % 13) as f64 / 5.0;
        }
        v
    }

    #[test]
    fn merge_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_vector(&mut rng, &[1, 2, 3]);
        assert_eq!(merge(&v, &v).unwrap(), v);
    }

    #[test]
    fn newer_version_wins_and_others_untouched() {
        let nodes = [1, 2];
        let mut local = LambdaVector::zeros(&nodes);
        local.entry_mut(1).unwrap().version = 3;
        local.entry_mut(1).unwrap().lambda_max = 1.0;
        local.entry_mut(2).unwrap().version = 7;
        local.entry_mut(2).unwrap().lambda_min = 9.0;
        let mut incoming = LambdaVector::zeros(&nodes);
        incoming.entry_mut(1).unwrap().version = 5;
        incoming.entry_mut(1).unwrap().lambda_max = 2.0;
        let merged = merge(&local, &incoming).unwrap();
        assert_eq!(merged.entry(1).unwrap().version, 5);
        assert_eq!(merged.entry(1).unwrap().lambda_max, 2.0);
        assert_eq!(merged.entry(2).unwrap().version, 7);
        assert_eq!(merged.entry(2).unwrap().lambda_min, 9.0);
    }

    #[test]
    fn node_set_mismatch_is_rejected() {
        let a = LambdaVector::zeros(&[1, 2]);
        let b = LambdaVector::zeros(&[1, 3]);
        assert!(matches!(merge(&a, &b), Err(GossipError::NodeSetMismatch)));
    }

    #[test]
    fn all_merge_orders_of_four_vectors_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vs: Vec<LambdaVector> = (0..4).map(|_| random_vector(&mut rng, &[1, 2, 3])).collect();
        // All permutations, folded left; also a nested grouping.
        let mut reference: Option<LambdaVector> = None;
        let idx = [0usize, 1, 2, 3];
        let mut perms = Vec::new();
        permute(&idx, &mut Vec::new(), &mut perms);
        for p in perms {
            let mut acc = vs[p[0]].clone();
            for &i in &p[1..] {
                acc = merge(&acc, &vs[i]).unwrap();
            }
            match &reference {
                None => reference = Some(acc),
                Some(r) => assert_eq!(&acc, r),
            }
        }
        let grouped = merge(
            &merge(&vs[0], &vs[1]).unwrap(),
            &merge(&vs[2], &vs[3]).unwrap(),
        )
        .unwrap();
        assert_eq!(&grouped, reference.as_ref().unwrap());
    }

    fn permute(rest: &[usize], acc: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(acc.clone());
            return;
        }
        for (i, &v) in rest.iter().enumerate() {
            let mut next: Vec<usize> = rest.to_vec();
            next.remove(i);
            acc.push(v);
            permute(&next, acc, out);
            acc.pop();
        }
    }

    #[test]
    fn two_agent_complete_graph_always_picks_the_other() {
        let g = CommGraph::complete(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(select_peer(0, &g, &mut rng).unwrap(), 1);
            assert_eq!(select_peer(1, &g, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn seeded_peer_sequence_is_reproducible() {
        let g = CommGraph::complete(6);
        let draw = |seed: u64| -> Vec<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| select_peer(2, &g, &mut rng).unwrap()).collect()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }

    #[test]
    fn peer_choice_is_uniform_over_four_neighbors() {
        let g = CommGraph::from_edges(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000usize;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[select_peer(0, &g, &mut rng).unwrap()] += 1;
        }
        // Each neighbor within 3 sigma of n/4; sigma = sqrt(n p (1-p)).
        let expect = n as f64 / 4.0;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - expect).abs() < 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn isolated_agent_is_an_error() {
        let g = CommGraph::from_edges(3, &[(0, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            select_peer(2, &g, &mut rng),
            Err(GossipError::IsolatedAgent(2))
        ));
    }

    #[test]
    fn tick_sends_even_with_all_zero_vector() {
        let g = CommGraph::complete(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sel = PeerSelector::new(0, &g, &mut rng).unwrap();
        let view = LambdaVector::zeros(&[1, 2, 3]);
        let m1 = on_gossip_tick(0, &view, &mut sel, &mut rng, 0);
        let m2 = on_gossip_tick(0, &view, &mut sel, &mut rng, 100);
        assert_eq!(m1.send_time_ms, 0);
        assert_eq!(m2.send_time_ms, 100);
        assert_eq!(m1.payload, view);
    }

    #[test]
    fn peer_selector_covers_all_neighbors_each_cycle() {
        let g = CommGraph::complete(6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sel = PeerSelector::new(2, &g, &mut rng).unwrap();
        for _ in 0..20 {
            let mut cycle: Vec<usize> = (0..5).map(|_| sel.next(&mut rng)).collect();
            cycle.sort_unstable();
            assert_eq!(cycle, vec![0, 1, 3, 4, 5]);
        }
    }

    #[test]
    fn peer_selector_never_repeats_across_cycle_boundary() {
        let g = CommGraph::complete(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sel = PeerSelector::new(0, &g, &mut rng).unwrap();
        let draws: Vec<usize> = (0..200).map(|_| sel.next(&mut rng)).collect();
        for pair in draws.windows(2) {
            assert_ne!(pair[0], pair[1]);
        }
    }

    #[test]
    fn peer_selector_draws_are_uniform() {
        let g = CommGraph::from_edges(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sel = PeerSelector::new(0, &g, &mut rng).unwrap();
        let n = 10_000usize;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[sel.next(&mut rng)] += 1;
        }
        let expect = n as f64 / 4.0;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - expect).abs() < 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn peer_selector_requires_a_neighbor() {
        let g = CommGraph::from_edges(3, &[(0, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            PeerSelector::new(2, &g, &mut rng),
            Err(GossipError::IsolatedAgent(2))
        ));
    }

    proptest! {
        /// Join-semilattice laws on randomized vectors.
        #[test]
        fn merge_semilattice_laws(seed in 0u64..1_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nodes = [1usize, 2, 3, 4];
            let a = random_vector(&mut rng, &nodes);
            let b = random_vector(&mut rng, &nodes);
            let c = random_vector(&mut rng, &nodes);
            prop_assert_eq!(merge(&a, &a).unwrap(), a.clone());
            prop_assert_eq!(merge(&a, &b).unwrap(), merge(&b, &a).unwrap());
            prop_assert_eq!(
                merge(&merge(&a, &b).unwrap(), &c).unwrap(),
                merge(&a, &merge(&b, &c).unwrap()).unwrap()
            );
        }

        /// Versions never decrease under any merge.
        #[test]
        fn merged_versions_are_monotone(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nodes = [1usize, 2, 3];
            let mut view = random_vector(&mut rng, &nodes);
            for _ in 0..10 {
                let before: Vec<u64> = view.entries().iter().map(|e| e.version).collect();
                let inc = random_vector(&mut rng, &nodes);
                view.merge_from(&inc).unwrap();
                for (e, b) in view.entries().iter().zip(before) {
                    prop_assert!(e.version >= b);
                }
            }
        }
    }
}
