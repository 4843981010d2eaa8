//! Deterministic discrete-event engine for the closed control loop.
//!
//! All state changes happen in events ordered by (time, class, tiebreak).
//! Same-time events of different agents never interact inside a timestamp
//! (messages always travel with nonzero latency), so any tiebreak order
//! among them yields the same sampled output; `tie_shuffle_seed` exercises
//! exactly that freedom in tests.

use crate::control::{
    apply_compensation, compensator_update, CompensatorState, LagrangianState, Snapshot,
    lagrangian_update,
};
use crate::gossip::{on_gossip_tick, CommGraph, GossipError, LambdaVector, PeerSelector};
use crate::grid_model::NodeId;
use crate::powerflow::{solve_bfs, InjectionSet, PowerFlowError, VoltageSolution};
use crate::sensitivity::{sensitivity_matrix, SensitivityError};
use crate::sim::result::{ResultRow, RunSummary, TimeSeriesResult};
use crate::sim::scenario::{Scenario, TopologySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("power flow diverged at t = {time_s} s: {source}")]
    PowerFlowDiverged {
        time_s: f64,
        source: PowerFlowError,
    },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Gossip(#[from] GossipError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
}

// Event classes in processing order within a timestamp.
const CLASS_PHYSICS: u8 = 0;
const CLASS_GOSSIP_TICK: u8 = 1;
const CLASS_DELIVERY: u8 = 2;
const CLASS_LAMBDA: u8 = 3;
const CLASS_SAMPLE: u8 = 4;

#[derive(Debug)]
enum EventKind {
    Physics,
    GossipTick { agent: usize },
    Delivery { receiver: usize, sender: usize, payload: LambdaVector },
    LambdaUpdate { agent: usize },
    Sample,
}

#[derive(Debug)]
struct Event {
    time_ms: u64,
    class: u8,
    tie: u64,
    seq: u64,
    kind: EventKind,
}

impl Event {
    fn key(&self) -> (u64, u8, u64, u64) {
        (self.time_ms, self.class, self.tie, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed so the BinaryHeap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Default)]
pub struct EngineOptions {
    /// When set, same-(time, class) events of different agents are ordered
    /// by a seeded hash instead of insertion order.
    pub tie_shuffle_seed: Option<u64>,
    /// Collect one trace row per delivered vector entry.
    pub collect_trace: bool,
}

/// One delivered lambda entry, for message trace dumps.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub time_ms: u64,
    pub sender: String,
    pub receiver: String,
    pub node: String,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub version: u64,
}

/// Result plus the final agent states, for oracle comparisons.
#[derive(Debug)]
pub struct RunOutput {
    pub result: TimeSeriesResult,
    pub final_voltages: Vec<f64>,
    pub compensators: Vec<CompensatorState>,
    pub lagrangians: Vec<LagrangianState>,
    pub trace: Vec<TraceRow>,
}

pub fn run_simulation(scenario: &Scenario) -> Result<TimeSeriesResult, SimError> {
    Ok(run_simulation_detailed(scenario, &EngineOptions::default())?.result)
}

pub fn run_simulation_detailed(
    scenario: &Scenario,
    options: &EngineOptions,
) -> Result<RunOutput, SimError> {
    Engine::new(scenario, options)?.run()
}

struct Engine<'a> {
    scenario: &'a Scenario,
    options: EngineOptions,
    monitored: Vec<NodeId>,
    /// node id -> agent index (monitored nodes only).
    agent_of_node: Vec<Option<usize>>,
    /// node id -> compensator index.
    comp_of_node: Vec<Option<usize>>,
    comps: Vec<CompensatorState>,
    lagr: Vec<LagrangianState>,
    views: Vec<LambdaVector>,
    rngs: Vec<ChaCha8Rng>,
    selectors: Vec<PeerSelector>,
    heap: BinaryHeap<Event>,
    seq: u64,
    latest: Option<VoltageSolution>,
    injections: InjectionSet,
    rows: Vec<ResultRow>,
    summary: RunSummary,
    trace: Vec<TraceRow>,
    duration_ms: u64,
}

impl<'a> Engine<'a> {
    fn new(scenario: &'a Scenario, options: &EngineOptions) -> Result<Self, SimError> {
        let net = &scenario.network;
        let monitored = scenario.monitored_nodes();
        let n = net.node_count();

        let mut agent_of_node = vec![None; n];
        for (a, &node) in monitored.iter().enumerate() {
            agent_of_node[node] = Some(a);
        }

        let der_nodes: Vec<NodeId> = scenario.ders.iter().map(|d| d.node).collect();
        let sens = sensitivity_matrix(net, &der_nodes)?;

        let mut comp_of_node = vec![None; n];
        let mut comps = Vec::with_capacity(scenario.ders.len());
        for (i, d) in scenario.ders.iter().enumerate() {
            if comp_of_node[d.node].is_some() {
                return Err(SimError::InvalidScenario(format!(
                    "two DERs at node {}",
                    net.nodes[d.node].name
                )));
            }
            comp_of_node[d.node] = Some(i);
            comps.push(CompensatorState {
                der_id: d.der_id.clone(),
                node: d.node,
                c_p: d.c_p,
                c_q: d.c_q,
                p_setpoint_0: 0.0,
                q_setpoint_0: 0.0,
                delta_p_min: d.delta_p_min,
                delta_p_max: d.delta_p_max,
                delta_q_min: d.delta_q_min,
                delta_q_max: d.delta_q_max,
                s_rated: d.s_rated,
                delta_p: 0.0,
                delta_q: 0.0,
                sens_p: (0..n).map(|node| sens.dv_dp[node][i]).collect(),
                sens_q: (0..n).map(|node| sens.dv_dq[node][i]).collect(),
            });
        }

        let graph = build_graph(scenario, &monitored, &agent_of_node)?;
        if scenario.control_enabled && monitored.len() > 1 && !graph.is_connected() {
            return Err(SimError::InvalidScenario(
                "communication topology is not connected".into(),
            ));
        }

        let lagr = monitored
            .iter()
            .map(|&node| LagrangianState::new(node, scenario.alpha, scenario.v_min, scenario.v_max))
            .collect();
        let views = vec![LambdaVector::zeros(&monitored); monitored.len()];
        let mut rngs: Vec<ChaCha8Rng> = (0..monitored.len())
            .map(|a| ChaCha8Rng::seed_from_u64(splitmix64(scenario.seed ^ (a as u64) << 1 | 1)))
            .collect();
        let selectors = if monitored.len() > 1 {
            (0..monitored.len())
                .map(|a| PeerSelector::new(a, &graph, &mut rngs[a]))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };

        Ok(Self {
            scenario,
            options: options.clone(),
            monitored,
            agent_of_node,
            comp_of_node,
            comps,
            lagr,
            views,
            rngs,
            selectors,
            heap: BinaryHeap::new(),
            seq: 0,
            latest: None,
            injections: InjectionSet::zeros(n),
            rows: Vec::new(),
            summary: RunSummary {
                violation_seconds: vec![0; n],
                ..RunSummary::default()
            },
            trace: Vec::new(),
            duration_ms: scenario.duration_s() * 1000,
        })
    }

    fn push(&mut self, time_ms: u64, class: u8, disc: u64, kind: EventKind) {
        if time_ms > self.duration_ms {
            return;
        }
        let tie = match self.options.tie_shuffle_seed {
            Some(s) => splitmix64(s ^ time_ms.wrapping_mul(0x1000_0000_1b3) ^ ((class as u64) << 56) ^ disc),
            None => self.seq,
        };
        self.seq += 1;
        self.heap.push(Event {
            time_ms,
            class,
            tie,
            seq: self.seq,
            kind,
        });
    }

    fn run(mut self) -> Result<RunOutput, SimError> {
        let tick = self.scenario.gossip_tick_ms;
        let control = self.scenario.control_enabled;

        // Initial schedule. Agent phases are randomized from the scenario
        // seed so the loop is asynchronous.
        self.push(0, CLASS_PHYSICS, 0, EventKind::Physics);
        self.push(0, CLASS_SAMPLE, 0, EventKind::Sample);
        if control {
            let mut phase_rng = ChaCha8Rng::seed_from_u64(splitmix64(self.scenario.seed));
            for a in 0..self.monitored.len() {
                if self.monitored.len() > 1 {
                    let phase = phase_rng.gen_range(0..tick);
                    self.push(phase, CLASS_GOSSIP_TICK, a as u64, EventKind::GossipTick { agent: a });
                }
                let lphase = phase_rng.gen_range(0..self.scenario.lambda_update_period_ms);
                self.push(lphase, CLASS_LAMBDA, a as u64, EventKind::LambdaUpdate { agent: a });
            }
        }

        while let Some(ev) = self.heap.pop() {
            let t = ev.time_ms;
            match ev.kind {
                EventKind::Physics => {
                    self.on_physics(t)?;
                    self.push(t + tick, CLASS_PHYSICS, 0, EventKind::Physics);
                }
                EventKind::GossipTick { agent } => {
                    self.on_gossip_tick(agent, t)?;
                    self.push(t + tick, CLASS_GOSSIP_TICK, agent as u64, EventKind::GossipTick { agent });
                }
                EventKind::Delivery { receiver, sender, payload } => {
                    self.on_delivery(receiver, sender, &payload, t)?;
                }
                EventKind::LambdaUpdate { agent } => {
                    self.on_lambda_update(agent);
                    self.push(
                        t + self.scenario.lambda_update_period_ms,
                        CLASS_LAMBDA,
                        agent as u64,
                        EventKind::LambdaUpdate { agent },
                    );
                }
                EventKind::Sample => {
                    self.on_sample(t);
                    self.push(t + 1000, CLASS_SAMPLE, 0, EventKind::Sample);
                }
            }
        }

        let final_voltages = self
            .latest
            .as_ref()
            .map(|s| s.magnitudes())
            .unwrap_or_default();
        Ok(RunOutput {
            result: TimeSeriesResult {
                node_names: self
                    .scenario
                    .network
                    .nodes
                    .iter()
                    .map(|nd| nd.name.clone())
                    .collect(),
                der_ids: self.comps.iter().map(|c| c.der_id.clone()).collect(),
                rows: self.rows,
                summary: self.summary,
            },
            final_voltages,
            compensators: self.comps,
            lagrangians: self.lagr,
            trace: self.trace,
        })
    }

    fn abs_time_s(&self, time_ms: u64) -> f64 {
        self.scenario.t_start_s as f64 + time_ms as f64 / 1000.0
    }

    /// Refresh DER operating points, apply compensation, rebuild injections
    /// and re-solve the grid if anything changed.
    fn on_physics(&mut self, time_ms: u64) -> Result<(), SimError> {
        let t_abs = self.abs_time_s(time_ms);
        let net = &self.scenario.network;
        let control = self.scenario.control_enabled;

        for (i, d) in self.scenario.ders.iter().enumerate() {
            let comp = &mut self.comps[i];
            let p0 = d.profile.value_pu(t_abs, net.s_base).clamp(0.0, d.s_rated);
            comp.p_setpoint_0 = p0;
            // Curtailment can only reduce the momentary output.
            comp.delta_p_min = d.delta_p_min.max(-p0);
            comp.delta_p_max = d.delta_p_max.min(0.0).max(comp.delta_p_min);
            if control {
                let agent = self.agent_of_node[comp.node].expect("DER on monitored node");
                compensator_update(comp, &self.views[agent])
                    .expect("p_setpoint_0 clamped to rating");
            }
        }

        let mut inj = InjectionSet::zeros(net.node_count());
        for l in &self.scenario.loads {
            let p = l.profile.value_pu(t_abs, net.s_base).max(0.0);
            inj.add(l.node, -p, -p * l.tan_phi);
        }
        for comp in &self.comps {
            let (p, q) = apply_compensation(comp);
            debug_assert!(p * p + q * q <= comp.s_rated * comp.s_rated + 1e-12);
            inj.add(comp.node, p, q);
        }

        if self.latest.is_none() || inj != self.injections {
            match solve_bfs(net, &inj) {
                Ok(sol) => {
                    self.latest = Some(sol);
                    self.summary.power_flow_solves += 1;
                }
                Err(source) => {
                    return Err(SimError::PowerFlowDiverged {
                        time_s: t_abs,
                        source,
                    })
                }
            }
            self.injections = inj;
        }
        Ok(())
    }

    fn on_gossip_tick(&mut self, agent: usize, time_ms: u64) -> Result<(), SimError> {
        let msg = on_gossip_tick(
            agent,
            &self.views[agent],
            &mut self.selectors[agent],
            &mut self.rngs[agent],
            time_ms,
        );
        let dropped = self.scenario.drop_probability > 0.0
            && self.rngs[agent].gen::<f64>() < self.scenario.drop_probability;
        if !dropped {
            let receiver = msg.receiver;
            self.push(
                time_ms + self.scenario.latency_ms,
                CLASS_DELIVERY,
                receiver as u64,
                EventKind::Delivery {
                    receiver,
                    sender: msg.sender,
                    payload: msg.payload,
                },
            );
        }
        Ok(())
    }

    fn on_delivery(
        &mut self,
        receiver: usize,
        sender: usize,
        payload: &LambdaVector,
        time_ms: u64,
    ) -> Result<(), SimError> {
        let changed = self.views[receiver].merge_from(payload)?;
        self.summary.message_count += 1;
        if self.options.collect_trace {
            let names = &self.scenario.network.nodes;
            for e in payload.entries() {
                self.trace.push(TraceRow {
                    time_ms,
                    sender: names[self.monitored[sender]].name.clone(),
                    receiver: names[self.monitored[receiver]].name.clone(),
                    node: names[e.node_id].name.clone(),
                    lambda_min: e.lambda_min,
                    lambda_max: e.lambda_max,
                    version: e.version,
                });
            }
        }
        if changed {
            self.react_to_view(receiver);
        }
        Ok(())
    }

    /// Compensators react immediately to any change of their node's view.
    fn react_to_view(&mut self, agent: usize) {
        let node = self.monitored[agent];
        if let Some(ci) = self.comp_of_node[node] {
            compensator_update(&mut self.comps[ci], &self.views[agent])
                .expect("p_setpoint_0 clamped to rating");
        }
    }

    fn on_lambda_update(&mut self, agent: usize) {
        let node = self.monitored[agent];
        let v = self
            .latest
            .as_ref()
            .map(|s| s.magnitude(node))
            .unwrap_or(self.scenario.network.v_nom_pu);
        let state = &mut self.lagr[agent];
        lagrangian_update(state, v);
        let entry = self.views[agent].entry_mut(node).expect("own entry");
        entry.lambda_max = state.lambda_max;
        entry.lambda_min = state.lambda_min;
        entry.version = state.version;
        self.react_to_view(agent);
    }

    fn on_sample(&mut self, time_ms: u64) {
        let net = &self.scenario.network;
        let n = net.node_count();
        let sol = self.latest.as_ref().expect("physics runs first");
        let v = sol.magnitudes();
        let mut row = ResultRow {
            time_s: time_ms / 1000,
            v,
            dp: Vec::with_capacity(self.comps.len()),
            dq: Vec::with_capacity(self.comps.len()),
            p_applied: Vec::with_capacity(self.comps.len()),
            q_applied: Vec::with_capacity(self.comps.len()),
            p_net: (0..n).map(|i| self.injections.get(i).re).collect(),
            q_net: (0..n).map(|i| self.injections.get(i).im).collect(),
            lmin: vec![0.0; n],
            lmax: vec![0.0; n],
        };
        for c in &self.comps {
            row.dp.push(c.delta_p);
            row.dq.push(c.delta_q);
            let (p, q) = apply_compensation(c);
            row.p_applied.push(p);
            row.q_applied.push(q);
            self.summary.max_abs_dq = self.summary.max_abs_dq.max(c.delta_q.abs());
            self.summary.max_abs_dp = self.summary.max_abs_dp.max(c.delta_p.abs());
        }
        for (a, l) in self.lagr.iter().enumerate() {
            let node = self.monitored[a];
            row.lmin[node] = l.lambda_min;
            row.lmax[node] = l.lambda_max;
        }
        for (i, &vi) in row.v.iter().enumerate() {
            if i != net.slack && (vi < self.scenario.v_min || vi > self.scenario.v_max) {
                self.summary.violation_seconds[i] += 1;
            }
        }
        self.rows.push(row);
    }
}

fn build_graph(
    scenario: &Scenario,
    monitored: &[NodeId],
    agent_of_node: &[Option<usize>],
) -> Result<CommGraph, SimError> {
    Ok(match &scenario.topology {
        TopologySpec::Complete => CommGraph::complete(monitored.len()),
        TopologySpec::Electrical => {
            let mut edges = Vec::new();
            for b in &scenario.network.branches {
                if let (Some(a), Some(c)) = (agent_of_node[b.from], agent_of_node[b.to]) {
                    edges.push((a, c));
                }
            }
            CommGraph::from_edges(monitored.len(), &edges)
        }
        TopologySpec::Edges { edges } => {
            let mut resolved = Vec::with_capacity(edges.len());
            for (a, b) in edges {
                let na = scenario.network.node_by_name(a).map_err(|_| {
                    SimError::InvalidScenario(format!("topology edge references unknown node {a}"))
                })?;
                let nb = scenario.network.node_by_name(b).map_err(|_| {
                    SimError::InvalidScenario(format!("topology edge references unknown node {b}"))
                })?;
                match (agent_of_node[na], agent_of_node[nb]) {
                    (Some(x), Some(y)) => resolved.push((x, y)),
                    _ => {
                        return Err(SimError::InvalidScenario(format!(
                            "topology edge {a}-{b} touches a non-monitored node"
                        )))
                    }
                }
            }
            CommGraph::from_edges(monitored.len(), &resolved)
        }
    })
}

/// Rebuilds the linearization base point from a finished run: subtracting
/// the linear effect of the applied deltas from the measured voltages gives
/// the V_0 for which the centralized solver targets the same fixed point the
/// distributed loop settled on.
pub fn consistent_snapshot(scenario: &Scenario, out: &RunOutput) -> Snapshot {
    let net = &scenario.network;
    let n = net.node_count();
    let mut v0 = out.final_voltages.clone();
    for c in &out.compensators {
        for (node, v) in v0.iter_mut().enumerate().take(n) {
            *v -= c.sens_p[node] * c.delta_p + c.sens_q[node] * c.delta_q;
        }
    }
    let der_nodes: Vec<NodeId> = out.compensators.iter().map(|c| c.node).collect();
    Snapshot {
        v0,
        sensitivity: sensitivity_matrix(net, &der_nodes).expect("nodes validated at load"),
        compensators: out.compensators.clone(),
        v_min: scenario.v_min,
        v_max: scenario.v_max,
        alpha: scenario.alpha,
        monitored: scenario.monitored_nodes(),
    }
}
