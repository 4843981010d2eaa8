//! Scenario files: the complete description of one simulation run.

use crate::grid_model::{self, GridError, NetworkModel, NodeId};
use crate::sim::profile::{Interpolation, Profile, ProfileError, ProfileUnit, SyntheticSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("scenario is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub network: NetworkSource,
    pub v_min: f64,
    pub v_max: f64,
    pub alpha: f64,
    pub gossip_tick_ms: u64,
    pub latency_ms: u64,
    #[serde(default)]
    pub drop_probability: f64,
    pub lambda_update_period_ms: u64,
    pub t_start_s: u64,
    pub t_end_s: u64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub control_enabled: bool,
    #[serde(default)]
    pub topology: TopologySpec,
    pub ders: Vec<DerSpec>,
    pub loads: Vec<LoadSpec>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSource {
    Path { path: String },
    Inline(serde_json::Value),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologySpec {
    /// Every agent can reach every other agent.
    #[default]
    Complete,
    /// Agents of electrically adjacent nodes communicate.
    Electrical,
    /// Explicit edge list over node names.
    #[serde(untagged)]
    Edges { edges: Vec<(String, String)> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerSpec {
    pub node: String,
    pub s_rated_va: f64,
    pub c_p: f64,
    pub c_q: f64,
    pub delta_p_min_pu: f64,
    pub delta_p_max_pu: f64,
    pub delta_q_min_pu: f64,
    pub delta_q_max_pu: f64,
    pub profile: ProfileSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    pub node: String,
    pub power_factor: f64,
    pub profile: ProfileSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSource {
    Csv {
        csv: String,
        #[serde(default = "default_linear")]
        interpolation: Interpolation,
        #[serde(default = "default_watts")]
        unit: ProfileUnit,
    },
    Synthetic {
        synthetic: SyntheticSpec,
    },
    Inline {
        samples: Vec<(f64, f64)>,
        interpolation: Interpolation,
        unit: ProfileUnit,
    },
}

fn default_linear() -> Interpolation {
    Interpolation::Linear
}

fn default_watts() -> ProfileUnit {
    ProfileUnit::Watts
}

/// A DER ready for simulation.
#[derive(Debug, Clone)]
pub struct DerConfig {
    pub node: NodeId,
    pub der_id: String,
    /// Rating in pu on the network power base.
    pub s_rated: f64,
    pub c_p: f64,
    pub c_q: f64,
    pub delta_p_min: f64,
    pub delta_p_max: f64,
    pub delta_q_min: f64,
    pub delta_q_max: f64,
    pub profile: Profile,
}

#[derive(Debug, Clone)]
pub struct LoadConfig {
    pub node: NodeId,
    pub power_factor: f64,
    /// tan(acos(pf)), cached.
    pub tan_phi: f64,
    pub profile: Profile,
}

/// Fully resolved scenario: network in per-unit, profiles loaded.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub network: NetworkModel,
    pub v_min: f64,
    pub v_max: f64,
    pub alpha: f64,
    pub gossip_tick_ms: u64,
    pub latency_ms: u64,
    pub drop_probability: f64,
    pub lambda_update_period_ms: u64,
    pub t_start_s: u64,
    pub t_end_s: u64,
    pub seed: u64,
    pub control_enabled: bool,
    pub topology: TopologySpec,
    pub ders: Vec<DerConfig>,
    pub loads: Vec<LoadConfig>,
}

impl Scenario {
    pub fn duration_s(&self) -> u64 {
        self.t_end_s - self.t_start_s
    }

    /// Monitored nodes: every node except the slack, in dense id order.
    pub fn monitored_nodes(&self) -> Vec<NodeId> {
        (0..self.network.node_count())
            .filter(|&n| n != self.network.slack)
            .collect()
    }
}

fn read_to_string(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn resolve_profile(
    source: &ProfileSource,
    base_dir: &Path,
    seed: u64,
) -> Result<Profile, ScenarioError> {
    Ok(match source {
        ProfileSource::Csv {
            csv,
            interpolation,
            unit,
        } => {
            let text = read_to_string(&base_dir.join(csv))?;
            Profile::from_csv(&text, *interpolation, *unit)?
        }
        ProfileSource::Inline {
            samples,
            interpolation,
            unit,
        } => Profile::new(samples.clone(), *interpolation, *unit)?,
        ProfileSource::Synthetic { synthetic } => synthetic.generate(seed)?,
    })
}

/// Mixes the scenario seed with a role tag and node index so every synthetic
/// profile gets an independent, reproducible stream.
fn profile_seed(scenario_seed: u64, role: u64, index: u64) -> u64 {
    let mut h = scenario_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(role.wrapping_mul(0x8525_7d1a_41f3_2b01))
        .wrapping_add(index);
    h ^= h >> 31;
    h
}

/// Loads a scenario file; relative paths inside resolve against the file's
/// directory. A seed override replaces the embedded seed before any derived
/// stream is created.
pub fn load_scenario(path: &Path, seed_override: Option<u64>) -> Result<Scenario, ScenarioError> {
    let text = read_to_string(path)?;
    let spec: ScenarioSpec = serde_json::from_str(&text)?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    resolve_scenario(&spec, base_dir, seed_override)
}

pub fn resolve_scenario(
    spec: &ScenarioSpec,
    base_dir: &Path,
    seed_override: Option<u64>,
) -> Result<Scenario, ScenarioError> {
    let seed = seed_override.unwrap_or(spec.seed);
    let network_text = match &spec.network {
        NetworkSource::Path { path } => read_to_string(&base_dir.join(path))?,
        NetworkSource::Inline(v) => v.to_string(),
    };
    let network = grid_model::to_per_unit(&grid_model::load_network(&network_text)?)?;

    if spec.v_min >= spec.v_max {
        return Err(ScenarioError::InvalidScenario(format!(
            "v_min {} must be below v_max {}",
            spec.v_min, spec.v_max
        )));
    }
    if spec.gossip_tick_ms == 0 || spec.lambda_update_period_ms == 0 {
        return Err(ScenarioError::InvalidScenario(
            "gossip tick and lambda update period must be positive".into(),
        ));
    }
    if spec.t_end_s <= spec.t_start_s {
        return Err(ScenarioError::InvalidScenario(
            "t_end_s must be after t_start_s".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.drop_probability) {
        return Err(ScenarioError::InvalidScenario(
            "drop_probability must be in [0, 1]".into(),
        ));
    }
    if spec.alpha <= 0.0 {
        return Err(ScenarioError::InvalidScenario(
            "alpha must be positive".into(),
        ));
    }

    let s_base = network.s_base;
    let mut ders = Vec::with_capacity(spec.ders.len());
    for (i, d) in spec.ders.iter().enumerate() {
        let node = network.node_by_name(&d.node)?;
        if d.delta_p_min_pu > d.delta_p_max_pu || d.delta_q_min_pu > d.delta_q_max_pu {
            return Err(ScenarioError::InvalidScenario(format!(
                "DER at {}: delta bounds are inverted",
                d.node
            )));
        }
        if d.s_rated_va <= 0.0 || d.c_p <= 0.0 || d.c_q <= 0.0 {
            return Err(ScenarioError::InvalidScenario(format!(
                "DER at {}: rating and cost weights must be positive",
                d.node
            )));
        }
        ders.push(DerConfig {
            node,
            der_id: network.nodes[node]
                .attached_der
                .clone()
                .unwrap_or_else(|| format!("der_{}", d.node)),
            s_rated: d.s_rated_va / s_base,
            c_p: d.c_p,
            c_q: d.c_q,
            delta_p_min: d.delta_p_min_pu,
            delta_p_max: d.delta_p_max_pu,
            delta_q_min: d.delta_q_min_pu,
            delta_q_max: d.delta_q_max_pu,
            profile: resolve_profile(&d.profile, base_dir, profile_seed(seed, 1, i as u64))?,
        });
    }

    let mut loads = Vec::with_capacity(spec.loads.len());
    for (i, l) in spec.loads.iter().enumerate() {
        let node = network.node_by_name(&l.node)?;
        if !(0.0 < l.power_factor && l.power_factor <= 1.0) {
            return Err(ScenarioError::InvalidScenario(format!(
                "load at {}: power factor must be in (0, 1]",
                l.node
            )));
        }
        let tan_phi = (1.0 / (l.power_factor * l.power_factor) - 1.0).sqrt();
        loads.push(LoadConfig {
            node,
            power_factor: l.power_factor,
            tan_phi,
            profile: resolve_profile(&l.profile, base_dir, profile_seed(seed, 2, i as u64))?,
        });
    }

    Ok(Scenario {
        name: spec.name.clone(),
        network,
        v_min: spec.v_min,
        v_max: spec.v_max,
        alpha: spec.alpha,
        gossip_tick_ms: spec.gossip_tick_ms,
        latency_ms: spec.latency_ms,
        drop_probability: spec.drop_probability,
        lambda_update_period_ms: spec.lambda_update_period_ms,
        t_start_s: spec.t_start_s,
        t_end_s: spec.t_end_s,
        seed,
        control_enabled: spec.control_enabled,
        topology: spec.topology.clone(),
        ders,
        loads,
    })
}
