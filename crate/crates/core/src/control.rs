//! Agent-side control laws and the centralized reference solver.
//!
//! Two agent types cooperate: compensators at DER nodes compute (dP, dQ)
//! from the multiplier vector by the closed-form minimizer of the relaxed
//! per-DER quadratic, clamped to their boxes; Lagrangian agents at monitored
//! nodes run projected dual ascent on their local voltage measurement.
//! `centralized_solve` iterates the same two maps synchronously on the
//! linearized network model until the multipliers are stationary, and serves
//! as the correctness oracle for the distributed loop.

use crate::gossip::LambdaVector;
use crate::grid_model::NodeId;
use crate::sensitivity::SensitivityMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("momentary active power {p_now} exceeds inverter rating {s_rated}")]
    RatingExceeded { s_rated: f64, p_now: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompensatorState {
    pub der_id: String,
    pub node: NodeId,
    pub c_p: f64,
    pub c_q: f64,
    /// Setpoints before compensation (P_0 is the momentary PV output).
    pub p_setpoint_0: f64,
    pub q_setpoint_0: f64,
    pub delta_p_min: f64,
    pub delta_p_max: f64,
    pub delta_q_min: f64,
    pub delta_q_max: f64,
    pub s_rated: f64,
    pub delta_p: f64,
    pub delta_q: f64,
    /// Voltage sensitivity of every monitored node to this DER, indexed by
    /// node id (r_nd / V_nom and x_nd / V_nom).
    pub sens_p: Vec<f64>,
    pub sens_q: Vec<f64>,
}

impl CompensatorState {
    /// Unclamped minimizer of the relaxed per-DER objective: a weighted sum
    /// of the multiplier imbalance over all monitored nodes. Entries missing
    /// from the vector count as zero.
    pub fn raw_deltas(&self, lambdas: &LambdaVector) -> (f64, f64) {
        let mut sum_p = 0.0;
        let mut sum_q = 0.0;
        for e in lambdas.entries() {
            if let Some(&sp) = self.sens_p.get(e.node_id) {
                let w = e.lambda_min - e.lambda_max;
                sum_p += w * sp;
                sum_q += w * self.sens_q[e.node_id];
            }
        }
        (sum_p / (2.0 * self.c_p), sum_q / (2.0 * self.c_q))
    }

    /// Box for dQ at the current operating point: the static limits
    /// intersected with the rating circle left over by the applied P.
    pub fn dynamic_q_box(&self, p_applied: f64) -> Result<(f64, f64), ControlError> {
        let q_avail = reactive_capability(self.s_rated, p_applied)?;
        let lo = self.delta_q_min.max(-q_avail - self.q_setpoint_0);
        let hi = self.delta_q_max.min(q_avail - self.q_setpoint_0);
        Ok((lo, hi.max(lo)))
    }
}

/// Clamps a value into [lo, hi]; the exact minimizer of a separable convex
/// quadratic over a box is the clamped unconstrained minimizer.
pub fn project_box(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

/// Computes the DER's new (dP, dQ) from the latest multiplier view and
/// stores them in the state. dP is clamped to its box first; the remaining
/// inverter capability then bounds dQ.
pub fn compensator_update(
    state: &mut CompensatorState,
    lambdas: &LambdaVector,
) -> Result<(f64, f64), ControlError> {
    let (raw_p, raw_q) = state.raw_deltas(lambdas);
    let dp = project_box(raw_p, state.delta_p_min, state.delta_p_max);
    let (q_lo, q_hi) = state.dynamic_q_box(state.p_setpoint_0 + dp)?;
    let dq = project_box(raw_q, q_lo, q_hi);
    state.delta_p = dp;
    state.delta_q = dq;
    Ok((dp, dq))
}

/// Injection actually applied to the grid.
pub fn apply_compensation(state: &CompensatorState) -> (f64, f64) {
    (
        state.p_setpoint_0 + state.delta_p,
        state.q_setpoint_0 + state.delta_q,
    )
}

/// Reactive headroom of an inverter rated s given momentary active power p.
pub fn reactive_capability(s_rated: f64, p_now: f64) -> Result<f64, ControlError> {
    if p_now.abs() > s_rated {
        return Err(ControlError::RatingExceeded { s_rated, p_now });
    }
    Ok((s_rated * s_rated - p_now * p_now).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LagrangianState {
    pub node_id: NodeId,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub alpha: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Monotone counter bumped on every local update; versions gossiped
    /// views carry come from here.
    pub version: u64,
}

impl LagrangianState {
    pub fn new(node_id: NodeId, alpha: f64, v_min: f64, v_max: f64) -> Self {
        Self {
            node_id,
            lambda_max: 0.0,
            lambda_min: 0.0,
            alpha,
            v_min,
            v_max,
            version: 0,
        }
    }
}

/// Projected dual ascent step on the locally measured voltage. Multipliers
/// stay nonnegative; the version counter increases.
pub fn lagrangian_update(state: &mut LagrangianState, v_measured: f64) {
    state.lambda_max = (state.lambda_max + state.alpha * (v_measured - state.v_max)).max(0.0);
    state.lambda_min = (state.lambda_min + state.alpha * (state.v_min - v_measured)).max(0.0);
    state.version += 1;
}

/// Everything the centralized reference solver needs: the pre-control
/// voltage profile, the linearized model and the compensator parameter set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub v0: Vec<f64>,
    pub sensitivity: SensitivityMatrix,
    pub compensators: Vec<CompensatorState>,
    pub v_min: f64,
    pub v_max: f64,
    pub alpha: f64,
    /// Nodes whose voltage constraints are enforced (slack excluded).
    pub monitored: Vec<NodeId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CentralizedSolution {
    pub delta_p: Vec<f64>,
    pub delta_q: Vec<f64>,
    pub lambda_max: Vec<f64>,
    pub lambda_min: Vec<f64>,
    /// Linearized node voltages at the fixed point.
    pub voltages: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

pub const CENTRAL_TOLERANCE: f64 = 1e-8;
pub const CENTRAL_MAX_ITER: usize = 100_000;

/// Synchronous dual ascent on the linearized model, iterated until the
/// multiplier update is stationary. Returns the best iterate with a
/// convergence flag when the step size is unstable or the violation cannot
/// be corrected inside the boxes.
pub fn centralized_solve(snapshot: &Snapshot) -> CentralizedSolution {
    centralized_solve_traced(snapshot, |_| {})
}

/// Same as `centralized_solve` but reports the per-iteration dual residual,
/// used by the step-size calibration.
pub fn centralized_solve_traced(
    snapshot: &Snapshot,
    mut on_residual: impl FnMut(f64),
) -> CentralizedSolution {
    let n = snapshot.v0.len();
    let mut comps = snapshot.compensators.clone();
    let mut lambda = LambdaVector::zeros(&snapshot.monitored);
    let mut voltages = snapshot.v0.clone();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for it in 1..=CENTRAL_MAX_ITER {
        iterations = it;
        // Primal step: every compensator reacts to the current multipliers.
        for c in comps.iter_mut() {
            // Boxes are data in the snapshot; a rating violation cannot occur
            // because |p_setpoint_0 + dp| stays inside the rating by
            // construction of the scenario boxes.
            let _ = compensator_update(c, &lambda);
        }
        // Linearized voltages.
        for node in 0..n {
            let mut v = snapshot.v0[node];
            for c in comps.iter() {
                v += c.sens_p[node] * c.delta_p + c.sens_q[node] * c.delta_q;
            }
            voltages[node] = v;
        }
        // Dual step.
        residual = 0.0;
        for entry in lambda.entries_mut() {
            let v = voltages[entry.node_id];
            let new_max = (entry.lambda_max + snapshot.alpha * (v - snapshot.v_max)).max(0.0);
            let new_min = (entry.lambda_min + snapshot.alpha * (snapshot.v_min - v)).max(0.0);
            residual = residual
                .max((new_max - entry.lambda_max).abs())
                .max((new_min - entry.lambda_min).abs());
            entry.lambda_max = new_max;
            entry.lambda_min = new_min;
            entry.version += 1;
        }
        on_residual(residual);
        if residual <= CENTRAL_TOLERANCE {
            converged = true;
            break;
        }
        if !residual.is_finite() {
            break;
        }
    }

    let mut out = CentralizedSolution {
        delta_p: Vec::with_capacity(comps.len()),
        delta_q: Vec::with_capacity(comps.len()),
        lambda_max: vec![0.0; n],
        lambda_min: vec![0.0; n],
        voltages,
        iterations,
        converged,
        residual,
    };
    for c in &comps {
        out.delta_p.push(c.delta_p);
        out.delta_q.push(c.delta_q);
    }
    for e in lambda.entries() {
        out.lambda_max[e.node_id] = e.lambda_max;
        out.lambda_min[e.node_id] = e.lambda_min;
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlphaCalibration {
    /// Largest step size for which the synchronous dual ascent converges.
    pub largest_stable: f64,
    /// 0.8 of the stable limit; the value scenarios should record. The 20%
    /// margin absorbs the staleness the gossiped multipliers carry, while a
    /// smaller step would leave transient multipliers decaying too slowly
    /// for the one-second update cadence.
    pub recommended: f64,
}

/// Bisects the largest step size for which `centralized_solve` reaches its
/// tolerance within the iteration cap on the given snapshot. The dual ascent
/// map is linear between projection changes, so convergence as a function of
/// the step size has a single threshold and bisection is well defined.
pub fn calibrate_alpha(snapshot: &Snapshot) -> AlphaCalibration {
    let converges = |alpha: f64| -> bool {
        let mut snap = snapshot.clone();
        snap.alpha = alpha;
        centralized_solve(&snap).converged
    };

    let mut lo = 0.0;
    let mut hi = 1.0;
    while converges(hi) && hi < 1e9 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if converges(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    AlphaCalibration {
        largest_stable: lo,
        recommended: 0.8 * lo,
    }
}
