//! Linearized voltage sensitivities and their finite-difference oracle.
//!
//! The constant-coefficient model approximates the partial derivative of a
//! node voltage magnitude with respect to DER active (reactive) power by the
//! common-path resistance (reactance) over the nominal voltage. It is built
//! once per scenario from topology alone; `finite_difference_sensitivity`
//! measures the true derivatives numerically and quantifies the model error.

use crate::grid_model::{GridError, NetworkModel, NodeId};
use crate::powerflow::{solve_bfs, InjectionSet, PowerFlowError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("DER node {0} does not exist")]
    UnknownDer(String),
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// dv_dp[n][d] = r_nd / V_nom, dv_dq[n][d] = x_nd / V_nom.
/// Rows are indexed by node id, columns by position in `der_nodes`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityMatrix {
    pub dv_dp: Vec<Vec<f64>>,
    pub dv_dq: Vec<Vec<f64>>,
    pub der_nodes: Vec<NodeId>,
}

impl SensitivityMatrix {
    pub fn node_count(&self) -> usize {
        self.dv_dp.len()
    }

    pub fn der_count(&self) -> usize {
        self.der_nodes.len()
    }

    /// Column index of a DER node, if it hosts one.
    pub fn der_index(&self, node: NodeId) -> Option<usize> {
        self.der_nodes.iter().position(|&d| d == node)
    }
}

/// Builds the sensitivity matrix from path impedances.
pub fn sensitivity_matrix(
    network: &NetworkModel,
    ders: &[NodeId],
) -> Result<SensitivityMatrix, SensitivityError> {
    for &d in ders {
        if d >= network.node_count() {
            return Err(SensitivityError::UnknownDer(d.to_string()));
        }
    }
    let n = network.node_count();
    let v_nom = network.v_nom_pu;
    let mut dv_dp = vec![vec![0.0; ders.len()]; n];
    let mut dv_dq = vec![vec![0.0; ders.len()]; n];
    for node in 0..n {
        if node == network.slack {
            continue; // slack voltage is fixed
        }
        for (j, &d) in ders.iter().enumerate() {
            let (r, x) = network.path_impedance(node, d)?;
            dv_dp[node][j] = r / v_nom;
            dv_dq[node][j] = x / v_nom;
        }
    }
    Ok(SensitivityMatrix {
        dv_dp,
        dv_dq,
        der_nodes: ders.to_vec(),
    })
}

/// Central-difference measurement of d|V_n|/dP_d and d|V_n|/dQ_d around an
/// operating point, one column per call.
pub fn finite_difference_sensitivity(
    network: &NetworkModel,
    operating_point: &InjectionSet,
    der: NodeId,
    epsilon: f64,
) -> Result<(Vec<f64>, Vec<f64>), SensitivityError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(SensitivityError::InvalidEpsilon(epsilon));
    }
    if der >= network.node_count() {
        return Err(SensitivityError::UnknownDer(der.to_string()));
    }
    let n = network.node_count();
    let perturbed = |dp: f64, dq: f64| -> Result<Vec<f64>, SensitivityError> {
        let mut inj = operating_point.clone();
        inj.add(der, dp, dq);
        Ok(solve_bfs(network, &inj)?.magnitudes())
    };
    let vp_hi = perturbed(epsilon, 0.0)?;
    let vp_lo = perturbed(-epsilon, 0.0)?;
    let vq_hi = perturbed(0.0, epsilon)?;
    let vq_lo = perturbed(0.0, -epsilon)?;
    let mut col_p = Vec::with_capacity(n);
    let mut col_q = Vec::with_capacity(n);
    for i in 0..n {
        col_p.push((vp_hi[i] - vp_lo[i]) / (2.0 * epsilon));
        col_q.push((vq_hi[i] - vq_lo[i]) / (2.0 * epsilon));
    }
    Ok((col_p, col_q))
}

pub const FD_DEFAULT_EPSILON: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powerflow::two_bus_network;

    #[test]
    fn two_bus_matrix_matches_path_impedance() {
        let net = two_bus_network(0.04, 0.02);
        let s = sensitivity_matrix(&net, &[1]).unwrap();
        assert_eq!(s.dv_dp[1][0], 0.04);
        assert_eq!(s.dv_dq[1][0], 0.02);
    }

    #[test]
    fn slack_row_is_zero() {
        let net = two_bus_network(0.04, 0.02);
        let s = sensitivity_matrix(&net, &[1]).unwrap();
        assert_eq!(s.dv_dp[0][0], 0.0);
        assert_eq!(s.dv_dq[0][0], 0.0);
    }

    #[test]
    fn unknown_der_is_rejected() {
        let net = two_bus_network(0.04, 0.02);
        assert!(matches!(
            sensitivity_matrix(&net, &[7]),
            Err(SensitivityError::UnknownDer(_))
        ));
    }

    #[test]
    fn finite_difference_matches_model_at_flat_point() {
        let net = two_bus_network(0.04, 0.02);
        let flat = InjectionSet::zeros(2);
        let (col_p, col_q) =
            finite_difference_sensitivity(&net, &flat, 1, FD_DEFAULT_EPSILON).unwrap();
        // At zero injection the true derivative is exactly r_nd (x_nd).
        assert!((col_p[1] - 0.04).abs() < 1e-4);
        assert!((col_q[1] - 0.02).abs() < 1e-4);
        assert!(col_p[0].abs() < 1e-12);
    }

    #[test]
    fn zero_epsilon_is_rejected() {
        let net = two_bus_network(0.04, 0.02);
        let flat = InjectionSet::zeros(2);
        assert!(matches!(
            finite_difference_sensitivity(&net, &flat, 1, 0.0),
            Err(SensitivityError::InvalidEpsilon(_))
        ));
    }

    #[test]
    fn heavy_loading_degrades_the_approximation() {
        let net = two_bus_network(0.1, 0.05);
        let light = InjectionSet::zeros(2);
        let mut heavy = InjectionSet::zeros(2);
        heavy.set(1, -0.4, 0.0);
        let (light_p, _) =
            finite_difference_sensitivity(&net, &light, 1, FD_DEFAULT_EPSILON).unwrap();
        let (heavy_p, _) =
            finite_difference_sensitivity(&net, &heavy, 1, FD_DEFAULT_EPSILON).unwrap();
        let err_light = (light_p[1] - 0.1).abs();
        let err_heavy = (heavy_p[1] - 0.1).abs();
        assert!(err_heavy > err_light);
    }

    #[test]
    fn injecting_active_power_never_lowers_linearized_voltage() {
        let net = two_bus_network(0.04, 0.02);
        let s = sensitivity_matrix(&net, &[1]).unwrap();
        for row in &s.dv_dp {
            for &e in row {
                assert!(e >= 0.0);
            }
        }
    }
}
