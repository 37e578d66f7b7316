//! Gain conditions and ultimate-boundedness radii for the online learner.

use serde::Serialize;

use super::{lambda_min, CostSpec, LearnerGains};
use crate::dynamics::Network;
use crate::error::{Error, Result};

/// Empirical constants estimated from a run for one agent.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunStats {
    /// `sigma_M`, the largest observed `||sigma_i||`.
    pub sigma_max: Option<f64>,
    /// `q_i`, the smallest eigenvalue of the sample-mean `sigma sigma^T`.
    pub excitation_level: Option<f64>,
    /// `eps_bar_i`, the 99th percentile of `|residual|`.
    pub residual_bound: Option<f64>,
    /// Largest observed `sum_{j in {N_i, i}} ||(l_ij + b_ij) f_ej||^2`.
    pub drift_energy: Option<f64>,
}

fn need(value: Option<f64>, name: &str) -> Result<f64> {
    value.ok_or_else(|| Error::MissingStatistics(name.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainReport {
    pub a: f64,
    /// `0 < a_i < 2`.
    pub a_in_interval: bool,
    /// `2 q_i / sigma_M^2`, the sharper adaptation-gain ceiling.
    pub a_ceiling: f64,
    pub a_below_ceiling: bool,
    pub gamma: f64,
    /// Lower bound that `Gamma_i` must strictly exceed.
    pub gamma_required: f64,
    pub gamma_ok: bool,
    pub passed: bool,
}

/// Coupling-scaled input bounds `|l_ij + b_ij| beta_j` with `lambda_min(R_ij)`,
/// for `j` in `{N_i, i}`.
fn input_terms(spec: &CostSpec, net: &Network, i: usize) -> Vec<(f64, f64)> {
    let g = &net.graph;
    let mut out = vec![(
        g.self_coupling(i) * net.agents[i].g_norm_bound(),
        lambda_min(spec.r_self()),
    )];
    for (&j, r) in spec.r_neighbors() {
        out.push((g.weight(i, j) * net.agents[j].g_norm_bound(), lambda_min(r)));
    }
    out
}

pub fn gain_check(gains: &LearnerGains, spec: &CostSpec, net: &Network, i: usize, stats: &RunStats) -> Result<GainReport> {
    let sigma_max = need(stats.sigma_max, "sigma_M")?;
    let q = need(stats.excitation_level, "q_i")?;
    let neighbor_count = net.graph.neighbors(i).len() as f64;
    let state_term = (neighbor_count + 1.0) / lambda_min(spec.q());
    let gamma_required = input_terms(spec, net, i)
        .into_iter()
        .map(|(b, lr)| b * b / (2.0 * lr))
        .fold(state_term, f64::max);
    let a_ceiling = if sigma_max > 0.0 {
        2.0 * q / (sigma_max * sigma_max)
    } else {
        f64::INFINITY
    };
    let a_in_interval = gains.a > 0.0 && gains.a < 2.0;
    let gamma_ok = gains.gamma > gamma_required;
    Ok(GainReport {
        a: gains.a,
        a_in_interval,
        a_ceiling,
        a_below_ceiling: gains.a > 0.0 && gains.a < a_ceiling,
        gamma: gains.gamma,
        gamma_required,
        gamma_ok,
        passed: a_in_interval && gamma_ok,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UubBounds {
    /// Radius beyond which the weight estimation error decreases.
    pub weight_error: f64,
    /// Radius beyond which the local consensus error decreases.
    pub consensus_error: f64,
}

/// Evaluates the two square-root ultimate-bound radii. Fails when either
/// denominator is nonpositive.
pub fn uub_bounds(stats: &RunStats, gains: &LearnerGains, spec: &CostSpec, net: &Network, i: usize) -> Result<UubBounds> {
    let drift = need(stats.drift_energy, "drift energy")?;
    let eps = need(stats.residual_bound, "residual bound")?;
    let q = need(stats.excitation_level, "q_i")?;
    let sigma_max = need(stats.sigma_max, "sigma_M")?;
    if !(gains.a > 0.0) {
        return Err(Error::GainConditions("a_i must be positive".into()));
    }
    let numerator = drift + eps * eps / (2.0 * gains.a);
    let den_theta = q - 0.5 * gains.a * sigma_max * sigma_max;
    let neighbor_count = net.graph.neighbors(i).len() as f64;
    let den_e = 2.0 * gains.gamma * lambda_min(spec.q()) - 2.0 * (neighbor_count + 1.0);
    if den_theta <= 0.0 {
        return Err(Error::GainConditions(format!(
            "q_i - a_i sigma_M^2 / 2 = {den_theta:.4e} <= 0"
        )));
    }
    if den_e <= 0.0 {
        return Err(Error::GainConditions(format!(
            "2 Gamma_i lambda_min(Q_ii) - 2 (N_i + 1) = {den_e:.4e} <= 0"
        )));
    }
    Ok(UubBounds {
        weight_error: (numerator / den_theta).sqrt(),
        consensus_error: (numerator / den_e).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::ProbingSignal;
    use crate::dynamics::{AgentModel, VectorField};
    use crate::graph::DiGraph;
    use nalgebra::DMatrix;
    use std::collections::BTreeMap;

    fn setup() -> (Network, CostSpec) {
        let graph = DiGraph::directed_ring(5, 2, 1.0).unwrap();
        let agents = (1..=5)
            .map(|k| AgentModel::benchmark_node(k, [1.1, 1.6, 0.3, 0.4, 1.0][k - 1]).unwrap())
            .collect();
        let net = Network::new(graph, agents, VectorField::Oscillator).unwrap();
        let mut rn = BTreeMap::new();
        rn.insert(1, DMatrix::from_element(1, 1, 0.1));
        let spec = CostSpec::new(DMatrix::identity(2, 2), DMatrix::from_element(1, 1, 8.5), rn).unwrap();
        (net, spec)
    }

    fn gains(a: f64, gamma: f64) -> LearnerGains {
        LearnerGains {
            a,
            gamma,
            probing: ProbingSignal::off(),
        }
    }

    fn stats() -> RunStats {
        RunStats {
            sigma_max: Some(1.0),
            excitation_level: Some(0.2),
            residual_bound: Some(0.05),
            drift_energy: Some(0.01),
        }
    }

    #[test]
    fn adaptation_gain_interval() {
        let (net, spec) = setup();
        assert!(gain_check(&gains(0.1, 50.0), &spec, &net, 2, &stats()).unwrap().a_in_interval);
        assert!(!gain_check(&gains(2.5, 50.0), &spec, &net, 2, &stats()).unwrap().a_in_interval);
    }

    #[test]
    fn gamma_requirement() {
        let (net, spec) = setup();
        let report = gain_check(&gains(0.1, 0.0), &spec, &net, 2, &stats()).unwrap();
        assert!(!report.gamma_ok && !report.passed);
        // agent 3: neighbour 2 contributes (1 * 1.6)^2 / (2 * 0.1) = 12.8
        assert!((report.gamma_required - 12.8).abs() < 1e-12);
        assert!(gain_check(&gains(0.1, 13.0), &spec, &net, 2, &stats()).unwrap().passed);
    }

    #[test]
    fn missing_statistics() {
        let (net, spec) = setup();
        assert!(matches!(
            gain_check(&gains(0.1, 20.0), &spec, &net, 2, &RunStats::default()),
            Err(Error::MissingStatistics(_))
        ));
    }

    #[test]
    fn bounds_are_zero_without_drift_or_residual() {
        let (net, spec) = setup();
        let s = RunStats {
            residual_bound: Some(0.0),
            drift_energy: Some(0.0),
            ..stats()
        };
        let b = uub_bounds(&s, &gains(0.1, 20.0), &spec, &net, 2).unwrap();
        assert_eq!(b.weight_error, 0.0);
        assert_eq!(b.consensus_error, 0.0);
    }

    #[test]
    fn bounds_grow_with_residual() {
        let (net, spec) = setup();
        let mut last = UubBounds {
            weight_error: -1.0,
            consensus_error: -1.0,
        };
        for eps in [0.0, 0.01, 0.1, 1.0] {
            let s = RunStats {
                residual_bound: Some(eps),
                ..stats()
            };
            let b = uub_bounds(&s, &gains(0.1, 20.0), &spec, &net, 2).unwrap();
            assert!(b.weight_error > last.weight_error);
            assert!(b.consensus_error > last.consensus_error);
            last = b;
        }
    }

    #[test]
    fn nonpositive_denominator_is_reported() {
        let (net, spec) = setup();
        assert!(matches!(
            uub_bounds(&stats(), &gains(0.1, 1.0), &spec, &net, 2),
            Err(Error::GainConditions(_))
        ));
        assert!(matches!(
            uub_bounds(&stats(), &gains(1.0, 20.0), &spec, &net, 2),
            Err(Error::GainConditions(_))
        ));
    }
}
