//! Offline policy iteration: simulate under frozen weights, fit every
//! agent's critic by least squares, improve all policies at once, repeat.
//!
//! Probing only diversifies the visited states. The evaluation samples are
//! recomputed at those states under the current policies themselves.

use nalgebra::DVector;
use serde::Serialize;

use super::lsq::policy_evaluation_lsq;
use crate::error::{Error, Result};
use crate::simulator::{on_policy_sample, simulate, CriticPolicy, RunOptions, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiIteration {
    /// 1-based iteration number.
    pub index: usize,
    /// Fitted weights per agent.
    pub weights: Vec<Vec<f64>>,
    /// `max_i ||theta_i^k - theta_i^{k-1}||_inf`.
    pub change: f64,
    pub gram_conditions: Vec<f64>,
    /// `V_i^k` at each probe point, per agent.
    pub probe_values: Vec<Vec<f64>>,
    /// Integrated cost of each agent under the policy that generated the data.
    pub policy_costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiOutcome {
    pub initial_weights: Vec<Vec<f64>>,
    pub iterations: Vec<PiIteration>,
    pub converged: bool,
    /// Largest increase of a value estimate between consecutive iterations,
    /// relative to the largest magnitude seen for that agent over the probe set.
    pub worst_value_increase: f64,
    /// `worst_value_increase` within the configured band.
    pub monotone: bool,
}

impl PiOutcome {
    pub fn final_weights(&self) -> Vec<DVector<f64>> {
        let last = self
            .iterations
            .last()
            .map(|it| &it.weights)
            .unwrap_or(&self.initial_weights);
        last.iter().map(|w| DVector::from_column_slice(w)).collect()
    }
}

/// Runs policy iteration from the scenario's initial weights.
pub fn run_policy_iteration(scenario: &Scenario) -> Result<PiOutcome> {
    run_policy_iteration_from(scenario, scenario.initial_weights())
}

pub fn run_policy_iteration_from(scenario: &Scenario, initial: Vec<DVector<f64>>) -> Result<PiOutcome> {
    scenario.validate()?;
    let settings = &scenario.analysis;
    let probes = scenario.probe_points();
    let n_agents = scenario.n_agents();
    let policy = CriticPolicy(scenario);
    let mut weights = initial.clone();
    let mut iterations: Vec<PiIteration> = Vec::new();
    let mut converged = false;

    for index in 1..=settings.pi_max_iterations {
        let options = RunOptions {
            adapt_weights: false,
            probing: true,
            offsets: Vec::new(),
            weights: Some(weights.clone()),
            parallel: false,
        };
        let log = simulate(scenario, &policy, &options).map_err(|e| match e {
            Error::BlowUp { t, detail } => Error::InadmissiblePolicy {
                iteration: index,
                detail: format!("closed loop left the guard at t = {t:.3}: {detail}"),
            },
            other => other,
        })?;

        let mut next = Vec::with_capacity(n_agents);
        let mut gram_conditions = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let samples = log
                .samples
                .iter()
                .step_by(settings.pi_sample_stride)
                .map(|s| on_policy_sample(scenario, &policy, s, i))
                .collect::<Result<Vec<_>>>()?;
            let fit = policy_evaluation_lsq(&samples).map_err(|e| match e {
                Error::InsufficientExcitation(msg) => {
                    Error::InsufficientExcitation(format!("agent {}, iteration {index}: {msg}", i + 1))
                }
                other => other,
            })?;
            gram_conditions.push(fit.gram_condition);
            next.push(fit.weights);
        }

        let change = weights
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        let probe_values = (0..n_agents)
            .map(|i| {
                probes
                    .iter()
                    .map(|p| scenario.critics[i].value_with(&next[i], p))
                    .collect()
            })
            .collect();
        let last = log.last();
        iterations.push(PiIteration {
            index,
            weights: next.iter().map(|w| w.iter().copied().collect()).collect(),
            change,
            gram_conditions,
            probe_values,
            policy_costs: last.agents.iter().map(|a| a.cost).collect(),
        });
        weights = next;
        if change < settings.pi_tolerance {
            converged = true;
            break;
        }
    }

    let worst_value_increase = worst_increase(&iterations, n_agents);
    Ok(PiOutcome {
        initial_weights: initial.iter().map(|w| w.iter().copied().collect()).collect(),
        monotone: worst_value_increase <= settings.pi_monotonicity_band,
        iterations,
        converged,
        worst_value_increase,
    })
}

fn worst_increase(iterations: &[PiIteration], n_agents: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n_agents {
        let scale = iterations
            .iter()
            .flat_map(|it| it.probe_values[i].iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            continue;
        }
        for pair in iterations.windows(2) {
            for (prev, cur) in pair[0].probe_values[i].iter().zip(&pair[1].probe_values[i]) {
                worst = worst.max((cur - prev) / scale);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iteration(values: Vec<Vec<f64>>) -> PiIteration {
        PiIteration {
            index: 0,
            weights: vec![],
            change: 0.0,
            gram_conditions: vec![],
            probe_values: values,
            policy_costs: vec![],
        }
    }

    #[test]
    fn worst_increase_is_relative_to_scale() {
        let its = vec![iteration(vec![vec![10.0, 5.0]]), iteration(vec![vec![9.0, 5.05]])];
        assert!((worst_increase(&its, 1) - 0.005).abs() < 1e-12);
        let its = vec![iteration(vec![vec![10.0]]), iteration(vec![vec![8.0]]), iteration(vec![vec![7.0]])];
        assert_eq!(worst_increase(&its, 1), 0.0);
    }
}
