//! Local costs, approximate Hamiltonians, the critic-based control law, the
//! online weight-update law, and probing signals.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{AgentModel, Network};
use crate::error::{Error, Result};
use crate::gfhm::GfhmCritic;
use crate::graph::DiGraph;

pub mod diagnostics;
pub mod lsq;
pub mod policy_iteration;

pub use diagnostics::{gain_check, uub_bounds, GainReport, RunStats, UubBounds};
pub use lsq::{policy_evaluation_lsq, LsqFit};
pub use policy_iteration::{run_policy_iteration, run_policy_iteration_from, PiIteration, PiOutcome};

const SYMMETRY_TOL: f64 = 1e-12;

fn check_spd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::invalid(name, "matrix must be square"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(name, "matrix has non-finite entries"));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > SYMMETRY_TOL * scale {
        return Err(Error::invalid(name, "matrix must be symmetric"));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::invalid(name, "matrix must be positive definite"));
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

/// Weights of the local cost `r_i = e^T Q e + u_i^T R_ii u_i + sum_j u_j^T R_ij u_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    q: DMatrix<f64>,
    r_self: DMatrix<f64>,
    r_self_inv: DMatrix<f64>,
    r_neighbors: BTreeMap<usize, DMatrix<f64>>,
}

impl CostSpec {
    pub fn new(q: DMatrix<f64>, r_self: DMatrix<f64>, r_neighbors: BTreeMap<usize, DMatrix<f64>>) -> Result<Self> {
        check_spd("Q_ii", &q)?;
        check_spd("R_ii", &r_self)?;
        for (j, r) in &r_neighbors {
            check_spd(&format!("R_i{}", j + 1), r)?;
        }
        let r_self_inv = r_self
            .clone()
            .cholesky()
            .expect("checked positive definite")
            .inverse();
        Ok(Self {
            q,
            r_self,
            r_self_inv,
            r_neighbors,
        })
    }

    /// Checks that `R_ij` is present exactly for the in-neighbours of agent `i`
    /// and that every block has the right size.
    pub fn validate_for(&self, i: usize, graph: &DiGraph, agents: &[AgentModel]) -> Result<()> {
        let who = format!("cost of agent {}", i + 1);
        let n = agents[i].state_dim();
        if self.q.nrows() != n {
            return Err(Error::dims(format!("{who}: Q_ii"), n, self.q.nrows()));
        }
        if self.r_self.nrows() != agents[i].input_dim() {
            return Err(Error::dims(format!("{who}: R_ii"), agents[i].input_dim(), self.r_self.nrows()));
        }
        let neighbors = graph.neighbors(i);
        let keys: Vec<usize> = self.r_neighbors.keys().copied().collect();
        if keys != neighbors {
            return Err(Error::invalid(
                who,
                format!(
                    "R_ij must be given exactly for neighbours {:?}, got {:?}",
                    neighbors.iter().map(|j| j + 1).collect::<Vec<_>>(),
                    keys.iter().map(|j| j + 1).collect::<Vec<_>>()
                ),
            ));
        }
        for (&j, r) in &self.r_neighbors {
            if r.nrows() != agents[j].input_dim() {
                return Err(Error::dims(format!("{who}: R_i{}", j + 1), agents[j].input_dim(), r.nrows()));
            }
        }
        Ok(())
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r_self(&self) -> &DMatrix<f64> {
        &self.r_self
    }

    pub fn r_self_inv(&self) -> &DMatrix<f64> {
        &self.r_self_inv
    }

    pub fn r_neighbors(&self) -> &BTreeMap<usize, DMatrix<f64>> {
        &self.r_neighbors
    }

    /// `e^T Q e + u_i^T R_ii u_i + sum_{j in N_i} u_j^T R_ij u_j`.
    pub fn cost_rate(&self, e: &DVector<f64>, u_self: &DVector<f64>, controls: &[Option<DVector<f64>>]) -> Result<f64> {
        let mut r = (e.transpose() * &self.q * e)[(0, 0)] + (u_self.transpose() * &self.r_self * u_self)[(0, 0)];
        for (&j, rij) in &self.r_neighbors {
            let u = controls
                .get(j)
                .and_then(Option::as_ref)
                .ok_or(Error::MissingControl { agent: j })?;
            r += (u.transpose() * rij * u)[(0, 0)];
        }
        Ok(r)
    }
}

/// `sigma_i = Lambda_i(e_bar_i)^T e_i'`.
pub fn sigma_vector(
    critic: &GfhmCritic,
    net: &Network,
    i: usize,
    states: &[DVector<f64>],
    leader_state: &DVector<f64>,
    controls: &[Option<DVector<f64>>],
) -> Result<DVector<f64>> {
    let e = net.consensus_error(i, states, leader_state)?;
    let rate = net.error_rate(i, states, leader_state, controls)?;
    Ok(critic.gradient_matrix(&e).transpose() * rate)
}

/// Approximate Hamiltonian `r_i + theta^T sigma_i`.
pub fn hamiltonian_residual(
    critic: &GfhmCritic,
    spec: &CostSpec,
    net: &Network,
    i: usize,
    states: &[DVector<f64>],
    leader_state: &DVector<f64>,
    controls: &[Option<DVector<f64>>],
) -> Result<f64> {
    let e = net.consensus_error(i, states, leader_state)?;
    let u_self = controls[i].as_ref().ok_or(Error::MissingControl { agent: i })?;
    let r = spec.cost_rate(&e, u_self, controls)?;
    let sigma = sigma_vector(critic, net, i, states, leader_state, controls)?;
    Ok(r + critic.weights().dot(&sigma))
}

/// `theta' = -a sigma (sigma^T theta + r)`.
pub fn weight_update_rate(a: f64, theta: &DVector<f64>, sigma: &DVector<f64>, r: f64) -> DVector<f64> {
    sigma * (-a * (sigma.dot(theta) + r))
}

/// `u_i = -1/2 R_ii^{-1} g_i(x_i)^T (l_ii + b_ii) Lambda_i(e_bar_i) theta_i`.
pub fn control_law(
    critic: &GfhmCritic,
    agent: &AgentModel,
    graph: &DiGraph,
    i: usize,
    x_i: &DVector<f64>,
    e_i: &DVector<f64>,
    spec: &CostSpec,
) -> DVector<f64> {
    control_law_with(critic.weights(), critic, agent, graph.self_coupling(i), x_i, e_i, spec)
}

pub(crate) fn control_law_with(
    weights: &DVector<f64>,
    critic: &GfhmCritic,
    agent: &AgentModel,
    self_coupling: f64,
    x_i: &DVector<f64>,
    e_i: &DVector<f64>,
    spec: &CostSpec,
) -> DVector<f64> {
    let grad = critic.gradient_matrix(e_i) * weights;
    spec.r_self_inv() * agent.input_matrix(x_i).transpose() * grad * (-0.5 * self_coupling)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbingTerm {
    /// Input channel the sinusoid is added to (zero-based).
    pub channel: usize,
    pub amplitude: f64,
    /// Angular frequency in rad/s.
    pub frequency: f64,
    pub phase: f64,
}

/// Sum-of-sinusoids exploration signal, switched off at `cutoff` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbingSignal {
    pub cutoff: f64,
    pub terms: Vec<ProbingTerm>,
}

impl ProbingSignal {
    pub fn off() -> Self {
        Self {
            cutoff: 0.0,
            terms: Vec::new(),
        }
    }

    pub fn is_active(&self) -> bool {
        self.cutoff > 0.0 && self.terms.iter().any(|t| t.amplitude != 0.0)
    }

    pub fn eval(&self, t: f64, input_dim: usize) -> DVector<f64> {
        let mut out = DVector::zeros(input_dim);
        if t >= self.cutoff {
            return out;
        }
        for term in &self.terms {
            out[term.channel] += term.amplitude * (term.frequency * t + term.phase).sin();
        }
        out
    }

    /// Channel bounds, and for active signals at least `ceil(n/2)` distinct
    /// nonzero frequencies.
    pub fn validate(&self, state_dim: usize, input_dim: usize) -> Result<()> {
        if !(self.cutoff.is_finite() && self.cutoff >= 0.0) {
            return Err(Error::invalid("probing signal", "cutoff must be a nonnegative time"));
        }
        for term in &self.terms {
            if term.channel >= input_dim {
                return Err(Error::invalid(
                    "probing signal",
                    format!("channel {} but the agent has {input_dim} inputs", term.channel + 1),
                ));
            }
            if ![term.amplitude, term.frequency, term.phase].iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("probing signal", "non-finite term"));
            }
        }
        if !self.is_active() {
            return Ok(());
        }
        let mut freqs: Vec<f64> = Vec::new();
        for term in self.terms.iter().filter(|t| t.amplitude != 0.0) {
            if term.frequency == 0.0 {
                return Err(Error::invalid("probing signal", "frequencies must be nonzero"));
            }
            if freqs.contains(&term.frequency.abs()) {
                return Err(Error::invalid("probing signal", "frequencies must be distinct"));
            }
            freqs.push(term.frequency.abs());
        }
        let needed = state_dim.div_ceil(2);
        if freqs.len() < needed {
            return Err(Error::invalid(
                "probing signal",
                format!("need at least {needed} distinct frequencies, got {}", freqs.len()),
            ));
        }
        Ok(())
    }
}

/// Per-agent learning parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerGains {
    /// Adaptation gain `a_i`.
    pub a: f64,
    /// Lyapunov weighting `Gamma_i`; only used by the gain diagnostics.
    pub gamma: f64,
    pub probing: ProbingSignal,
}

impl LearnerGains {
    pub fn validate(&self, state_dim: usize, input_dim: usize) -> Result<()> {
        if !(self.a.is_finite() && self.a >= 0.0) {
            return Err(Error::invalid("learner gains", "a must be finite and nonnegative"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::invalid("learner gains", "gamma must be finite and nonnegative"));
        }
        self.probing.validate(state_dim, input_dim)
    }
}
