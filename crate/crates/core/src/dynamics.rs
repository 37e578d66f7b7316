//! Agent and leader vector fields and the local consensus-error dynamics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::DiGraph;

/// Input coefficients of the five benchmark agents.
pub const BENCHMARK_INPUT_GAINS: [f64; 5] = [1.0, 1.5, -0.2, 0.3, -0.9];

/// One term `coeff * prod_k x_k^exponents[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coeff: f64,
    pub exponents: Vec<u32>,
}

impl Monomial {
    pub fn new(coeff: f64, exponents: Vec<u32>) -> Self {
        Self { coeff, exponents }
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        self.exponents
            .iter()
            .zip(x.iter())
            .fold(self.coeff, |acc, (&p, &xk)| acc * xk.powi(p as i32))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VectorField {
    /// `(x2 - x1^2 x2, -(x1 + x2)(1 - x1)^2)`, the benchmark drift.
    Oscillator,
    /// `(0, gain * x2^2)`, the benchmark input column.
    SquaredVelocityInput { gain: f64 },
    /// One polynomial (list of monomials) per state component.
    Polynomial { components: Vec<Vec<Monomial>> },
}

impl VectorField {
    pub fn dim(&self) -> usize {
        match self {
            VectorField::Oscillator | VectorField::SquaredVelocityInput { .. } => 2,
            VectorField::Polynomial { components } => components.len(),
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            VectorField::Oscillator => {
                let (x1, x2) = (x[0], x[1]);
                let s = 1.0 - x1;
                DVector::from_vec(vec![x2 - x1 * x1 * x2, -(x1 + x2) * s * s])
            }
            VectorField::SquaredVelocityInput { gain } => {
                DVector::from_vec(vec![0.0, gain * x[1] * x[1]])
            }
            VectorField::Polynomial { components } => DVector::from_iterator(
                components.len(),
                components
                    .iter()
                    .map(|terms| terms.iter().map(|m| m.eval(x)).sum()),
            ),
        }
    }

    /// Polynomial expansion of a builtin field. Polynomial fields are returned as-is.
    pub fn to_polynomial(&self) -> Vec<Vec<Monomial>> {
        match self {
            VectorField::Oscillator => vec![
                vec![Monomial::new(1.0, vec![0, 1]), Monomial::new(-1.0, vec![2, 1])],
                // -(x1 + x2)(1 - 2 x1 + x1^2)
                vec![
                    Monomial::new(-1.0, vec![1, 0]),
                    Monomial::new(2.0, vec![2, 0]),
                    Monomial::new(-1.0, vec![3, 0]),
                    Monomial::new(-1.0, vec![0, 1]),
                    Monomial::new(2.0, vec![1, 1]),
                    Monomial::new(-1.0, vec![2, 1]),
                ],
            ],
            VectorField::SquaredVelocityInput { gain } => {
                vec![vec![], vec![Monomial::new(*gain, vec![0, 2])]]
            }
            VectorField::Polynomial { components } => components.clone(),
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if let VectorField::Polynomial { components } = self {
            let n = components.len();
            if n == 0 {
                return Err(Error::invalid(what, "vector field has no components"));
            }
            for terms in components {
                for m in terms {
                    if m.exponents.len() != n {
                        return Err(Error::dims(format!("{what} monomial exponents"), n, m.exponents.len()));
                    }
                    if !m.coeff.is_finite() {
                        return Err(Error::invalid(what, "non-finite coefficient"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `x_i' = f(x_i) + g_i(x_i) u_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    drift: VectorField,
    input_columns: Vec<VectorField>,
    g_norm_bound: f64,
    builtin: Option<String>,
}

impl AgentModel {
    pub fn new(drift: VectorField, input_columns: Vec<VectorField>, g_norm_bound: f64) -> Result<Self> {
        drift.validate("drift")?;
        let n = drift.dim();
        if input_columns.is_empty() {
            return Err(Error::invalid("agent model", "at least one input column is required"));
        }
        for col in &input_columns {
            col.validate("input map")?;
            if col.dim() != n {
                return Err(Error::dims("input map column", n, col.dim()));
            }
        }
        if !(g_norm_bound.is_finite() && g_norm_bound > 0.0) {
            return Err(Error::invalid("agent model", "g_norm_bound must be positive"));
        }
        let origin = drift.eval(&DVector::zeros(n));
        if origin.iter().any(|v| *v != 0.0) {
            return Err(Error::invalid("agent model", "drift must vanish at the origin (f(0) = 0)"));
        }
        Ok(Self {
            drift,
            input_columns,
            g_norm_bound,
            builtin: None,
        })
    }

    /// Benchmark agent `k` (one-based, 1..=5).
    pub fn benchmark_node(k: usize, g_norm_bound: f64) -> Result<Self> {
        let gain = *BENCHMARK_INPUT_GAINS
            .get(k.wrapping_sub(1))
            .ok_or_else(|| Error::UnknownBuiltin(format!("paper_node_{k}")))?;
        let mut model = Self::new(
            VectorField::Oscillator,
            vec![VectorField::SquaredVelocityInput { gain }],
            g_norm_bound,
        )?;
        model.builtin = Some(format!("paper_node_{k}"));
        Ok(model)
    }

    pub fn from_builtin(name: &str, g_norm_bound: f64) -> Result<Self> {
        name.strip_prefix("paper_node_")
            .and_then(|k| k.parse::<usize>().ok())
            .ok_or_else(|| Error::UnknownBuiltin(name.to_string()))
            .and_then(|k| Self::benchmark_node(k, g_norm_bound))
    }

    pub fn builtin(&self) -> Option<&str> {
        self.builtin.as_deref()
    }

    pub fn state_dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.input_columns.len()
    }

    pub fn g_norm_bound(&self) -> f64 {
        self.g_norm_bound
    }

    pub fn drift_field(&self) -> &VectorField {
        &self.drift
    }

    pub fn input_columns(&self) -> &[VectorField] {
        &self.input_columns
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.drift.eval(x)
    }

    /// `g_i(x)`, an `n x m_i` matrix.
    pub fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let cols: Vec<_> = self.input_columns.iter().map(|c| c.eval(x)).collect();
        DMatrix::from_columns(&cols)
    }

    pub fn velocity(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.input_matrix(x) * u
    }

    /// Spot-checks `||g_i(x)|| <= beta_i` on the box `|x_k| <= half_width[k]`:
    /// all corners, the centre, and `samples` seeded uniform draws.
    pub fn check_input_bound(&self, half_width: &[f64], samples: usize, seed: u64) -> Result<()> {
        let n = self.state_dim();
        if half_width.len() != n {
            return Err(Error::dims("operating box", n, half_width.len()));
        }
        let mut points: Vec<DVector<f64>> = (0..(1usize << n))
            .map(|mask| {
                DVector::from_fn(n, |k, _| {
                    if mask & (1 << k) != 0 {
                        half_width[k]
                    } else {
                        -half_width[k]
                    }
                })
            })
            .collect();
        points.push(DVector::zeros(n));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        points.extend((0..samples).map(|_| {
            DVector::from_fn(n, |k, _| rng.gen_range(-half_width[k]..=half_width[k]))
        }));
        for x in points {
            let norm = self.input_matrix(&x).singular_values().max();
            if norm > self.g_norm_bound {
                return Err(Error::invalid(
                    "agent model",
                    format!(
                        "||g(x)|| = {norm:.6} exceeds declared bound {} at x = {:?}",
                        self.g_norm_bound,
                        x.as_slice()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Graph, agent models, and leader drift: everything needed to evaluate
/// consensus errors and their rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub graph: DiGraph,
    pub agents: Vec<AgentModel>,
    pub leader: VectorField,
}

impl Network {
    pub fn new(graph: DiGraph, agents: Vec<AgentModel>, leader: VectorField) -> Result<Self> {
        if agents.len() != graph.n_agents() {
            return Err(Error::dims("agent models", graph.n_agents(), agents.len()));
        }
        leader.validate("leader")?;
        let n = leader.dim();
        for a in &agents {
            if a.state_dim() != n {
                return Err(Error::dims("agent state dimension", n, a.state_dim()));
            }
        }
        if leader.eval(&DVector::zeros(n)).iter().any(|v| *v != 0.0) {
            return Err(Error::invalid("leader", "leader drift must vanish at the origin"));
        }
        Ok(Self { graph, agents, leader })
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn state_dim(&self) -> usize {
        self.leader.dim()
    }

    fn check_states(&self, states: &[DVector<f64>], leader_state: &DVector<f64>) -> Result<()> {
        let n = self.state_dim();
        if states.len() != self.n_agents() {
            return Err(Error::dims("agent states", self.n_agents(), states.len()));
        }
        if leader_state.len() != n {
            return Err(Error::dims("leader state", n, leader_state.len()));
        }
        for x in states {
            if x.len() != n {
                return Err(Error::dims("agent state", n, x.len()));
            }
        }
        Ok(())
    }

    /// `e_i = sum_{j in N_i} a_ij (x_i - x_j) + b_i (x_i - x_0)`.
    pub fn consensus_error(
        &self,
        i: usize,
        states: &[DVector<f64>],
        leader_state: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_states(states, leader_state)?;
        self.check_index(i)?;
        Ok(self.consensus_error_unchecked(i, states, leader_state))
    }

    pub(crate) fn consensus_error_unchecked(
        &self,
        i: usize,
        states: &[DVector<f64>],
        leader_state: &DVector<f64>,
    ) -> DVector<f64> {
        let g = &self.graph;
        let mut e = (&states[i] - leader_state) * g.pinning_gain(i);
        for j in g.neighbors(i) {
            e += (&states[i] - &states[j]) * g.weight(i, j);
        }
        e
    }

    /// Stacked global error `((L + B) kron I_n)(x - 1 kron x_0)`.
    pub fn global_error(&self, states: &[DVector<f64>], leader_state: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_states(states, leader_state)?;
        let n = self.state_dim();
        let big_n = self.n_agents();
        let lb = self.graph.laplacian() + DMatrix::from_diagonal(self.graph.pinning());
        let coupling = lb.kronecker(&DMatrix::<f64>::identity(n, n));
        let mut dev = DVector::zeros(big_n * n);
        for (j, x) in states.iter().enumerate() {
            dev.rows_mut(j * n, n).copy_from(&(x - leader_state));
        }
        Ok(coupling * dev)
    }

    /// `f_ej = f_j(x_j) - f_0(x_0)`.
    pub fn drift_mismatch(&self, j: usize, x_j: &DVector<f64>, leader_state: &DVector<f64>) -> DVector<f64> {
        self.agents[j].drift(x_j) - self.leader.eval(leader_state)
    }

    /// `e_i' = sum_{j in {N_i, i}} (l_ij + b_ij)(f_ej + g_j(x_j) u_j)`, using only
    /// agent `i` and its in-neighbours.
    pub fn error_rate(
        &self,
        i: usize,
        states: &[DVector<f64>],
        leader_state: &DVector<f64>,
        controls: &[Option<DVector<f64>>],
    ) -> Result<DVector<f64>> {
        self.check_states(states, leader_state)?;
        self.check_index(i)?;
        let f0 = self.leader.eval(leader_state);
        let term = |j: usize| -> Result<DVector<f64>> {
            let u = controls
                .get(j)
                .and_then(Option::as_ref)
                .ok_or(Error::MissingControl { agent: j })?;
            let model = &self.agents[j];
            if u.len() != model.input_dim() {
                return Err(Error::dims(format!("control of agent {}", j + 1), model.input_dim(), u.len()));
            }
            Ok(model.drift(&states[j]) - &f0 + model.input_matrix(&states[j]) * u)
        };
        let mut rate = term(i)? * self.graph.self_coupling(i);
        for j in self.graph.neighbors(i) {
            rate -= term(j)? * self.graph.weight(i, j);
        }
        Ok(rate)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n_agents() {
            return Err(Error::IndexOutOfRange {
                index: i,
                n_agents: self.n_agents(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn benchmark_network() -> Network {
        let graph = DiGraph::directed_ring(5, 2, 1.0).unwrap();
        let agents = (1..=5)
            .map(|k| AgentModel::benchmark_node(k, 2.0).unwrap())
            .collect();
        Network::new(graph, agents, VectorField::Oscillator).unwrap()
    }

    fn test_states() -> Vec<DVector<f64>> {
        vec![
            v(&[0.1, 0.2]),
            v(&[-0.3, 0.4]),
            v(&[0.5, -0.6]),
            v(&[0.7, 0.8]),
            v(&[-0.9, 0.05]),
        ]
    }

    #[test]
    fn builtin_matches_polynomial_expansion() {
        let field = VectorField::Oscillator;
        let poly = VectorField::Polynomial {
            components: field.to_polynomial(),
        };
        for x in test_states() {
            assert_relative_eq!(field.eval(&x), poly.eval(&x), epsilon = 1e-14);
        }
        let g = VectorField::SquaredVelocityInput { gain: -0.9 };
        let gp = VectorField::Polynomial {
            components: g.to_polynomial(),
        };
        assert_relative_eq!(g.eval(&v(&[0.3, 0.7])), gp.eval(&v(&[0.3, 0.7])), epsilon = 1e-15);
    }

    #[test]
    fn consensus_gives_zero_error() {
        let net = benchmark_network();
        let x0 = v(&[0.3, -0.2]);
        let states = vec![x0.clone(); 5];
        for i in 0..5 {
            assert_eq!(net.consensus_error(i, &states, &x0).unwrap(), DVector::zeros(2));
        }
    }

    #[test]
    fn single_pinned_agent_error_is_offset_from_leader() {
        let graph = DiGraph::new(DMatrix::zeros(1, 1), v(&[1.0])).unwrap();
        let net = Network::new(
            graph,
            vec![AgentModel::benchmark_node(1, 2.0).unwrap()],
            VectorField::Oscillator,
        )
        .unwrap();
        let x1 = v(&[0.4, -0.1]);
        let x0 = v(&[0.1, 0.2]);
        assert_relative_eq!(net.consensus_error(0, &[x1.clone()], &x0).unwrap(), &x1 - &x0);

        // single pinned agent: e_1' = f_e1 + g_1 u_1
        let u = v(&[0.7]);
        let rate = net.error_rate(0, &[x1.clone()], &x0, &[Some(u.clone())]).unwrap();
        let model = &net.agents[0];
        let expected = model.drift(&x1) - VectorField::Oscillator.eval(&x0) + model.input_matrix(&x1) * u;
        assert_relative_eq!(rate, expected, epsilon = 1e-15);
    }

    #[test]
    fn ring_node_three_error_by_hand() {
        let net = benchmark_network();
        let states = test_states();
        let x0 = v(&[0.2, 0.1]);
        // e_3 = (x3 - x2) + (x3 - x0)
        let expected = v(&[(0.5 - -0.3) + (0.5 - 0.2), (-0.6 - 0.4) + (-0.6 - 0.1)]);
        assert_relative_eq!(net.consensus_error(2, &states, &x0).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn global_error_stacks_local_errors() {
        let net = benchmark_network();
        let states = test_states();
        let x0 = v(&[0.2, 0.1]);
        let global = net.global_error(&states, &x0).unwrap();
        for i in 0..5 {
            let local = net.consensus_error(i, &states, &x0).unwrap();
            assert_relative_eq!(global.rows(2 * i, 2).clone_owned(), local, epsilon = 1e-14);
        }
    }

    #[test]
    fn unpinned_uniform_offset_has_zero_global_error() {
        let a = DiGraph::directed_ring(5, 0, 1.0).unwrap().adjacency().clone();
        // pin a disconnected extra node so B restricted to the ring is zero
        let mut big = DMatrix::zeros(6, 6);
        big.view_mut((0, 0), (5, 5)).copy_from(&a);
        let graph = DiGraph::new(big, v(&[0.0, 0.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
        let agents = (0..6).map(|k| AgentModel::benchmark_node(k % 5 + 1, 2.0).unwrap()).collect();
        let net = Network::new(graph, agents, VectorField::Oscillator).unwrap();
        let x0 = v(&[0.1, 0.1]);
        let offset = v(&[0.25, -0.5]);
        let mut states = vec![&x0 + &offset; 5];
        states.push(x0.clone());
        let e = net.global_error(&states, &x0).unwrap();
        assert!(e.norm() < 1e-15);
    }

    #[test]
    fn error_rate_vanishes_at_consensus_without_control() {
        let net = benchmark_network();
        let x0 = v(&[0.3, -0.2]);
        let states = vec![x0.clone(); 5];
        let u: Vec<_> = (0..5).map(|_| Some(v(&[0.0]))).collect();
        for i in 0..5 {
            assert_eq!(net.error_rate(i, &states, &x0, &u).unwrap(), DVector::zeros(2));
        }
    }

    #[test]
    fn error_rate_reports_missing_neighbor_control() {
        let net = benchmark_network();
        let x0 = v(&[0.3, -0.2]);
        let states = test_states();
        let mut u: Vec<_> = (0..5).map(|_| Some(v(&[0.1]))).collect();
        u[1] = None;
        assert!(matches!(
            net.error_rate(2, &states, &x0, &u),
            Err(Error::MissingControl { agent: 1 })
        ));
        // agent 0 does not depend on agent 1
        assert!(net.error_rate(0, &states, &x0, &u).is_ok());
    }

    #[test]
    fn drift_mismatch_is_zero_when_following_leader() {
        let net = benchmark_network();
        for x in test_states() {
            for j in 0..5 {
                assert_eq!(net.drift_mismatch(j, &x, &x), DVector::zeros(2));
            }
        }
    }

    #[test]
    fn rejects_drift_off_origin_and_dimension_errors() {
        let bad = VectorField::Polynomial {
            components: vec![vec![Monomial::new(1.0, vec![0])]],
        };
        let col = VectorField::Polynomial {
            components: vec![vec![Monomial::new(1.0, vec![0])]],
        };
        assert!(AgentModel::new(bad, vec![col], 1.0).is_err());
        let net = benchmark_network();
        let mut states = test_states();
        states[0] = v(&[1.0]);
        assert!(matches!(
            net.consensus_error(0, &states, &v(&[0.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn input_bound_sampling() {
        let node2 = AgentModel::benchmark_node(2, 1.6).unwrap();
        assert!(node2.check_input_bound(&[1.0, 1.0], 200, 7).is_ok());
        let tight = AgentModel::benchmark_node(2, 1.0).unwrap();
        assert!(tight.check_input_bound(&[1.0, 1.0], 200, 7).is_err());
    }

    #[test]
    fn unknown_builtin() {
        assert!(matches!(
            AgentModel::from_builtin("paper_node_9", 1.0),
            Err(Error::UnknownBuiltin(_))
        ));
        assert_eq!(
            AgentModel::from_builtin("paper_node_4", 1.0).unwrap().builtin(),
            Some("paper_node_4")
        );
    }
}
