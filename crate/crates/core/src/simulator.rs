//! Fixed-step integration of the coupled agent, leader, and critic-weight
//! system, with trajectory logging and run summaries.
//!
//! Agents, leader, and weights form one ODE state and share the same RK4
//! stages. Within a stage every agent reads the same snapshot, so evaluating
//! agents in parallel gives bit-identical results to the serial loop.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{
    control_law_with, gain_check, lambda_min, uub_bounds, weight_update_rate, CostSpec, GainReport, LearnerGains,
    RunStats, UubBounds,
};
use crate::dynamics::Network;
use crate::error::{Error, Result};
use crate::gfhm::GfhmCritic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Online,
    PolicyIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Integration {
    pub dt: f64,
    pub t_final: f64,
    /// Any state component beyond this magnitude aborts the run.
    pub guard: f64,
}

/// Thresholds and settings for convergence detection, verification, and
/// policy iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    /// Weight-drift rate threshold, 1/s.
    pub convergence_tol: f64,
    /// Trailing window for the drift rate, s.
    pub convergence_window: f64,
    /// Bound on `||x_i - x_0||` over the final quarter of a run.
    pub cuub_bound: f64,
    /// Shared probe points for value monitoring. Empty means: every agent's
    /// initial consensus error and half of it.
    pub probe_points: Vec<Vec<f64>>,
    pub nash_offsets: Vec<f64>,
    /// Allowed relative cost decrease under a unilateral offset.
    pub nash_slack: f64,
    pub pi_tolerance: f64,
    pub pi_max_iterations: usize,
    /// Keep every `pi_sample_stride`-th grid point as a policy-evaluation sample.
    pub pi_sample_stride: usize,
    /// Relative band for the value-monotonicity check across PI iterations.
    pub pi_monotonicity_band: f64,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            convergence_tol: 1e-3,
            convergence_window: 2.0,
            cuub_bound: 0.05,
            probe_points: Vec::new(),
            nash_offsets: vec![-0.1, -0.05, 0.05, 0.1],
            nash_slack: 0.02,
            pi_tolerance: 1e-4,
            pi_max_iterations: 50,
            pi_sample_stride: 10,
            pi_monotonicity_band: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub network: Network,
    pub costs: Vec<CostSpec>,
    /// Critic structure per agent; the weights are the initial weights.
    pub critics: Vec<GfhmCritic>,
    pub gains: Vec<LearnerGains>,
    pub integration: Integration,
    pub initial_states: Vec<DVector<f64>>,
    pub leader_initial: DVector<f64>,
    pub seed: u64,
    pub mode: Mode,
    /// Half-widths of the box on which the declared input-map bounds are checked.
    pub operating_box: Vec<f64>,
    pub analysis: AnalysisSettings,
}

impl Scenario {
    /// Checks every cross-member invariant. Returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let net = &self.network;
        let n_agents = net.n_agents();
        let n = net.state_dim();
        for (what, len) in [
            ("costs", self.costs.len()),
            ("critics", self.critics.len()),
            ("gains", self.gains.len()),
            ("initial states", self.initial_states.len()),
        ] {
            if len != n_agents {
                return Err(Error::dims(what, n_agents, len));
            }
        }
        let Integration { dt, t_final, guard } = self.integration;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("integration", "dt must be positive"));
        }
        if !(t_final.is_finite() && t_final > dt) {
            return Err(Error::invalid("integration", "t_final must exceed dt"));
        }
        if !(guard > 0.0) {
            return Err(Error::invalid("integration", "guard must be positive"));
        }
        if self.leader_initial.len() != n {
            return Err(Error::dims("leader initial state", n, self.leader_initial.len()));
        }
        for (i, x) in self.initial_states.iter().enumerate() {
            if x.len() != n {
                return Err(Error::dims(format!("initial state of agent {}", i + 1), n, x.len()));
            }
        }
        for i in 0..n_agents {
            self.costs[i].validate_for(i, &net.graph, &net.agents)?;
            if self.critics[i].error_dim() != n {
                return Err(Error::dims(format!("critic of agent {}", i + 1), n, self.critics[i].error_dim()));
            }
            self.gains[i].validate(n, net.agents[i].input_dim())?;
            net.agents[i].check_input_bound(&self.operating_box, 256, self.seed.wrapping_add(i as u64))?;
        }
        let a = &self.analysis;
        if !(a.convergence_window > 0.0 && a.convergence_tol > 0.0) {
            return Err(Error::invalid("analysis", "convergence window and tolerance must be positive"));
        }
        if a.pi_sample_stride == 0 || a.pi_max_iterations == 0 {
            return Err(Error::invalid("analysis", "PI stride and iteration cap must be positive"));
        }
        if a.probe_points.iter().any(|p| p.len() != n) {
            return Err(Error::invalid("analysis", format!("probe points must have dimension {n}")));
        }
        let mut warnings = Vec::new();
        if !net.graph.is_strongly_connected() {
            warnings.push("communication graph is not strongly connected".to_string());
        }
        Ok(warnings)
    }

    pub fn n_agents(&self) -> usize {
        self.network.n_agents()
    }

    pub fn state_dim(&self) -> usize {
        self.network.state_dim()
    }

    pub fn initial_weights(&self) -> Vec<DVector<f64>> {
        self.critics.iter().map(|c| c.weights().clone()).collect()
    }

    /// Probe points for value monitoring, resolving the empty default.
    pub fn probe_points(&self) -> Vec<DVector<f64>> {
        if !self.analysis.probe_points.is_empty() {
            return self
                .analysis
                .probe_points
                .iter()
                .map(|p| DVector::from_column_slice(p))
                .collect();
        }
        let mut pts = Vec::new();
        for i in 0..self.n_agents() {
            let e = self
                .network
                .consensus_error_unchecked(i, &self.initial_states, &self.leader_initial);
            pts.push(&e * 0.5);
            pts.push(e);
        }
        pts
    }
}

/// Feedback policy producing an agent's control from its own state, its
/// local consensus error, and its current critic weights.
pub trait Policy: Sync {
    fn control(&self, i: usize, x_i: &DVector<f64>, e_i: &DVector<f64>, weights: &DVector<f64>) -> DVector<f64>;
}

/// The critic-based law `u_i = -1/2 R_ii^{-1} g_i^T (l_ii + b_ii) Lambda_i theta_i`.
pub struct CriticPolicy<'a>(pub &'a Scenario);

impl Policy for CriticPolicy<'_> {
    fn control(&self, i: usize, x_i: &DVector<f64>, e_i: &DVector<f64>, weights: &DVector<f64>) -> DVector<f64> {
        let s = self.0;
        control_law_with(
            weights,
            &s.critics[i],
            &s.network.agents[i],
            s.network.graph.self_coupling(i),
            x_i,
            e_i,
            &s.costs[i],
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Integrate the weight-update law; otherwise weights stay frozen.
    pub adapt_weights: bool,
    pub probing: bool,
    /// Constant control offsets per agent; empty means none.
    pub offsets: Vec<DVector<f64>>,
    /// Initial weights; `None` takes them from the scenario critics.
    pub weights: Option<Vec<DVector<f64>>>,
    pub parallel: bool,
}

impl RunOptions {
    pub fn online() -> Self {
        Self {
            adapt_weights: true,
            probing: true,
            offsets: Vec::new(),
            weights: None,
            parallel: false,
        }
    }

    /// Fixed weights, no probing.
    pub fn frozen(weights: Vec<DVector<f64>>) -> Self {
        Self {
            adapt_weights: false,
            probing: false,
            offsets: Vec::new(),
            weights: Some(weights),
            parallel: false,
        }
    }
}

/// Classical fourth-order Runge-Kutta step.
pub fn rk4_step<F>(mut field: F, t: f64, state: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = field(t, state)?;
    rk4_step_from(field, t, state, h, k1)
}

fn rk4_step_from<F>(mut field: F, t: f64, state: &DVector<f64>, h: f64, k1: DVector<f64>) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("integration step", "h must be positive"));
    }
    let finite = |k: &DVector<f64>, at: f64| {
        if k.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::BlowUp {
                t: at,
                detail: "non-finite derivative".into(),
            })
        }
    };
    finite(&k1, t)?;
    let half = 0.5 * h;
    let k2 = field(t + half, &(state + &k1 * half))?;
    finite(&k2, t + half)?;
    let k3 = field(t + half, &(state + &k2 * half))?;
    finite(&k3, t + half)?;
    let k4 = field(t + h, &(state + &k3 * h))?;
    finite(&k4, t + h)?;
    Ok(state + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

fn map_agents<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Packing of `[x_0, x_1..x_N, theta_1..theta_N]` into one vector.
#[derive(Debug, Clone)]
struct Layout {
    n: usize,
    n_agents: usize,
    weight_dims: Vec<usize>,
    weight_offsets: Vec<usize>,
    len: usize,
}

impl Layout {
    fn new(n: usize, weight_dims: Vec<usize>) -> Self {
        let n_agents = weight_dims.len();
        let mut offset = n * (n_agents + 1);
        let weight_offsets = weight_dims
            .iter()
            .map(|&m| {
                let o = offset;
                offset += m;
                o
            })
            .collect();
        Self {
            n,
            n_agents,
            weight_dims,
            weight_offsets,
            len: offset,
        }
    }

    fn pack(&self, leader: &DVector<f64>, states: &[DVector<f64>], weights: &[DVector<f64>]) -> DVector<f64> {
        let mut z = DVector::zeros(self.len);
        z.rows_mut(0, self.n).copy_from(leader);
        for (i, x) in states.iter().enumerate() {
            z.rows_mut((i + 1) * self.n, self.n).copy_from(x);
        }
        for (i, w) in weights.iter().enumerate() {
            z.rows_mut(self.weight_offsets[i], self.weight_dims[i]).copy_from(w);
        }
        z
    }

    fn unpack(&self, z: &DVector<f64>) -> (DVector<f64>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let leader = z.rows(0, self.n).clone_owned();
        let states = (0..self.n_agents)
            .map(|i| z.rows((i + 1) * self.n, self.n).clone_owned())
            .collect();
        let weights = (0..self.n_agents)
            .map(|i| z.rows(self.weight_offsets[i], self.weight_dims[i]).clone_owned())
            .collect();
        (leader, states, weights)
    }
}

/// All per-agent quantities at one `(t, state)` point.
struct StageEval {
    leader: DVector<f64>,
    states: Vec<DVector<f64>>,
    weights: Vec<DVector<f64>>,
    errors: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
    costs: Vec<f64>,
    residuals: Vec<f64>,
    derivative: DVector<f64>,
}

struct Engine<'a> {
    scenario: &'a Scenario,
    policy: &'a dyn Policy,
    options: &'a RunOptions,
    layout: Layout,
}

impl Engine<'_> {
    fn evaluate(&self, t: f64, z: &DVector<f64>) -> Result<StageEval> {
        let s = self.scenario;
        let net = &s.network;
        let opts = self.options;
        let n_agents = self.layout.n_agents;
        let (leader, states, weights) = self.layout.unpack(z);

        let errors = map_agents(n_agents, opts.parallel, |i| {
            net.consensus_error_unchecked(i, &states, &leader)
        });
        let controls = map_agents(n_agents, opts.parallel, |i| {
            let mut u = self.policy.control(i, &states[i], &errors[i], &weights[i]);
            if opts.probing {
                u += s.gains[i].probing.eval(t, u.len());
            }
            if let Some(offset) = opts.offsets.get(i) {
                u += offset;
            }
            u
        });
        let applied: Vec<Option<DVector<f64>>> = controls.iter().cloned().map(Some).collect();
        let per_agent = map_agents(n_agents, opts.parallel, |i| -> Result<_> {
            let rate = net.error_rate(i, &states, &leader, &applied)?;
            let sigma = s.critics[i].gradient_matrix(&errors[i]).transpose() * rate;
            let r = s.costs[i].cost_rate(&errors[i], &controls[i], &applied)?;
            let residual = r + weights[i].dot(&sigma);
            let x_dot = net.agents[i].velocity(&states[i], &controls[i]);
            let w_dot = if opts.adapt_weights {
                weight_update_rate(s.gains[i].a, &weights[i], &sigma, r)
            } else {
                DVector::zeros(weights[i].len())
            };
            Ok((r, residual, x_dot, w_dot))
        });
        let mut costs = Vec::with_capacity(n_agents);
        let mut residuals = Vec::with_capacity(n_agents);
        let mut x_dots = Vec::with_capacity(n_agents);
        let mut w_dots = Vec::with_capacity(n_agents);
        for item in per_agent {
            let (r, h, xd, wd) = item?;
            costs.push(r);
            residuals.push(h);
            x_dots.push(xd);
            w_dots.push(wd);
        }
        let derivative = self.layout.pack(&net.leader.eval(&leader), &x_dots, &w_dots);
        Ok(StageEval {
            leader,
            states,
            weights,
            errors,
            controls,
            costs,
            residuals,
            derivative,
        })
    }

    fn guard(&self, t: f64, z: &DVector<f64>) -> Result<()> {
        let limit = self.scenario.integration.guard;
        let n_states = self.layout.n * (self.layout.n_agents + 1);
        if let Some(k) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                t,
                detail: format!("non-finite state component {k}"),
            });
        }
        if let Some(k) = z.rows(0, n_states).iter().position(|v| v.abs() > limit) {
            let (who, comp) = (k / self.layout.n, k % self.layout.n);
            let name = if who == 0 {
                "leader".to_string()
            } else {
                format!("agent {who}")
            };
            return Err(Error::BlowUp {
                t,
                detail: format!("{name} state component {} = {:.3e} exceeds guard {limit:.1e}", comp + 1, z[k]),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSample {
    pub state: DVector<f64>,
    pub error: DVector<f64>,
    pub control: DVector<f64>,
    /// Instantaneous cost `r_i`.
    pub cost_rate: f64,
    /// Accumulated cost `J_i` (trapezoidal).
    pub cost: f64,
    pub weights: DVector<f64>,
    /// Approximate Hamiltonian `r_i + theta^T sigma_i`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub leader: DVector<f64>,
    pub agents: Vec<AgentSample>,
}

/// Time-indexed record of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub samples: Vec<Sample>,
}

impl TrajectoryLog {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn last(&self) -> &Sample {
        self.samples.last().expect("logs are never empty")
    }

    pub fn weight_series(&self, i: usize) -> Vec<DVector<f64>> {
        self.samples.iter().map(|s| s.agents[i].weights.clone()).collect()
    }

    pub fn error_norms(&self, i: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.agents[i].error.norm()).collect()
    }

    /// First sample index with `t >= time` (clamped to the last sample).
    pub fn index_at(&self, time: f64) -> usize {
        let eps = 1e-9 * time.abs().max(1.0);
        self.samples
            .iter()
            .position(|s| s.t >= time - eps)
            .unwrap_or(self.samples.len() - 1)
    }

    /// `sup ||x_i - x_0||` over samples with `t >= from`.
    pub fn leader_deviation_sup(&self, i: usize, from: f64) -> f64 {
        self.samples[self.index_at(from)..]
            .iter()
            .map(|s| (&s.agents[i].state - &s.leader).norm())
            .fold(0.0, f64::max)
    }

    pub fn csv_header(&self) -> Vec<String> {
        let first = &self.samples[0];
        let mut h = vec!["t".to_string()];
        for (i, a) in first.agents.iter().enumerate() {
            let id = i + 1;
            h.extend((1..=a.state.len()).map(|k| format!("x{id}_{k}")));
            h.extend((1..=a.error.len()).map(|k| format!("e{id}_{k}")));
            h.extend((1..=a.control.len()).map(|k| format!("u{id}_{k}")));
            h.push(format!("r{id}"));
            h.push(format!("J{id}"));
            h.extend((1..=a.weights.len()).map(|k| format!("theta{id}_{k}")));
            h.push(format!("ham{id}"));
        }
        h.extend((1..=first.leader.len()).map(|k| format!("x0_{k}")));
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.csv_header())?;
        let mut row: Vec<String> = Vec::new();
        for s in &self.samples {
            row.clear();
            row.push(fmt_f64(s.t));
            for a in &s.agents {
                row.extend(a.state.iter().map(|v| fmt_f64(*v)));
                row.extend(a.error.iter().map(|v| fmt_f64(*v)));
                row.extend(a.control.iter().map(|v| fmt_f64(*v)));
                row.push(fmt_f64(a.cost_rate));
                row.push(fmt_f64(a.cost));
                row.extend(a.weights.iter().map(|v| fmt_f64(*v)));
                row.push(fmt_f64(a.residual));
            }
            row.extend(s.leader.iter().map(|v| fmt_f64(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a log written by [`TrajectoryLog::write_csv`] for `scenario`.
    /// The header must match the scenario's dimensions exactly.
    pub fn read_csv<R: Read>(reader: R, scenario: &Scenario) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let n = scenario.state_dim();
        let dims: Vec<(usize, usize)> = (0..scenario.n_agents())
            .map(|i| (scenario.network.agents[i].input_dim(), scenario.critics[i].gen_dim()))
            .collect();
        let expected = expected_header(n, &dims);
        if header != expected {
            return Err(Error::Parse(
                "trajectory header does not match the scenario's dimensions".into(),
            ));
        }
        let mut samples = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let vals: Vec<f64> = record
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("trajectory row {}: {e}", line + 2)))
                })
                .collect::<Result<_>>()?;
            if vals.len() != expected.len() {
                return Err(Error::Parse(format!("trajectory row {} has {} fields", line + 2, vals.len())));
            }
            let mut it = vals.into_iter();
            let mut take = |k: usize| DVector::from_iterator(k, it.by_ref().take(k));
            let t = take(1)[0];
            let agents = dims
                .iter()
                .map(|&(m, w)| {
                    let state = take(n);
                    let error = take(n);
                    let control = take(m);
                    let cost_rate = take(1)[0];
                    let cost = take(1)[0];
                    let weights = take(w);
                    let residual = take(1)[0];
                    AgentSample {
                        state,
                        error,
                        control,
                        cost_rate,
                        cost,
                        weights,
                        residual,
                    }
                })
                .collect();
            let leader = take(n);
            samples.push(Sample { t, leader, agents });
        }
        if samples.is_empty() {
            return Err(Error::Parse("trajectory has no rows".into()));
        }
        Ok(Self { samples })
    }
}

fn expected_header(n: usize, dims: &[(usize, usize)]) -> Vec<String> {
    let agents = dims
        .iter()
        .map(|&(m, w)| AgentSample {
            state: DVector::zeros(n),
            error: DVector::zeros(n),
            control: DVector::zeros(m),
            cost_rate: 0.0,
            cost: 0.0,
            weights: DVector::zeros(w),
            residual: 0.0,
        })
        .collect();
    TrajectoryLog {
        samples: vec![Sample {
            t: 0.0,
            leader: DVector::zeros(n),
            agents,
        }],
    }
    .csv_header()
}

/// Shortest round-trip representation; exponent form outside a readable range.
fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Integrates the closed loop under `policy` from the scenario's initial
/// states over `[0, t_final]`.
pub fn simulate(scenario: &Scenario, policy: &dyn Policy, options: &RunOptions) -> Result<TrajectoryLog> {
    let weights = options.weights.clone().unwrap_or_else(|| scenario.initial_weights());
    if weights.len() != scenario.n_agents() {
        return Err(Error::dims("initial weights", scenario.n_agents(), weights.len()));
    }
    for (i, w) in weights.iter().enumerate() {
        if w.len() != scenario.critics[i].gen_dim() {
            return Err(Error::dims(format!("weights of agent {}", i + 1), scenario.critics[i].gen_dim(), w.len()));
        }
    }
    if !options.offsets.is_empty() {
        if options.offsets.len() != scenario.n_agents() {
            return Err(Error::dims("control offsets", scenario.n_agents(), options.offsets.len()));
        }
        for (i, o) in options.offsets.iter().enumerate() {
            let m = scenario.network.agents[i].input_dim();
            if o.len() != m {
                return Err(Error::dims(format!("offset of agent {}", i + 1), m, o.len()));
            }
        }
    }
    let layout = Layout::new(scenario.state_dim(), weights.iter().map(|w| w.len()).collect());
    let engine = Engine {
        scenario,
        policy,
        options,
        layout,
    };
    let Integration { dt, t_final, .. } = scenario.integration;
    let steps = (t_final / dt).round() as usize;
    let mut z = engine
        .layout
        .pack(&scenario.leader_initial, &scenario.initial_states, &weights);
    engine.guard(0.0, &z)?;

    let mut samples = Vec::with_capacity(steps + 1);
    let mut eval = engine.evaluate(0.0, &z)?;
    let mut accumulated = vec![0.0; scenario.n_agents()];
    let record = |t: f64, eval: &StageEval, acc: &[f64]| Sample {
        t,
        leader: eval.leader.clone(),
        agents: (0..eval.states.len())
            .map(|i| AgentSample {
                state: eval.states[i].clone(),
                error: eval.errors[i].clone(),
                control: eval.controls[i].clone(),
                cost_rate: eval.costs[i],
                cost: acc[i],
                weights: eval.weights[i].clone(),
                residual: eval.residuals[i],
            })
            .collect(),
    };
    samples.push(record(0.0, &eval, &accumulated));
    for k in 0..steps {
        let t = k as f64 * dt;
        let t_next = (k + 1) as f64 * dt;
        let k1 = std::mem::replace(&mut eval.derivative, DVector::zeros(0));
        z = rk4_step_from(|tt, zz| engine.evaluate(tt, zz).map(|e| e.derivative), t, &z, dt, k1)?;
        engine.guard(t_next, &z)?;
        let next = engine.evaluate(t_next, &z)?;
        for (acc, (r0, r1)) in accumulated.iter_mut().zip(eval.costs.iter().zip(&next.costs)) {
            *acc += 0.5 * dt * (r0 + r1);
        }
        eval = next;
        samples.push(record(t_next, &eval, &accumulated));
    }
    Ok(TrajectoryLog { samples })
}

/// Earliest time `t` such that, for `t` and every later window end, the
/// per-component spread `(max - min) / window` of the weights over the
/// trailing window `[t - window, t]` stays below `tol`.
pub fn detect_convergence(times: &[f64], series: &[DVector<f64>], window: f64, tol: f64) -> Option<f64> {
    use std::collections::VecDeque;
    let len = times.len().min(series.len());
    if len == 0 {
        return None;
    }
    let start = times[0];
    let eps = 1e-9 * window.max(1.0);
    let dims = series[0].len();
    let mut max_q: Vec<VecDeque<usize>> = vec![VecDeque::new(); dims];
    let mut min_q: Vec<VecDeque<usize>> = vec![VecDeque::new(); dims];
    let mut lo = 0usize;
    let mut candidate: Option<f64> = None;
    let mut any_window = false;
    for k in 0..len {
        for c in 0..dims {
            let v = series[k][c];
            while max_q[c].back().is_some_and(|&j| series[j][c] <= v) {
                max_q[c].pop_back();
            }
            max_q[c].push_back(k);
            while min_q[c].back().is_some_and(|&j| series[j][c] >= v) {
                min_q[c].pop_back();
            }
            min_q[c].push_back(k);
        }
        if times[k] - start < window - eps {
            continue;
        }
        while times[k] - times[lo] > window + eps {
            lo += 1;
        }
        for c in 0..dims {
            while max_q[c].front().is_some_and(|&j| j < lo) {
                max_q[c].pop_front();
            }
            while min_q[c].front().is_some_and(|&j| j < lo) {
                min_q[c].pop_front();
            }
        }
        any_window = true;
        let spread = (0..dims)
            .map(|c| series[max_q[c][0]][c] - series[min_q[c][0]][c])
            .fold(0.0, f64::max);
        if spread / window < tol {
            candidate.get_or_insert(times[k]);
        } else {
            candidate = None;
        }
    }
    if any_window {
        candidate
    } else {
        None
    }
}

/// Trapezoidal `int_0^T r_i dt` over the log's grid.
pub fn cost_integral(log: &TrajectoryLog, i: usize) -> f64 {
    log.samples
        .windows(2)
        .map(|w| 0.5 * (w[1].t - w[0].t) * (w[0].agents[i].cost_rate + w[1].agents[i].cost_rate))
        .sum()
}

/// `sigma_i` recomputed from a logged sample.
pub fn sample_sigma(scenario: &Scenario, sample: &Sample, i: usize) -> Result<DVector<f64>> {
    let states: Vec<_> = sample.agents.iter().map(|a| a.state.clone()).collect();
    let controls: Vec<_> = sample.agents.iter().map(|a| Some(a.control.clone())).collect();
    let rate = scenario.network.error_rate(i, &states, &sample.leader, &controls)?;
    Ok(scenario.critics[i].gradient_matrix(&sample.agents[i].error).transpose() * rate)
}

/// `(sigma_i, r_i)` at a logged state with every agent applying `policy`
/// under its logged weights instead of the logged (probed) control.
pub fn on_policy_sample(scenario: &Scenario, policy: &dyn Policy, sample: &Sample, i: usize) -> Result<(DVector<f64>, f64)> {
    let states: Vec<_> = sample.agents.iter().map(|a| a.state.clone()).collect();
    let controls: Vec<_> = sample
        .agents
        .iter()
        .enumerate()
        .map(|(j, a)| Some(policy.control(j, &a.state, &a.error, &a.weights)))
        .collect();
    let rate = scenario.network.error_rate(i, &states, &sample.leader, &controls)?;
    let error = &sample.agents[i].error;
    let sigma = scenario.critics[i].gradient_matrix(error).transpose() * rate;
    let own = controls[i].as_ref().expect("all controls present");
    let r = scenario.costs[i].cost_rate(error, own, &controls)?;
    Ok((sigma, r))
}

fn percentile(mut values: Vec<f64>, p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * (values.len() - 1) as f64).round() as usize;
    Some(values[rank.min(values.len() - 1)])
}

/// Estimates the analysis constants for agent `i`.
///
/// `sigma_M` and `q_i` come from the excitation window `[0, t_pe)` (the whole
/// run if probing is off); the residual bound and the drift energy come from
/// `[settled_from, T]`.
pub fn collect_stats(scenario: &Scenario, log: &TrajectoryLog, i: usize, settled_from: f64) -> Result<RunStats> {
    let net = &scenario.network;
    let probing = &scenario.gains[i].probing;
    let t_final = log.last().t;
    let excite_end = if probing.is_active() {
        probing.cutoff.min(t_final)
    } else {
        t_final
    };
    let m = scenario.critics[i].gen_dim();
    let mut gram = DMatrix::zeros(m, m);
    let mut count = 0usize;
    let mut sigma_max: f64 = 0.0;
    for s in log.samples.iter().filter(|s| s.t <= excite_end) {
        let sigma = sample_sigma(scenario, s, i)?;
        sigma_max = sigma_max.max(sigma.norm());
        gram += &sigma * sigma.transpose();
        count += 1;
    }
    let mut residuals = Vec::new();
    let mut drift_energy: f64 = 0.0;
    let coupling = net.graph.coupling_row(i)?;
    let mut members = net.graph.neighbors(i);
    members.push(i);
    for s in &log.samples[log.index_at(settled_from)..] {
        residuals.push(s.agents[i].residual.abs());
        let energy: f64 = members
            .iter()
            .map(|&j| (net.drift_mismatch(j, &s.agents[j].state, &s.leader) * coupling[j]).norm_squared())
            .sum();
        drift_energy = drift_energy.max(energy);
    }
    Ok(RunStats {
        sigma_max: (count > 0).then_some(sigma_max),
        excitation_level: (count > 0).then(|| lambda_min(&(gram / count as f64))),
        residual_bound: percentile(residuals, 99.0),
        drift_energy: Some(drift_energy),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentSummary {
    pub agent: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence_time: Option<f64>,
    pub final_weights: Vec<f64>,
    pub initial_error_norm: f64,
    pub final_error_norm: f64,
    /// `sup ||x_i - x_0||` over the final quarter of the run.
    pub tail_leader_deviation: f64,
    /// `sup ||e_i||` from the convergence time (or the final quarter) on.
    pub settled_error_sup: f64,
    pub accumulated_cost: f64,
    pub stats: RunStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain_check: Option<GainReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uub_bounds: Option<UubBounds>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub integration: Integration,
    pub analysis: AnalysisSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence_time: Option<f64>,
    pub max_initial_error_norm: f64,
    pub max_final_error_norm: f64,
    pub cuub_sup: f64,
    pub cuub_ok: bool,
    pub warnings: Vec<String>,
    pub agents: Vec<AgentSummary>,
}

impl RunSummary {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("summary is always representable")
    }
}

/// Convergence times, final norms, run statistics, and gain/bound
/// diagnostics for a finished run.
pub fn summarize(scenario: &Scenario, log: &TrajectoryLog) -> Result<RunSummary> {
    let times = log.times();
    let t_final = log.last().t;
    let a = &scenario.analysis;
    let tail_from = 0.75 * t_final;
    let mut agents = Vec::new();
    for i in 0..scenario.n_agents() {
        let conv = detect_convergence(&times, &log.weight_series(i), a.convergence_window, a.convergence_tol);
        let settled_from = conv.unwrap_or(tail_from);
        let stats = collect_stats(scenario, log, i, settled_from)?;
        let gains = &scenario.gains[i];
        let cost = &scenario.costs[i];
        let mut diagnostics_error = None;
        let gain_report = match gain_check(gains, cost, &scenario.network, i, &stats) {
            Ok(r) => Some(r),
            Err(e) => {
                diagnostics_error = Some(e.to_string());
                None
            }
        };
        let bounds = match uub_bounds(&stats, gains, cost, &scenario.network, i) {
            Ok(b) => Some(b),
            Err(e) => {
                diagnostics_error = Some(e.to_string());
                None
            }
        };
        let first = &log.samples[0].agents[i];
        let last = &log.last().agents[i];
        agents.push(AgentSummary {
            agent: i + 1,
            convergence_time: conv,
            final_weights: last.weights.iter().copied().collect(),
            initial_error_norm: first.error.norm(),
            final_error_norm: last.error.norm(),
            tail_leader_deviation: log.leader_deviation_sup(i, tail_from),
            settled_error_sup: log.samples[log.index_at(settled_from)..]
                .iter()
                .map(|s| s.agents[i].error.norm())
                .fold(0.0, f64::max),
            accumulated_cost: last.cost,
            stats,
            gain_check: gain_report,
            uub_bounds: bounds,
            diagnostics_error,
        });
    }
    let convergence_time = agents
        .iter()
        .map(|s| s.convergence_time)
        .collect::<Option<Vec<_>>>()
        .map(|ts| ts.into_iter().fold(0.0, f64::max));
    let cuub_sup = agents.iter().map(|s| s.tail_leader_deviation).fold(0.0, f64::max);
    Ok(RunSummary {
        scenario: scenario.name.clone(),
        mode: scenario.mode,
        seed: scenario.seed,
        integration: scenario.integration,
        analysis: scenario.analysis.clone(),
        convergence_time,
        max_initial_error_norm: agents.iter().map(|s| s.initial_error_norm).fold(0.0, f64::max),
        max_final_error_norm: agents.iter().map(|s| s.final_error_norm).fold(0.0, f64::max),
        cuub_sup,
        cuub_ok: cuub_sup.is_finite() && cuub_sup < a.cuub_bound,
        warnings: scenario.validate()?,
        agents,
    })
}

#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub log: TrajectoryLog,
    pub summary: RunSummary,
}

/// Online learning: states, leader, and weights integrated together under
/// the critic law plus probing.
pub fn run_online(scenario: &Scenario) -> Result<OnlineRun> {
    run_online_with(scenario, &RunOptions::online())
}

pub fn run_online_with(scenario: &Scenario, options: &RunOptions) -> Result<OnlineRun> {
    scenario.validate()?;
    let log = simulate(scenario, &CriticPolicy(scenario), options)?;
    let summary = summarize(scenario, &log)?;
    Ok(OnlineRun { log, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn rk4_zero_and_constant_fields() {
        let x = v(&[1.0, -2.0]);
        let same = rk4_step(|_, s| Ok(DVector::zeros(s.len())), 0.0, &x, 0.1).unwrap();
        assert_eq!(same, x);
        let c = v(&[0.5, 3.0]);
        let moved = rk4_step(|_, _| Ok(c.clone()), 0.0, &x, 0.25).unwrap();
        assert_relative_eq!(moved, &x + &c * 0.25, epsilon = 1e-15);
    }

    #[test]
    fn rk4_exponential_decay() {
        let x = v(&[1.0]);
        let next = rk4_step(|_, s| Ok(-s), 0.0, &x, 0.01).unwrap();
        assert!((next[0] - (-0.01f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn rk4_rejects_non_finite_and_bad_step() {
        let x = v(&[1.0]);
        assert!(matches!(
            rk4_step(|_, _| Ok(v(&[f64::NAN])), 0.5, &x, 0.1),
            Err(Error::BlowUp { .. })
        ));
        assert!(rk4_step(|_, s| Ok(s.clone()), 0.0, &x, 0.0).is_err());
    }

    #[test]
    fn convergence_of_constant_and_ramp() {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.1).collect();
        let constant: Vec<_> = times.iter().map(|_| v(&[1.0, 2.0])).collect();
        assert_relative_eq!(detect_convergence(&times, &constant, 2.0, 1e-3).unwrap(), 2.0, epsilon = 1e-12);
        let ramp: Vec<_> = times.iter().map(|t| v(&[*t, 0.0])).collect();
        assert_eq!(detect_convergence(&times, &ramp, 2.0, 1e-3), None);
        // settles at t = 5
        let settle: Vec<_> = times.iter().map(|t| v(&[t.min(5.0)])).collect();
        let tc = detect_convergence(&times, &settle, 2.0, 1e-3).unwrap();
        assert_relative_eq!(tc, 7.0, epsilon = 1e-9);
        // window longer than the series
        assert_eq!(detect_convergence(&times[..5], &constant[..5], 2.0, 1e-3), None);
    }

    #[test]
    fn fmt_round_trips() {
        for v in [0.0, -0.0, 1.0, 0.1, 1e-7, -3.25e-300, 123456.789, 1e20, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn percentile_nearest_rank() {
        let vals: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile(vals, 99.0), Some(99.0));
        assert_eq!(percentile(vec![], 99.0), None);
    }
}
