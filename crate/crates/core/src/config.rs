//! TOML scenario files and the builtin scenario registry.
//!
//! Agent indices in files are 1-based. Edges are `[from, to, weight]`
//! triples: `[2, 3, 1.0]` means agent 3 hears agent 2 with weight 1.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::{CostSpec, LearnerGains, ProbingSignal, ProbingTerm};
use crate::dynamics::{AgentModel, Monomial, Network, VectorField};
use crate::error::{Error, Result};
use crate::gfhm::GfhmCritic;
use crate::graph::DiGraph;
use crate::simulator::{AnalysisSettings, Integration, Mode, Scenario};

const PAPER_BENCHMARK: &str = include_str!("../../../scenarios/paper-benchmark.toml");

/// Builtin scenario names with one-line descriptions.
pub const BUILTIN_SCENARIOS: [(&str, &str); 2] = [
    (
        "paper-benchmark",
        "five nonlinear agents on a directed ring, oscillator leader, online learning",
    ),
    (
        "consensus-start",
        "paper-benchmark started at exact consensus with probing off",
    ),
];

pub const LEADER_BUILTIN: &str = "paper_leader";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    pub integration: IntegrationConfig,
    pub graph: GraphConfig,
    pub leader: LeaderConfig,
    /// Half-widths of the state box on which `g_norm_bound` is spot-checked.
    pub operating_box: Vec<f64>,
    #[serde(default)]
    pub analysis: AnalysisSettings,
    pub agents: Vec<AgentConfig>,
}

fn default_mode() -> Mode {
    Mode::Online
}

fn default_guard() -> f64 {
    1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationConfig {
    pub dt: f64,
    pub t_final: f64,
    #[serde(default = "default_guard")]
    pub guard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    /// `[from, to, weight]`, 1-based.
    pub edges: Vec<(usize, usize, f64)>,
    pub pinning: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonomialConfig {
    pub coeff: f64,
    pub exponents: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldConfig {
    Oscillator,
    SquaredVelocity { gain: f64 },
    /// One list of monomials per state component.
    Polynomial { terms: Vec<Vec<MonomialConfig>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldConfig>,
    pub initial_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeighborCost {
    pub agent: usize,
    pub r: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub translations: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbingTermConfig {
    /// 1-based input channel.
    pub channel: usize,
    pub amplitude: f64,
    /// rad/s
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbingConfig {
    pub cutoff: f64,
    #[serde(default)]
    pub terms: Vec<ProbingTermConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<FieldConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<FieldConfig>>,
    pub g_norm_bound: f64,
    pub initial_state: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub r_self: Vec<Vec<f64>>,
    #[serde(default)]
    pub r_neighbors: Vec<NeighborCost>,
    pub a: f64,
    pub gamma: f64,
    /// Defaults to one zero translation per component with unit `phi`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic: Option<CriticConfig>,
    /// Defaults to zeros.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probing: Option<ProbingConfig>,
}

fn at<T>(context: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Invalid { what, reason } => Error::Invalid {
            what: format!("{context}: {what}"),
            reason,
        },
        Error::DimensionMismatch { context: c, expected, got } => Error::DimensionMismatch {
            context: format!("{context}: {c}"),
            expected,
            got,
        },
        Error::UnknownBuiltin(name) => Error::UnknownBuiltin(format!("{name} (in {context})")),
        other => other,
    })
}

fn matrix(context: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(Error::invalid(context, "matrix must be non-empty"));
    }
    if let Some(bad) = rows.iter().position(|row| row.len() != c) {
        return Err(Error::invalid(
            context,
            format!("row {} has {} entries, expected {c}", bad + 1, rows[bad].len()),
        ));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl FieldConfig {
    fn build(&self) -> VectorField {
        match self {
            FieldConfig::Oscillator => VectorField::Oscillator,
            FieldConfig::SquaredVelocity { gain } => VectorField::SquaredVelocityInput { gain: *gain },
            FieldConfig::Polynomial { terms } => VectorField::Polynomial {
                components: terms
                    .iter()
                    .map(|comp| {
                        comp.iter()
                            .map(|m| Monomial::new(m.coeff, m.exponents.clone()))
                            .collect()
                    })
                    .collect(),
            },
        }
    }

    fn from_field(field: &VectorField) -> Self {
        match field {
            VectorField::Oscillator => FieldConfig::Oscillator,
            VectorField::SquaredVelocityInput { gain } => FieldConfig::SquaredVelocity { gain: *gain },
            VectorField::Polynomial { components } => FieldConfig::Polynomial {
                terms: components
                    .iter()
                    .map(|comp| {
                        comp.iter()
                            .map(|m| MonomialConfig {
                                coeff: m.coeff,
                                exponents: m.exponents.clone(),
                            })
                            .collect()
                    })
                    .collect(),
            },
        }
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario configs are always representable")
    }

    /// Builds and fully validates the scenario.
    pub fn build(&self) -> Result<Scenario> {
        let n_agents = self.agents.len();
        if n_agents == 0 {
            return Err(Error::invalid("agents", "at least one agent is required"));
        }
        let mut edges = Vec::with_capacity(self.graph.edges.len());
        for (k, &(from, to, w)) in self.graph.edges.iter().enumerate() {
            if from == 0 || to == 0 || from > n_agents || to > n_agents {
                return Err(Error::invalid(
                    format!("graph.edges[{}]", k + 1),
                    format!("agent indices are 1..={n_agents}, got [{from}, {to}]"),
                ));
            }
            edges.push((from - 1, to - 1, w));
        }
        if self.graph.pinning.len() != n_agents {
            return Err(Error::dims("graph.pinning", n_agents, self.graph.pinning.len()));
        }
        let graph = at("graph", DiGraph::from_edges(n_agents, &edges, self.graph.pinning.clone()))?;

        let mut agents = Vec::with_capacity(n_agents);
        for (k, ac) in self.agents.iter().enumerate() {
            let ctx = format!("agents[{}]", k + 1);
            let model = match (&ac.builtin, &ac.drift, &ac.inputs) {
                (Some(name), None, None) => AgentModel::from_builtin(name, ac.g_norm_bound),
                (None, Some(drift), Some(inputs)) => {
                    AgentModel::new(drift.build(), inputs.iter().map(FieldConfig::build).collect(), ac.g_norm_bound)
                }
                _ => Err(Error::invalid("dynamics", "give either `builtin` or both `drift` and `inputs`")),
            };
            agents.push(at(&ctx, model)?);
        }
        let leader = match (&self.leader.builtin, &self.leader.field) {
            (Some(name), None) if name == LEADER_BUILTIN => VectorField::Oscillator,
            (Some(name), None) => return Err(Error::UnknownBuiltin(format!("{name} (in leader)"))),
            (None, Some(field)) => field.build(),
            _ => return Err(Error::invalid("leader", "give exactly one of `builtin` or `field`")),
        };
        let network = at("network", Network::new(graph, agents, leader))?;
        let n = network.state_dim();

        let mut costs = Vec::with_capacity(n_agents);
        let mut critics = Vec::with_capacity(n_agents);
        let mut gains = Vec::with_capacity(n_agents);
        let mut initial_states = Vec::with_capacity(n_agents);
        for (k, ac) in self.agents.iter().enumerate() {
            let ctx = format!("agents[{}]", k + 1);
            let mut r_neighbors = BTreeMap::new();
            for nc in &ac.r_neighbors {
                if nc.agent == 0 || nc.agent > n_agents {
                    return Err(Error::invalid(
                        format!("{ctx}.r_neighbors"),
                        format!("agent index {} outside 1..={n_agents}", nc.agent),
                    ));
                }
                let m = matrix(&format!("{ctx}.r_neighbors[agent {}]", nc.agent), &nc.r)?;
                if r_neighbors.insert(nc.agent - 1, m).is_some() {
                    return Err(Error::invalid(
                        format!("{ctx}.r_neighbors"),
                        format!("agent {} listed twice", nc.agent),
                    ));
                }
            }
            let q = matrix(&format!("{ctx}.q"), &ac.q)?;
            let r_self = matrix(&format!("{ctx}.r_self"), &ac.r_self)?;
            costs.push(at(&ctx, CostSpec::new(q, r_self, r_neighbors))?);

            let base = match &ac.critic {
                Some(c) => at(
                    &format!("{ctx}.critic"),
                    GfhmCritic::new(
                        c.translations.clone(),
                        DVector::from_column_slice(&c.phi),
                        DVector::zeros(c.phi.len()),
                    ),
                )?,
                None => GfhmCritic::identity(n),
            };
            let critic = match &ac.initial_weights {
                Some(w) => at(
                    &format!("{ctx}.initial_weights"),
                    base.with_weights(DVector::from_column_slice(w)),
                )?,
                None => base,
            };
            critics.push(critic);

            let probing = match &ac.probing {
                None => ProbingSignal::off(),
                Some(p) => ProbingSignal {
                    cutoff: p.cutoff,
                    terms: p
                        .terms
                        .iter()
                        .map(|t| {
                            if t.channel == 0 {
                                return Err(Error::invalid(format!("{ctx}.probing"), "channels are 1-based"));
                            }
                            Ok(ProbingTerm {
                                channel: t.channel - 1,
                                amplitude: t.amplitude,
                                frequency: t.frequency,
                                phase: t.phase,
                            })
                        })
                        .collect::<Result<_>>()?,
                },
            };
            gains.push(LearnerGains {
                a: ac.a,
                gamma: ac.gamma,
                probing,
            });
            initial_states.push(DVector::from_column_slice(&ac.initial_state));
        }

        let scenario = Scenario {
            name: self.name.clone(),
            network,
            costs,
            critics,
            gains,
            integration: Integration {
                dt: self.integration.dt,
                t_final: self.integration.t_final,
                guard: self.integration.guard,
            },
            initial_states,
            leader_initial: DVector::from_column_slice(&self.leader.initial_state),
            seed: self.seed,
            mode: self.mode,
            operating_box: self.operating_box.clone(),
            analysis: self.analysis.clone(),
        };
        if scenario.operating_box.len() != n {
            return Err(Error::dims("operating_box", n, scenario.operating_box.len()));
        }
        for (k, ac) in self.agents.iter().enumerate() {
            if ac.initial_state.len() != n {
                return Err(Error::dims(format!("agents[{}].initial_state", k + 1), n, ac.initial_state.len()));
            }
        }
        scenario.validate()?;
        Ok(scenario)
    }

    /// Declarative mirror of a scenario; `to_config(s).build()` reproduces `s`.
    pub fn from_scenario(s: &Scenario) -> Self {
        let net = &s.network;
        let graph = GraphConfig {
            edges: net.graph.edges().into_iter().map(|(f, t, w)| (f + 1, t + 1, w)).collect(),
            pinning: net.graph.pinning().iter().copied().collect(),
        };
        let leader = LeaderConfig {
            builtin: matches!(net.leader, VectorField::Oscillator).then(|| LEADER_BUILTIN.to_string()),
            field: (!matches!(net.leader, VectorField::Oscillator)).then(|| FieldConfig::from_field(&net.leader)),
            initial_state: s.leader_initial.iter().copied().collect(),
        };
        let agents = (0..s.n_agents())
            .map(|i| {
                let model = &net.agents[i];
                let (builtin, drift, inputs) = match model.builtin() {
                    Some(name) => (Some(name.to_string()), None, None),
                    None => (
                        None,
                        Some(FieldConfig::from_field(model.drift_field())),
                        Some(model.input_columns().iter().map(FieldConfig::from_field).collect()),
                    ),
                };
                let critic = &s.critics[i];
                let probing = &s.gains[i].probing;
                AgentConfig {
                    builtin,
                    drift,
                    inputs,
                    g_norm_bound: model.g_norm_bound(),
                    initial_state: s.initial_states[i].iter().copied().collect(),
                    q: matrix_rows(s.costs[i].q()),
                    r_self: matrix_rows(s.costs[i].r_self()),
                    r_neighbors: s.costs[i]
                        .r_neighbors()
                        .iter()
                        .map(|(&j, r)| NeighborCost {
                            agent: j + 1,
                            r: matrix_rows(r),
                        })
                        .collect(),
                    a: s.gains[i].a,
                    gamma: s.gains[i].gamma,
                    critic: Some(CriticConfig {
                        translations: critic.translations().to_vec(),
                        phi: critic.phi().iter().copied().collect(),
                    }),
                    initial_weights: Some(critic.weights().iter().copied().collect()),
                    probing: (probing.cutoff > 0.0 || !probing.terms.is_empty()).then(|| ProbingConfig {
                        cutoff: probing.cutoff,
                        terms: probing
                            .terms
                            .iter()
                            .map(|t| ProbingTermConfig {
                                channel: t.channel + 1,
                                amplitude: t.amplitude,
                                frequency: t.frequency,
                                phase: t.phase,
                            })
                            .collect(),
                    }),
                }
            })
            .collect();
        Self {
            name: s.name.clone(),
            seed: s.seed,
            mode: s.mode,
            integration: IntegrationConfig {
                dt: s.integration.dt,
                t_final: s.integration.t_final,
                guard: s.integration.guard,
            },
            graph,
            leader,
            operating_box: s.operating_box.clone(),
            analysis: s.analysis.clone(),
            agents,
        }
    }
}

pub fn to_config(scenario: &Scenario) -> ScenarioConfig {
    ScenarioConfig::from_scenario(scenario)
}

pub fn builtin_config(name: &str) -> Result<ScenarioConfig> {
    match name {
        "paper-benchmark" => ScenarioConfig::parse(PAPER_BENCHMARK),
        "consensus-start" => {
            let mut cfg = ScenarioConfig::parse(PAPER_BENCHMARK)?;
            cfg.name = name.to_string();
            for agent in &mut cfg.agents {
                agent.initial_state = cfg.leader.initial_state.clone();
                agent.probing = None;
            }
            Ok(cfg)
        }
        _ => Err(Error::UnknownBuiltin(name.to_string())),
    }
}

pub fn builtin_scenario(name: &str) -> Result<Scenario> {
    builtin_config(name)?.build()
}

/// Loads a builtin by name, or otherwise a TOML file at `name_or_path`.
pub fn load_scenario(name_or_path: &str) -> Result<Scenario> {
    load_config(name_or_path)?.build()
}

pub fn load_config(name_or_path: &str) -> Result<ScenarioConfig> {
    if BUILTIN_SCENARIOS.iter().any(|(n, _)| *n == name_or_path) {
        return builtin_config(name_or_path);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(Error::UnknownBuiltin(format!(
            "{name_or_path} is neither a builtin scenario nor an existing file"
        )));
    }
    let text = std::fs::read_to_string(path)?;
    ScenarioConfig::parse(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_builtin_matches_setup() {
        let s = builtin_scenario("paper-benchmark").unwrap();
        assert_eq!(s.n_agents(), 5);
        for i in 0..5 {
            assert_eq!(s.costs[i].r_self()[(0, 0)], 8.5);
            assert_eq!(s.costs[i].q(), &DMatrix::identity(2, 2));
            assert!(s.costs[i].r_neighbors().values().all(|r| r[(0, 0)] == 0.1));
            assert_eq!(s.gains[i].a, 0.1);
            assert_eq!(s.critics[i].phi(), &DVector::from_element(2, 1.0));
            assert_eq!(s.critics[i].translations(), &[vec![0.0], vec![0.0]]);
            assert_eq!(s.network.agents[i].builtin(), Some(format!("paper_node_{}", i + 1).as_str()));
        }
        assert!(s.network.graph.is_strongly_connected());
        assert_eq!((s.integration.dt, s.integration.t_final), (1e-3, 20.0));
    }

    #[test]
    fn round_trip_is_identity() {
        for (name, _) in BUILTIN_SCENARIOS {
            let s = builtin_scenario(name).unwrap();
            let text = to_config(&s).to_toml();
            let back = ScenarioConfig::parse(&text).unwrap().build().unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn polynomial_agents_round_trip() {
        let mut cfg = builtin_config("paper-benchmark").unwrap();
        cfg.agents[0].builtin = None;
        cfg.agents[0].drift = Some(FieldConfig::Polynomial {
            terms: vec![
                vec![MonomialConfig {
                    coeff: 1.0,
                    exponents: vec![0, 1],
                }],
                vec![MonomialConfig {
                    coeff: -1.0,
                    exponents: vec![1, 0],
                }],
            ],
        });
        cfg.agents[0].inputs = Some(vec![FieldConfig::SquaredVelocity { gain: 1.0 }]);
        let s = cfg.build().unwrap();
        let back = to_config(&s).build().unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_negative_weight_and_missing_pinning() {
        let mut cfg = builtin_config("paper-benchmark").unwrap();
        cfg.graph.edges[0].2 = -1.0;
        assert!(matches!(cfg.build(), Err(Error::Invalid { .. })));
        let mut cfg = builtin_config("paper-benchmark").unwrap();
        cfg.graph.pinning = vec![0.0; 5];
        let err = cfg.build().unwrap_err().to_string();
        assert!(err.contains("b_i > 0"), "{err}");
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = ScenarioConfig::parse("name = \"x\"\nseed = \"seven\"\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = ScenarioConfig::parse(&PAPER_BENCHMARK.replace("g_norm_bound", "g_bound")).unwrap_err();
        assert!(err.to_string().contains("g_bound"));
    }

    #[test]
    fn unknown_names() {
        assert!(matches!(builtin_scenario("nope"), Err(Error::UnknownBuiltin(_))));
        assert!(matches!(load_scenario("/definitely/not/here.toml"), Err(Error::UnknownBuiltin(_))));
    }
}
