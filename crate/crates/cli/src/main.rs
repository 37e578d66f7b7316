//! `fadp`: run, train, verify and inspect leader-following scenarios.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::Serialize;

use fadp::config::{load_config, ScenarioConfig, BUILTIN_SCENARIOS};
use fadp::controller::{run_policy_iteration, PiOutcome};
use fadp::simulator::{run_online, summarize, AgentSummary, RunSummary, Scenario, TrajectoryLog};
use fadp::testkit::{verify_suite, VerifySettings};
use fadp::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_BLOW_UP: u8 = 3;
const EXIT_VERIFY_FAILED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "fadp", version, about = "Leader-following optimal coordination with tanh-basis critics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Online learning run; writes trajectory.csv, summary.txt and scenario.toml.
    Run(ScenarioArgs),
    /// Offline policy iteration; writes pi.toml and scenario.toml.
    Pi(ScenarioArgs),
    /// Runs the verification suite and prints one line per check.
    Verify(ScenarioArgs),
    /// Recomputes gain conditions and ultimate bounds from a finished run.
    Bounds(BoundsArgs),
    /// Lists builtin scenarios.
    ListScenarios,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Builtin scenario name or path to a TOML scenario file.
    #[arg(long, default_value = "paper-benchmark")]
    scenario: String,
    /// Output directory (default: runs/<scenario>-<unix time>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Integration step, seconds.
    #[arg(long)]
    dt: Option<f64>,
    /// Final time, seconds.
    #[arg(long)]
    t_final: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Probing cutoff time for every agent with a probing signal, seconds.
    #[arg(long)]
    pe_off_time: Option<f64>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["run_dir", "trajectory"])))]
struct BoundsArgs {
    /// Directory written by `fadp run`.
    #[arg(long, conflicts_with_all = ["trajectory", "scenario"])]
    run_dir: Option<PathBuf>,
    /// Trajectory file; requires --scenario.
    #[arg(long, requires = "scenario")]
    trajectory: Option<PathBuf>,
    /// Scenario the trajectory was produced with.
    #[arg(long)]
    scenario: Option<String>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::BlowUp { .. } | Error::InadmissiblePolicy { .. } | Error::InsufficientExcitation(_) => EXIT_BLOW_UP,
        _ => EXIT_VALIDATION,
    }
}

fn resolve(args: &ScenarioArgs) -> Result<(ScenarioConfig, Scenario), Error> {
    let mut cfg = load_config(&args.scenario)?;
    if let Some(dt) = args.dt {
        cfg.integration.dt = dt;
    }
    if let Some(t) = args.t_final {
        cfg.integration.t_final = t;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(t) = args.pe_off_time {
        for agent in &mut cfg.agents {
            if let Some(p) = agent.probing.as_mut() {
                p.cutoff = t;
            }
        }
    }
    let scenario = cfg.build()?;
    Ok((cfg, scenario))
}

fn out_dir(args: &ScenarioArgs, name: &str) -> Result<PathBuf, Error> {
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => {
            let ts = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            PathBuf::from("runs").join(format!("{name}-{ts}"))
        }
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn toml_string<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("reports are representable as TOML")
}

#[derive(Serialize)]
struct RunReport<'a> {
    summary: &'a RunSummary,
    scenario: &'a ScenarioConfig,
}

fn cmd_run(args: &ScenarioArgs) -> Result<u8, Error> {
    let (cfg, scenario) = resolve(args)?;
    for w in scenario.validate()? {
        eprintln!("warning: {w}");
    }
    let dir = out_dir(args, &scenario.name)?;
    let run = run_online(&scenario)?;
    run.log.write_csv(BufWriter::new(File::create(dir.join("trajectory.csv"))?))?;
    fs::write(dir.join("scenario.toml"), cfg.to_toml())?;
    fs::write(
        dir.join("summary.txt"),
        toml_string(&RunReport {
            summary: &run.summary,
            scenario: &cfg,
        }),
    )?;
    let s = &run.summary;
    match s.convergence_time {
        Some(t) => println!("weights converged at t = {t:.3} s"),
        None => println!("weights did not meet the convergence criterion"),
    }
    println!(
        "max ||e_i||: initial {:.4e}, final {:.4e}; final-quarter sup ||x_i - x_0|| = {:.4e} (bound {:.3e})",
        s.max_initial_error_norm, s.max_final_error_norm, s.cuub_sup, scenario.analysis.cuub_bound
    );
    println!("wrote {}", dir.display());
    Ok(0)
}

#[derive(Serialize)]
struct PiReport<'a> {
    outcome: &'a PiOutcome,
    scenario: &'a ScenarioConfig,
}

fn cmd_pi(args: &ScenarioArgs) -> Result<u8, Error> {
    let (cfg, scenario) = resolve(args)?;
    let dir = out_dir(args, &scenario.name)?;
    let outcome = run_policy_iteration(&scenario)?;
    for it in &outcome.iterations {
        println!("iteration {:>3}: max weight change {:.4e}", it.index, it.change);
    }
    println!(
        "converged: {}; worst relative value increase {:.4e} (band {:.1e})",
        outcome.converged, outcome.worst_value_increase, scenario.analysis.pi_monotonicity_band
    );
    fs::write(dir.join("scenario.toml"), cfg.to_toml())?;
    fs::write(
        dir.join("pi.toml"),
        toml_string(&PiReport {
            outcome: &outcome,
            scenario: &cfg,
        }),
    )?;
    println!("wrote {}", dir.display());
    Ok(0)
}

fn cmd_verify(args: &ScenarioArgs) -> Result<u8, Error> {
    let (_, scenario) = resolve(args)?;
    let mut settings = VerifySettings::default();
    if let Some(seed) = args.seed {
        settings.seed = seed;
    }
    let run = run_online(&scenario)?;
    let reports = verify_suite(&scenario, &run, &settings)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {} not passed", reports.len(), failed);
    Ok(if failed == 0 { 0 } else { EXIT_VERIFY_FAILED })
}

#[derive(Serialize)]
struct AgentBounds<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    consensus_bound_holds: Option<bool>,
    #[serde(flatten)]
    detail: &'a AgentSummary,
}

#[derive(Serialize)]
struct BoundsReport<'a> {
    agents: Vec<AgentBounds<'a>>,
}

fn cmd_bounds(args: &BoundsArgs) -> Result<u8, Error> {
    let (scenario_src, trajectory): (String, PathBuf) = match (&args.run_dir, &args.trajectory, &args.scenario) {
        (Some(dir), None, None) => (
            dir.join("scenario.toml").to_string_lossy().into_owned(),
            dir.join("trajectory.csv"),
        ),
        (None, Some(t), Some(s)) => (s.clone(), t.clone()),
        _ => return Err(Error::invalid("bounds", "give --run-dir, or --trajectory with --scenario")),
    };
    let scenario = load_config(&scenario_src)?.build()?;
    let log = read_log(&trajectory, &scenario)?;
    let summary = summarize(&scenario, &log)?;
    let report = BoundsReport {
        agents: summary
            .agents
            .iter()
            .map(|a| AgentBounds {
                consensus_bound_holds: a.uub_bounds.map(|b| a.settled_error_sup <= b.consensus_error),
                detail: a,
            })
            .collect(),
    };
    print!("{}", toml_string(&report));
    Ok(0)
}

fn read_log(path: &Path, scenario: &Scenario) -> Result<TrajectoryLog, Error> {
    TrajectoryLog::read_csv(File::open(path)?, scenario)
}

fn cmd_list() -> u8 {
    for (name, about) in BUILTIN_SCENARIOS {
        println!("{name:<18} {about}");
    }
    0
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Pi(a) => cmd_pi(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::ListScenarios => Ok(cmd_list()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
