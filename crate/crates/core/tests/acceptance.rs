//! Acceptance criteria for the shipped benchmark and the oracle suites.
//! Prints one line per criterion and exits nonzero if any does not pass.

use std::process::ExitCode;

use fadp::testkit::{
    aggregate, appendix_a_draws, check_consensus_ratio, check_convergence_time, check_cuub, check_determinism,
    check_invariant_manifold, check_nash_perturbation, check_pi_monotone, gradient_fd_draws, laplacian_draws,
    lsq_flow_draws, CheckReport, Outcome,
};
use fadp::config::builtin_scenario;
use fadp::{run_online, Result};

const SEED: u64 = 2024;

fn both(name: &str, a: CheckReport, b: CheckReport) -> CheckReport {
    let outcome = match (a.outcome, b.outcome) {
        (Outcome::Pass, Outcome::Pass) => Outcome::Pass,
        (Outcome::Fail, _) | (_, Outcome::Fail) => Outcome::Fail,
        _ => Outcome::Inconclusive,
    };
    CheckReport {
        name: name.to_string(),
        outcome,
        measured: a.measured,
        tolerance: a.tolerance,
        context: format!("{}; {} {:.4e} < {:.3e}", a.context, b.name, b.measured, b.tolerance),
    }
}

fn criteria() -> Result<Vec<(u32, CheckReport)>> {
    let scenario = builtin_scenario("paper-benchmark")?;
    let online = run_online(&scenario)?;
    let log = &online.log;
    let final_weights: Vec<_> = log.last().agents.iter().map(|a| a.weights.clone()).collect();

    Ok(vec![
        (1, check_convergence_time(&scenario, log, 12.0)),
        (
            2,
            both(
                "consensus",
                check_consensus_ratio(log, 18.0, 0.05),
                check_cuub(&scenario, log, 15.0),
            ),
        ),
        (3, aggregate("appendix_a", &appendix_a_draws(SEED, 100)?)),
        (4, aggregate("laplacian_rows", &laplacian_draws(SEED, 50))),
        (5, aggregate("gradient_fd", &gradient_fd_draws(SEED, 100, 1e-6))),
        (6, aggregate("lsq_vs_gradient_flow", &lsq_flow_draws(SEED, 20, 0.1)?)),
        (7, check_pi_monotone(&scenario)?),
        (
            8,
            check_nash_perturbation(&scenario, &final_weights, &[-0.1, -0.05, 0.05, 0.1], 0.02)?.summary(),
        ),
        (9, check_invariant_manifold(&scenario, 1e-8)?),
        (10, check_determinism(&scenario)?),
    ])
}

fn main() -> ExitCode {
    let results = match criteria() {
        Ok(r) => r,
        Err(e) => {
            println!("FAIL         acceptance aborted: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut failed = 0;
    for (k, report) in &results {
        println!("criterion {k:>2}: {report}");
        if !report.passed() {
            failed += 1;
        }
    }
    println!("acceptance: {} criteria, {failed} not passed", results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
