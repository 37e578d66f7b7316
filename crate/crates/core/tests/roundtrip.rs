use fadp::config::{builtin_config, ScenarioConfig};
use fadp::controller::{run_policy_iteration, run_policy_iteration_from};
use fadp::simulator::{run_online, summarize, TrajectoryLog};

fn short_benchmark(t_final: f64) -> ScenarioConfig {
    let mut cfg = builtin_config("paper-benchmark").unwrap();
    cfg.integration.t_final = t_final;
    cfg
}

#[test]
fn config_survives_toml_round_trip() {
    for name in ["paper-benchmark", "consensus-start"] {
        let cfg = builtin_config(name).unwrap();
        let back = ScenarioConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back, "{name}");
        assert_eq!(back.build().unwrap().n_agents(), 5);
    }
}

#[test]
fn config_file_on_disk_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.toml");
    std::fs::write(&path, short_benchmark(0.5).to_toml()).unwrap();
    let s = fadp::load_scenario(path.to_str().unwrap()).unwrap();
    assert_eq!(s.integration.t_final, 0.5);
}

#[test]
fn trajectory_csv_round_trip_is_exact() {
    let s = short_benchmark(0.3).build().unwrap();
    let run = run_online(&s).unwrap();
    let mut buf = Vec::new();
    run.log.write_csv(&mut buf).unwrap();
    let back = TrajectoryLog::read_csv(buf.as_slice(), &s).unwrap();
    assert_eq!(back.samples.len(), run.log.samples.len());
    assert_eq!(back, run.log);

    let mut again = Vec::new();
    back.write_csv(&mut again).unwrap();
    assert_eq!(buf, again);
    assert_eq!(summarize(&s, &back).unwrap(), run.summary);
}

#[test]
fn csv_with_foreign_header_is_rejected() {
    let s = short_benchmark(0.01).build().unwrap();
    let run = run_online(&s).unwrap();
    let mut buf = Vec::new();
    run.log.write_csv(&mut buf).unwrap();

    let text = String::from_utf8(buf).unwrap();
    let renamed = text.replacen("x1_1", "y1_1", 1);
    assert!(TrajectoryLog::read_csv(renamed.as_bytes(), &s).is_err());
    let (header, body) = text.split_once('\n').unwrap();
    let dropped = format!("{}\n{body}", header.rsplit_once(',').unwrap().0);
    assert!(TrajectoryLog::read_csv(dropped.as_bytes(), &s).is_err());
}

#[test]
fn policy_iteration_restarted_at_its_fixed_point_stops_at_once() {
    let s = short_benchmark(20.0).build().unwrap();
    let first = run_policy_iteration(&s).unwrap();
    assert!(first.converged);
    let again = run_policy_iteration_from(&s, first.final_weights()).unwrap();
    assert!(again.converged);
    assert_eq!(again.iterations.len(), 1);
}
