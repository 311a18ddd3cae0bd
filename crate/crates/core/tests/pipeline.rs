use std::path::Path;

use tlpe_egle::egle::{egle_full, EgleConfig};
use tlpe_egle::estimators::ls_estimate;
use tlpe_egle::gmm::GmmSpec;
use tlpe_egle::harness::{monte_carlo_run, ConfigFile, McConfig, Method};
use tlpe_egle::par::Execution;
use tlpe_egle::tlpe::{
    build_system, inject_noise, read_measurements_csv, recover_line_params, simulate_measurements,
    write_measurements_csv, LineParameters, ScenarioConfig, YVector,
};

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn shipped_configs_load() {
    for name in ["base.toml", "fast.toml"] {
        let cfg = ConfigFile::load(&configs_dir().join(name)).unwrap();
        let mc = cfg.mc_config().unwrap();
        assert_eq!(mc.scenario.s, 250);
        assert_eq!(mc.methods, vec![Method::Ls, Method::Tls, Method::EgleFull]);
    }
    let fast = ConfigFile::load(&configs_dir().join("fast.toml")).unwrap().settings().unwrap();
    assert_eq!(fast.egle.m_max, 3);
    assert_eq!(fast.egle.eps1, 1e-4);
}

#[test]
fn csv_round_trip_preserves_estimates() {
    let sc = ScenarioConfig {
        s: 60,
        ..ScenarioConfig::default()
    };
    let spec = GmmSpec::from_std(vec![0.3, 0.7], vec![0.0, 0.005], vec![0.0015, 0.0015]).unwrap();
    let noisy = inject_noise(&simulate_measurements(&sc).unwrap(), &spec, &spec, 8).unwrap().noisy;
    let mut buf = Vec::new();
    write_measurements_csv(&mut buf, &noisy).unwrap();
    let back = read_measurements_csv(buf.as_slice()).unwrap();
    let a = ls_estimate(&build_system(&noisy).unwrap()).unwrap();
    let b = ls_estimate(&build_system(&back).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn egle_recovers_clean_line() {
    let sc = ScenarioConfig {
        s: 80,
        ..ScenarioConfig::default()
    };
    let sys = build_system(&simulate_measurements(&sc).unwrap()).unwrap();
    let rep = egle_full(&sys, &EgleConfig::default()).unwrap();
    let line = recover_line_params(&YVector::from_slice(&rep.x_hat).unwrap()).unwrap();
    let truth = LineParameters::default();
    assert!((line.r - truth.r).abs() / truth.r < 1e-8);
    assert!((line.x - truth.x).abs() / truth.x < 1e-8);
    assert!((line.b - truth.b).abs() / truth.b < 1e-8);
    assert_eq!(rep.m_star, 1);
}

#[test]
fn monte_carlo_is_reproducible_across_execution_modes() {
    let spec = GmmSpec::from_std(vec![0.3, 0.7], vec![0.0, 0.005], vec![0.0015, 0.0015]).unwrap();
    let mut cfg = McConfig {
        runs: 4,
        scenario: ScenarioConfig {
            s: 60,
            noise_c: spec.clone(),
            noise_d: spec,
            ..ScenarioConfig::default()
        },
        methods: vec![Method::Ls, Method::Tls, Method::Cls, Method::EgleFull],
        base_seed: 99,
        ..McConfig::default()
    };
    cfg.settings.egle = EgleConfig {
        m_max: 2,
        eps1: 1e-4,
        ..EgleConfig::default()
    };
    let seq = monte_carlo_run(&McConfig {
        execution: Execution::Sequential,
        ..cfg.clone()
    })
    .unwrap();
    let par = monte_carlo_run(&McConfig {
        execution: Execution::Parallel,
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(seq.config.execution, Execution::Sequential);
    let mut par = par;
    par.config.execution = Execution::Sequential;
    assert_eq!(serde_json::to_string(&seq).unwrap(), serde_json::to_string(&par).unwrap());
    let again = monte_carlo_run(&McConfig {
        execution: Execution::Sequential,
        ..cfg
    })
    .unwrap();
    assert_eq!(seq, again);
    assert_eq!(seq.runs.len(), 4);
}
