use molcomm::demod::{required_moments, uniform_grid, MomentBank};
use molcomm::filtergen::MomentDescriptor;
use molcomm::harness::{filter_spec_for, run_ser, run_sweep, set_path, ExperimentConfig, SweepSpec, THREE_SITE_CONFIG};

fn three_site() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(THREE_SITE_CONFIG).unwrap()
}

#[test]
fn faster_emission_gives_larger_moments() {
    let config = three_site();
    let system = config.build_system().unwrap();
    let spec = filter_spec_for(&system, &["C1".to_string(), "C2".into(), "C3".into()]).unwrap();
    let descriptors: Vec<MomentDescriptor> = required_moments(&spec).into_iter().collect();
    let grid = uniform_grid(1.0, 20);
    let bank = MomentBank::estimate(&system, &descriptors, 500, &grid, 11).unwrap();
    for d in &descriptors {
        let (slow, fast) = (bank.table(0, d).unwrap(), bank.table(1, d).unwrap());
        for i in 0..grid.len() {
            let tol = 3.0 * (slow.std_err[i].powi(2) + fast.std_err[i].powi(2)).sqrt();
            assert!(fast.values[i] >= slow.values[i] - tol, "{d:?} at t={}", grid[i]);
        }
    }
}

#[test]
fn equal_emission_rates_are_indistinguishable() {
    let mut value = three_site().to_value();
    set_path(&mut value, "transmitter.rates[1]", toml::Value::Float(10.0)).unwrap();
    let config = ExperimentConfig::from_value(value).unwrap();
    let result = run_ser(&config).unwrap();
    for m in &result.outcome.measurements {
        assert!(m.ci.contains(0.5), "{:?}: SER {} CI {:?}", m.measured, m.ser, m.ci);
    }
}

#[test]
fn more_receptors_do_not_hurt() {
    let config = three_site();
    let sweep = SweepSpec {
        path: "receiver.M".into(),
        values: vec![toml::Value::Integer(10), toml::Value::Integer(50)],
    };
    let results = run_sweep(&config, &sweep).unwrap();
    for (few, many) in results[0].outcome.measurements.iter().zip(&results[1].outcome.measurements) {
        assert!(many.ser <= few.ser || many.ci.overlaps(&few.ci), "{:?}: {} -> {}", few.measured, few.ser, many.ser);
    }
}

#[test]
fn sweep_over_k2_has_one_row_per_value_and_choice() {
    let mut config = three_site();
    config.run.trials = 20;
    let sweep = SweepSpec {
        path: "receiver.lambdas[2]".into(),
        values: [0.5, 1.0, 2.0, 3.0].into_iter().map(toml::Value::Float).collect(),
    };
    let results = run_sweep(&config, &sweep).unwrap();
    let mut csv = Vec::new();
    molcomm::harness::write_sweep_csv(&sweep, &results, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 4);
}
