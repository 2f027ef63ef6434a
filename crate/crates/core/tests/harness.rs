use nimbus_core::backend::SimulatedBackend;
use nimbus_core::crowd::CrowdProfile;
use nimbus_core::harness::{
    compare, default_strategy, parse_comparison_csv, read_report, run_experiment, trial_task_id,
    write_experiment, ComparisonRow, HarnessError, CSV_COLUMNS,
};
use nimbus_core::rng::derive_seed;
use nimbus_core::strategy::{run_strategy, Discard};
use nimbus_core::task::{LabelTask, StrategyConfig};

fn calibrated_reports(seed: u64) -> Vec<nimbus_core::harness::TrialReport> {
    let p = CrowdProfile::paper2016();
    ["one-shot", "rollover"]
        .iter()
        .map(|s| run_experiment(&default_strategy(s, &p).unwrap(), &p, 20, seed).unwrap())
        .collect()
}

#[test]
fn csv_is_byte_identical_for_equal_seeds() {
    let a = compare(&calibrated_reports(77)).unwrap().csv;
    let b = compare(&calibrated_reports(77)).unwrap().csv;
    assert_eq!(a, b);
    assert_ne!(a, compare(&calibrated_reports(78)).unwrap().csv);
}

#[test]
fn csv_round_trips_report_fields() {
    let reports = calibrated_reports(5);
    let c = compare(&reports).unwrap();
    assert_eq!(c.csv.lines().next().unwrap(), CSV_COLUMNS.join(","));
    let rows = parse_comparison_csv(&c.csv).unwrap();
    assert_eq!(rows.len(), 2);
    for (row, r) in rows.iter().zip(&reports) {
        assert_eq!(row, &ComparisonRow::from(r));
        assert_eq!(row.latency_median_s, r.latency_median);
        assert_eq!(row.mse_from_baseline, r.mse_mean);
        assert_eq!(row.std_dev, r.mse_std);
    }
}

#[test]
fn table_uses_quality_speed_row_labels() {
    let c = compare(&calibrated_reports(5)).unwrap();
    let labels: Vec<&str> = c.table.lines().skip(1).map(|l| l[..20].trim_end()).collect();
    assert_eq!(labels, ["MSE from baseline", "Standard Deviation", "Median latency"]);
    let header: Vec<&str> = c.table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["one-shot", "rollover"]);
    assert!(c.table.contains("px"));
}

#[test]
fn report_invariants_hold() {
    for r in calibrated_reports(9) {
        assert_eq!(r.n_trials, r.latencies_s.len());
        assert!(r.latency_min <= r.latency_median && r.latency_median <= r.latency_max);
        assert_eq!(r.trials.len(), r.n_trials);
        assert!(r.excluded.is_empty());
    }
}

#[test]
fn experiment_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let r = calibrated_reports(3).remove(1);
    write_experiment(dir.path(), &r).unwrap();
    assert_eq!(read_report(dir.path()).unwrap(), r);
    let trials = std::fs::read_to_string(dir.path().join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), r.n_trials + 1);
}

#[test]
fn strategies_share_first_stage_draws() {
    let p = CrowdProfile::paper2016();
    let seed = 123;
    let one = run_experiment(&StrategyConfig::one_shot(), &p, 5, seed).unwrap();
    for i in 0..5 {
        let mut t = LabelTask::new(
            trial_task_id(i),
            "sim-scene",
            640,
            480,
            "",
            25,
            StrategyConfig::rollover(3, 0.0),
            0.0,
        );
        let mut b = SimulatedBackend::new(p.clone(), derive_seed(seed, i as u64));
        run_strategy(&mut t, &mut b, &mut Discard).unwrap();
        assert_eq!(t.responses[0].bbox, one.trials[i].final_box);
        assert_eq!(t.responses[0].submitted_at, one.latencies_s[i]);
    }
}

#[test]
fn failed_trials_are_excluded_and_reported() {
    let mut p = CrowdProfile::paper2016();
    p.find_latency_log_mu = 60f64.ln();
    p.find_latency_log_sigma = 1.0;
    let cfg = StrategyConfig::one_shot().with_timeouts(90.0, 90.0);
    let r = run_experiment(&cfg, &p, 40, 1).unwrap();
    assert!(!r.excluded.is_empty());
    assert_eq!(r.n_trials + r.excluded.len(), 40);
    assert!(r.latency_max <= 90.0);
    assert!(r.excluded.iter().all(|e| e.reason.contains("timed out")));

    let hopeless = StrategyConfig::one_shot().with_timeouts(0.5, 0.5);
    assert!(matches!(
        run_experiment(&hopeless, &p, 4, 1),
        Err(HarnessError::NoCompletedTrials(4))
    ));
}

#[test]
fn directional_claims_over_replications() {
    let (mut slower, mut better, mut steadier) = (0, 0, 0);
    for rep in 0..50 {
        let r = calibrated_reports(derive_seed(1000, rep));
        let (one, roll) = (&r[0], &r[1]);
        slower += u32::from(roll.latency_median > one.latency_median);
        better += u32::from(roll.mse_mean < one.mse_mean);
        steadier += u32::from(roll.mse_std < one.mse_std);
    }
    assert!(slower >= 45, "slower {slower}/50");
    assert!(better >= 45, "better {better}/50");
    assert!(steadier >= 45, "steadier {steadier}/50");
}
