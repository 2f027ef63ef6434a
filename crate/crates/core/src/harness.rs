//! Seeded simulated experiments and their latency/quality summaries.
//!
//! Trial `i` of an experiment with seed `s` runs task `trial-{i:04}` against a
//! fresh simulated backend seeded with `derive_seed(s, i)` and its own clock
//! starting at zero. Because assignment streams are keyed by task, stage and
//! slot, one-shot and rollover experiments with the same seed share their
//! stage-0 worker draws.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::SimulatedBackend;
use crate::crowd::{CrowdProfile, ProfileError};
use crate::geometry::{box_mse, mean_box, quality_stats, BoundingBox, GeometryError, QualityStats};
use crate::rng::derive_seed;
use crate::strategy::{run_strategy, Discard};
use crate::task::{LabelTask, StrategyConfig, TaskError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("n_trials must be >= 1")]
    NoTrials,
    #[error("all {0} trials failed")]
    NoCompletedTrials(usize),
    #[error("no reports to compare")]
    NothingToCompare,
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Config(#[from] TaskError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Seed used by documented experiments and calibration runs.
pub const DEFAULT_SEED: u64 = 2016;

pub const TRIAL_INSTRUCTIONS: &str = "Draw a tight box around the highlighted object.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub task_id: String,
    pub latency_s: f64,
    pub stages: u32,
    pub partial: bool,
    pub cost_cents: u32,
    pub final_box: BoundingBox,
    pub mse_to_baseline: f64,
    pub mse_to_truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedTrial {
    pub trial: usize,
    pub reason: String,
}

/// Per-strategy latency and quality summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub strategy: String,
    pub strategy_config: StrategyConfig,
    pub profile: String,
    pub seed: u64,
    /// Completed trials; equals `latencies_s.len()`.
    pub n_trials: usize,
    pub latencies_s: Vec<f64>,
    pub latency_median: f64,
    pub latency_min: f64,
    pub latency_max: f64,
    /// Quality against the mean box of this experiment's final labels.
    pub mse_mean: f64,
    pub mse_std: f64,
    pub baseline_box: BoundingBox,
    /// Quality against the simulator's true box.
    pub mse_truth_mean: f64,
    pub mse_truth_std: f64,
    pub true_box: BoundingBox,
    pub mean_stages: f64,
    pub trials: Vec<TrialRecord>,
    pub excluded: Vec<ExcludedTrial>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn trial_task_id(trial: usize) -> String {
    format!("trial-{trial:04}")
}

/// Runs `n_trials` independent simulated tasks under `strategy`.
pub fn run_experiment(
    strategy: &StrategyConfig,
    profile: &CrowdProfile,
    n_trials: usize,
    seed: u64,
) -> Result<TrialReport, HarnessError> {
    if n_trials == 0 {
        return Err(HarnessError::NoTrials);
    }
    profile.validate()?;
    strategy.validate()?;
    let scene = profile.scene;
    let (w, h) = (scene.width as u32, scene.height as u32);
    let truth = SimulatedBackend::new(profile.clone(), 0).truth_for(w, h);

    let mut finished = Vec::new();
    let mut excluded = Vec::new();
    for trial in 0..n_trials {
        let trial_seed = derive_seed(seed, trial as u64);
        let mut backend = SimulatedBackend::new(profile.clone(), trial_seed);
        let mut task = LabelTask::new(
            trial_task_id(trial),
            "sim-scene",
            w,
            h,
            TRIAL_INSTRUCTIONS,
            profile.reward_cents,
            *strategy,
            0.0,
        );
        match run_strategy(&mut task, &mut backend, &mut Discard) {
            Ok(outcome) => finished.push((trial, outcome)),
            Err(e) => excluded.push(ExcludedTrial {
                trial,
                reason: e.to_string(),
            }),
        }
    }
    if finished.is_empty() {
        return Err(HarnessError::NoCompletedTrials(n_trials));
    }

    let boxes: Vec<BoundingBox> = finished.iter().map(|(_, o)| o.final_box).collect();
    let baseline = mean_box(&boxes)?;
    let QualityStats {
        mse_mean, mse_std, ..
    } = quality_stats(&boxes, &baseline)?;
    let to_truth = quality_stats(&boxes, &truth)?;
    let latencies: Vec<f64> = finished.iter().map(|(_, o)| o.total_latency_s).collect();

    let trials = finished
        .iter()
        .map(|(trial, o)| TrialRecord {
            trial: *trial,
            task_id: o.task_id.clone(),
            latency_s: o.total_latency_s,
            stages: o.stage_count,
            partial: o.partial,
            cost_cents: o.cost_cents,
            final_box: o.final_box,
            mse_to_baseline: box_mse(&o.final_box, &baseline),
            mse_to_truth: box_mse(&o.final_box, &truth),
        })
        .collect::<Vec<_>>();

    Ok(TrialReport {
        strategy: strategy.kind.name().to_owned(),
        strategy_config: *strategy,
        profile: profile.name.clone(),
        seed,
        n_trials: latencies.len(),
        latency_median: median(&latencies),
        latency_min: latencies.iter().copied().fold(f64::INFINITY, f64::min),
        latency_max: latencies.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        latencies_s: latencies,
        mse_mean,
        mse_std,
        baseline_box: baseline,
        mse_truth_mean: to_truth.mse_mean,
        mse_truth_std: to_truth.mse_std,
        true_box: truth,
        mean_stages: trials.iter().map(|t| f64::from(t.stages)).sum::<f64>() / trials.len() as f64,
        trials,
        excluded,
    })
}

/// The strategy configuration experiments use for a named strategy.
///
/// Rollover runs the profile's calibrated chain length with early stopping
/// disabled; parallel uses nine workers and a z = 2 outlier cut.
pub fn default_strategy(name: &str, profile: &CrowdProfile) -> Option<StrategyConfig> {
    match name {
        "one-shot" | "oneshot" | "one_shot" => Some(StrategyConfig::one_shot()),
        "rollover" => Some(StrategyConfig::rollover(profile.rollover_stages, 0.0)),
        "parallel" => Some(StrategyConfig::parallel(9, 2.0)),
        _ => None,
    }
}

/// Column order of the comparison CSV. Stable across releases.
pub const CSV_COLUMNS: [&str; 14] = [
    "strategy",
    "profile",
    "seed",
    "n_trials",
    "excluded",
    "latency_median_s",
    "latency_min_s",
    "latency_max_s",
    "mse_from_baseline",
    "std_dev",
    "mse_to_truth",
    "std_dev_to_truth",
    "mean_stages",
    "mean_cost_cents",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub profile: String,
    pub seed: u64,
    pub n_trials: usize,
    pub excluded: usize,
    pub latency_median_s: f64,
    pub latency_min_s: f64,
    pub latency_max_s: f64,
    pub mse_from_baseline: f64,
    pub std_dev: f64,
    pub mse_to_truth: f64,
    pub std_dev_to_truth: f64,
    pub mean_stages: f64,
    pub mean_cost_cents: f64,
}

impl From<&TrialReport> for ComparisonRow {
    fn from(r: &TrialReport) -> Self {
        Self {
            strategy: r.strategy.clone(),
            profile: r.profile.clone(),
            seed: r.seed,
            n_trials: r.n_trials,
            excluded: r.excluded.len(),
            latency_median_s: r.latency_median,
            latency_min_s: r.latency_min,
            latency_max_s: r.latency_max,
            mse_from_baseline: r.mse_mean,
            std_dev: r.mse_std,
            mse_to_truth: r.mse_truth_mean,
            std_dev_to_truth: r.mse_truth_std,
            mean_stages: r.mean_stages,
            mean_cost_cents: r.trials.iter().map(|t| f64::from(t.cost_cents)).sum::<f64>()
                / r.trials.len().max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub table: String,
    pub csv: String,
}

/// Renders reports side by side, one column per strategy.
pub fn compare(reports: &[TrialReport]) -> Result<Comparison, HarnessError> {
    if reports.is_empty() {
        return Err(HarnessError::NothingToCompare);
    }
    let label_w = 20;
    let col_w = reports.iter().map(|r| r.strategy.len()).max().unwrap_or(0).max(14) + 2;
    let mut table = format!("{:label_w$}", "");
    for r in reports {
        table.push_str(&format!("{:>col_w$}", r.strategy));
    }
    table.push('\n');
    let rows: [(&str, fn(&TrialReport) -> String); 3] = [
        ("MSE from baseline", |r| format!("{:.2}px", r.mse_mean)),
        ("Standard Deviation", |r| format!("{:.2}px", r.mse_std)),
        ("Median latency", |r| format!("{:.2}s", r.latency_median)),
    ];
    for (label, cell) in rows {
        table.push_str(&format!("{label:label_w$}"));
        for r in reports {
            table.push_str(&format!("{:>col_w$}", cell(r)));
        }
        table.push('\n');
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(ComparisonRow::from(r))?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(Comparison {
        table,
        csv: String::from_utf8(bytes).expect("csv output is utf-8"),
    })
}

pub fn parse_comparison_csv(text: &str) -> Result<Vec<ComparisonRow>, HarnessError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows = rdr.deserialize().collect::<Result<Vec<ComparisonRow>, _>>()?;
    Ok(rows)
}

/// Per-trial CSV: one line per completed trial.
pub fn trials_csv(report: &TrialReport) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "trial",
        "task_id",
        "latency_s",
        "stages",
        "partial",
        "cost_cents",
        "left",
        "top",
        "right",
        "bottom",
        "mse_to_baseline",
        "mse_to_truth",
    ])?;
    for t in &report.trials {
        w.write_record([
            t.trial.to_string(),
            t.task_id.clone(),
            t.latency_s.to_string(),
            t.stages.to_string(),
            t.partial.to_string(),
            t.cost_cents.to_string(),
            t.final_box.left.to_string(),
            t.final_box.top.to_string(),
            t.final_box.right.to_string(),
            t.final_box.bottom.to_string(),
            t.mse_to_baseline.to_string(),
            t.mse_to_truth.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub const REPORT_FILE: &str = "report.json";
pub const TRIALS_FILE: &str = "trials.csv";

/// Writes `report.json` and `trials.csv` into `dir`.
pub fn write_experiment(dir: &Path, report: &TrialReport) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join(TRIALS_FILE), trials_csv(report)?)?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<TrialReport, HarnessError> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(REPORT_FILE))?)?)
}
