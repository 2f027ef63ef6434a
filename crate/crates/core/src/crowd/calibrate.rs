//! Grid-search calibration of a crowd profile against observed summaries.
//!
//! Latency parameters are fitted first. For each chain length, find-latency
//! spread and work-duration setting, `mu` is solved by bisection so the
//! seed-averaged one-shot and rollover medians miss their targets by equal and
//! opposite log ratios. Quality parameters are then searched with the
//! latency parameters held fixed. Both searches replay the exact per-assignment
//! streams the experiment harness uses, without going through the event loop,
//! and the winning profile is re-run through the real harness before it is
//! returned.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{perturb_box, refine_box, sample_work_duration, CrowdProfile, ProfileError};
use crate::backend::SimulatedBackend;
use crate::geometry::{mean_box, quality_stats, BoundingBox};
use crate::harness::{median, run_experiment, trial_task_id, HarnessError};
use crate::rng::{assignment_stream, derive_seed, SimRng};
use crate::task::StrategyConfig;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no setting in the search grid meets tolerance (best: {best})")]
    NonConvergence { best: String },
    #[error("invalid calibration input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("targets io: {0}")]
    Io(#[from] std::io::Error),
    #[error("targets parse: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTargets {
    pub oneshot_median_s: f64,
    pub rollover_median_s: f64,
    pub oneshot_range: [f64; 2],
    pub rollover_range: [f64; 2],
    pub mse_ratio: f64,
    pub std_ratio: f64,
    /// Longest rollover chain considered.
    #[serde(default = "default_max_stages")]
    pub max_stages: u32,
}

fn default_max_stages() -> u32 {
    8
}

impl CalibrationTargets {
    /// Reference one-shot and rollover summaries.
    pub fn paper2016() -> Self {
        Self {
            oneshot_median_s: 37.5,
            rollover_median_s: 263.58,
            oneshot_range: [12.9, 520.0],
            rollover_range: [95.0, 1217.8],
            mse_ratio: 341.5 / 518.6,
            std_ratio: 18.4 / 22.73,
            max_stages: 8,
        }
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        let pos = [
            self.oneshot_median_s,
            self.rollover_median_s,
            self.oneshot_range[0],
            self.oneshot_range[1],
            self.rollover_range[0],
            self.rollover_range[1],
            self.mse_ratio,
            self.std_ratio,
        ];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(CalibrationError::Invalid("targets must be positive".into()));
        }
        if self.max_stages < 1 {
            return Err(CalibrationError::Invalid("stages must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let t: Self = toml::from_str(&std::fs::read_to_string(path)?)?;
        t.validate()?;
        Ok(t)
    }
}

/// The documented search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGrid {
    pub find_log_sigma: Vec<f64>,
    pub work_mean: Vec<f64>,
    pub work_sigma: Vec<f64>,
    pub coord_noise: Vec<f64>,
    pub gross_error_prob: Vec<f64>,
    pub rollover_gain: Vec<f64>,
    /// Rollover noise as a fraction of `coord_noise`.
    pub rollover_noise_ratio: Vec<f64>,
    pub upload_overhead_s: f64,
    pub replications: usize,
    pub trials: usize,
    /// Relative tolerance on seed-averaged latency medians.
    pub latency_tolerance: f64,
    /// Absolute tolerance on seed-averaged quality ratios.
    pub ratio_tolerance: f64,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        Self {
            find_log_sigma: vec![0.6, 0.8, 1.0, 1.2, 1.4],
            work_mean: vec![15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0],
            work_sigma: vec![5.0, 10.0],
            coord_noise: vec![15.0],
            gross_error_prob: vec![0.1, 0.15, 0.2],
            rollover_gain: vec![0.95, 0.96, 0.97, 0.98],
            rollover_noise_ratio: vec![0.1, 0.2],
            upload_overhead_s: 2.0,
            replications: 50,
            trials: 20,
            latency_tolerance: 0.15,
            ratio_tolerance: 0.15,
        }
    }
}

impl CalibrationGrid {
    fn validate(&self) -> Result<(), CalibrationError> {
        let lists = [
            &self.find_log_sigma,
            &self.work_mean,
            &self.work_sigma,
            &self.coord_noise,
            &self.gross_error_prob,
            &self.rollover_gain,
            &self.rollover_noise_ratio,
        ];
        if lists.iter().any(|l| l.is_empty()) {
            return Err(CalibrationError::Invalid("empty grid axis".into()));
        }
        if self.replications == 0 || self.trials == 0 {
            return Err(CalibrationError::Invalid("replications and trials must be >= 1".into()));
        }
        Ok(())
    }
}

/// Seed-averaged and single-replication summaries of one profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub oneshot_median_s: f64,
    pub rollover_median_s: f64,
    pub mse_ratio: f64,
    pub std_ratio: f64,
    /// Fraction of replications with both medians inside tolerance.
    pub latency_pass_rate: f64,
    /// Fraction of replications with both ratios inside tolerance.
    pub quality_pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub profile: CrowdProfile,
    pub seed: u64,
    pub summary: FitSummary,
    /// One harness run per strategy with experiment seed `seed`.
    pub verification: FitSummary,
}

/// Per trial and stage: the log-normal driver and the work duration.
struct LatencyDraws {
    z: Vec<f64>,
    work: Vec<f64>,
}

struct Plan {
    reps: usize,
    trials: usize,
    stages: usize,
    rep_seeds: Vec<u64>,
    task_ids: Vec<String>,
}

impl Plan {
    fn new(seed: u64, reps: usize, trials: usize, stages: u32) -> Self {
        Self {
            reps,
            trials,
            stages: stages as usize,
            rep_seeds: (0..reps as u64).map(|r| derive_seed(seed, r)).collect(),
            task_ids: (0..trials).map(trial_task_id).collect(),
        }
    }

    fn idx(&self, rep: usize, trial: usize, stage: usize) -> usize {
        (rep * self.trials + trial) * self.stages + stage
    }

    /// The stream for one assignment, positioned after its latency draws.
    fn stream(&self, rep: usize, trial: usize, stage: usize, profile: &CrowdProfile) -> (f64, f64, SimRng) {
        let trial_seed = derive_seed(self.rep_seeds[rep], trial as u64);
        let mut rng = assignment_stream(trial_seed, &self.task_ids[trial], stage as u32, 0);
        let z: f64 = rng.sample(StandardNormal);
        let work = sample_work_duration(profile, &mut rng);
        (z, work, rng)
    }

    fn latency_draws(&self, profile: &CrowdProfile) -> LatencyDraws {
        let n = self.reps * self.trials * self.stages;
        let mut d = LatencyDraws {
            z: Vec::with_capacity(n),
            work: Vec::with_capacity(n),
        };
        for rep in 0..self.reps {
            for trial in 0..self.trials {
                for stage in 0..self.stages {
                    let (z, w, _) = self.stream(rep, trial, stage, profile);
                    d.z.push(z);
                    d.work.push(w);
                }
            }
        }
        d
    }
}

#[derive(Debug, Clone, Copy)]
struct LatencyEval {
    oneshot: f64,
    rollover: f64,
    pass_rate: f64,
    range_err: f64,
}

fn eval_latency(
    plan: &Plan,
    d: &LatencyDraws,
    mu: f64,
    sigma: f64,
    k: usize,
    upload: f64,
    t: &CalibrationTargets,
    tol: f64,
) -> LatencyEval {
    let mut sum1 = 0.0;
    let mut sum2 = 0.0;
    let mut passed = 0;
    let mut range_err = 0.0;
    let mut one = vec![0.0; plan.trials];
    let mut roll = vec![0.0; plan.trials];
    for rep in 0..plan.reps {
        for trial in 0..plan.trials {
            let mut total = upload;
            for stage in 0..k {
                let i = plan.idx(rep, trial, stage);
                total += (mu + sigma * d.z[i]).exp() + d.work[i];
                if stage == 0 {
                    one[trial] = total;
                }
            }
            roll[trial] = total;
        }
        let (m1, m2) = (median(&one), median(&roll));
        sum1 += m1;
        sum2 += m2;
        if (m1 / t.oneshot_median_s - 1.0).abs() <= tol && (m2 / t.rollover_median_s - 1.0).abs() <= tol {
            passed += 1;
        }
        let lo_hi = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        };
        let (a, b) = lo_hi(&one);
        let (c, e) = lo_hi(&roll);
        range_err += [
            (a / t.oneshot_range[0]).ln().abs(),
            (b / t.oneshot_range[1]).ln().abs(),
            (c / t.rollover_range[0]).ln().abs(),
            (e / t.rollover_range[1]).ln().abs(),
        ]
        .iter()
        .sum::<f64>()
            / 4.0;
    }
    let n = plan.reps as f64;
    LatencyEval {
        oneshot: sum1 / n,
        rollover: sum2 / n,
        pass_rate: passed as f64 / n,
        range_err: range_err / n,
    }
}

/// `mu` balancing the two median log errors. Both medians grow with `mu`.
fn solve_mu(
    plan: &Plan,
    d: &LatencyDraws,
    sigma: f64,
    k: usize,
    upload: f64,
    t: &CalibrationTargets,
) -> f64 {
    let err = |mu: f64| {
        let e = eval_latency(plan, d, mu, sigma, k, upload, t, 0.0);
        (e.oneshot / t.oneshot_median_s).ln() + (e.rollover / t.rollover_median_s).ln()
    };
    let (mut lo, mut hi) = (-10.0, t.rollover_median_s.ln() + 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if err(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy)]
struct QualityEval {
    mse_ratio: f64,
    std_ratio: f64,
    pass_rate: f64,
    directional: f64,
}

fn eval_quality(
    plan: &Plan,
    profile: &CrowdProfile,
    k: usize,
    t: &CalibrationTargets,
    tol: f64,
) -> QualityEval {
    let probe = SimulatedBackend::new(profile.clone(), 0);
    let (w, h) = (profile.scene.width, profile.scene.height);
    let truth = probe.truth_for(w as u32, h as u32);
    let mut sum_m = 0.0;
    let mut sum_s = 0.0;
    let mut passed = 0;
    let mut directional = 0;
    let mut one = Vec::with_capacity(plan.trials);
    let mut roll = Vec::with_capacity(plan.trials);
    for rep in 0..plan.reps {
        one.clear();
        roll.clear();
        for trial in 0..plan.trials {
            let mut boxes: BoundingBox = truth;
            for stage in 0..k {
                let (_, _, mut rng) = plan.stream(rep, trial, stage, profile);
                boxes = if stage == 0 {
                    perturb_box(&truth, w, h, profile, &mut rng)
                } else {
                    refine_box(&boxes, &truth, w, h, profile, &mut rng)
                };
                if stage == 0 {
                    one.push(boxes);
                }
            }
            roll.push(boxes);
        }
        let stats = |b: &[BoundingBox]| {
            let base = mean_box(b).expect("nonempty");
            quality_stats(b, &base).expect("nonempty")
        };
        let (q1, q2) = (stats(&one), stats(&roll));
        let (mr, sr) = (q2.mse_mean / q1.mse_mean, q2.mse_std / q1.mse_std);
        sum_m += mr;
        sum_s += sr;
        if (mr - t.mse_ratio).abs() <= tol && (sr - t.std_ratio).abs() <= tol {
            passed += 1;
        }
        if mr < 1.0 && sr < 1.0 {
            directional += 1;
        }
    }
    let n = plan.reps as f64;
    QualityEval {
        mse_ratio: sum_m / n,
        std_ratio: sum_s / n,
        pass_rate: passed as f64 / n,
        directional: directional as f64 / n,
    }
}

struct Candidate {
    score: f64,
    profile: CrowdProfile,
    summary: FitSummary,
}

/// Fits a profile named "paper2016" to `targets`, searching chain lengths
/// `1..=targets.max_stages` (at least 2 when a rollover chain is possible).
pub fn calibrate(
    targets: &CalibrationTargets,
    grid: &CalibrationGrid,
    seed: u64,
) -> Result<CalibrationFit, CalibrationError> {
    targets.validate()?;
    grid.validate()?;
    let max_k = targets.max_stages.max(2);
    let plan = Plan::new(seed, grid.replications, grid.trials, max_k);
    let tol = grid.latency_tolerance;
    let upload = grid.upload_overhead_s;

    let mut best: Option<Candidate> = None;
    let mut nearest = String::from("none evaluated");
    let mut nearest_score = f64::INFINITY;

    for &wm in &grid.work_mean {
        for &ws in &grid.work_sigma {
            let mut base = CrowdProfile {
                name: "paper2016".into(),
                work_duration_mean: wm,
                work_duration_sigma: ws,
                upload_overhead_s: upload,
                calibration_seed: Some(seed),
                ..CrowdProfile::default()
            };
            let draws = plan.latency_draws(&base);
            for k in 2..=max_k as usize {
                // Latency: best sigma for this (work, k).
                let mut lat: Option<(f64, f64, f64, LatencyEval)> = None;
                for &sigma in &grid.find_log_sigma {
                    let mu = if sigma == 0.0 && ws == 0.0 {
                        closed_form_mu(targets, wm, upload)
                    } else {
                        solve_mu(&plan, &draws, sigma, k, upload, targets)
                    };
                    if !mu.is_finite() {
                        continue;
                    }
                    let e = eval_latency(&plan, &draws, mu, sigma, k, upload, targets, tol);
                    let score = (1.0 - e.pass_rate) + 0.1 * e.range_err;
                    let ok = (e.oneshot / targets.oneshot_median_s - 1.0).abs() <= tol
                        && (e.rollover / targets.rollover_median_s - 1.0).abs() <= tol;
                    if !ok {
                        if score + 10.0 < nearest_score {
                            nearest_score = score + 10.0;
                            nearest = format!(
                                "k={k} sigma={sigma} work={wm}/{ws}: medians {:.1}s / {:.1}s",
                                e.oneshot, e.rollover
                            );
                        }
                        continue;
                    }
                    if lat.as_ref().is_none_or(|l| score < l.0) {
                        lat = Some((score, mu, sigma, e));
                    }
                }
                let Some((lat_score, mu, sigma, le)) = lat else {
                    continue;
                };
                base.find_latency_log_mu = mu;
                base.find_latency_log_sigma = sigma;
                base.rollover_stages = k as u32;

                for &cn in &grid.coord_noise {
                    for &g in &grid.gross_error_prob {
                        for &gain in &grid.rollover_gain {
                            for &rr in &grid.rollover_noise_ratio {
                                let mut p = base.clone();
                                p.coord_noise_sigma = cn;
                                p.gross_error_prob = g;
                                p.rollover_gain = gain;
                                p.rollover_noise_sigma = cn * rr;
                                if p.validate().is_err() {
                                    continue;
                                }
                                let q = eval_quality(&plan, &p, k, targets, grid.ratio_tolerance);
                                let ok = (q.mse_ratio - targets.mse_ratio).abs() <= grid.ratio_tolerance
                                    && (q.std_ratio - targets.std_ratio).abs() <= grid.ratio_tolerance;
                                let score = lat_score + (1.0 - q.pass_rate) + (1.0 - q.directional);
                                if !ok {
                                    if score + 5.0 < nearest_score {
                                        nearest_score = score + 5.0;
                                        nearest = format!(
                                            "k={k} gain={gain} gross={g}: ratios {:.3} / {:.3}",
                                            q.mse_ratio, q.std_ratio
                                        );
                                    }
                                    continue;
                                }
                                if best.as_ref().is_none_or(|b| score < b.score) {
                                    best = Some(Candidate {
                                        score,
                                        profile: p,
                                        summary: FitSummary {
                                            oneshot_median_s: le.oneshot,
                                            rollover_median_s: le.rollover,
                                            mse_ratio: q.mse_ratio,
                                            std_ratio: q.std_ratio,
                                            latency_pass_rate: le.pass_rate,
                                            quality_pass_rate: q.pass_rate,
                                        },
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let Some(best) = best else {
        return Err(CalibrationError::NonConvergence { best: nearest });
    };
    let verification = verify(&best.profile, targets, grid, seed)?;
    Ok(CalibrationFit {
        profile: best.profile,
        seed,
        summary: best.summary,
        verification,
    })
}

/// Zero-variance crowd: the one-shot round trip is exactly upload + find + work.
fn closed_form_mu(t: &CalibrationTargets, work: f64, upload: f64) -> f64 {
    let find = t.oneshot_median_s - upload - work;
    if find > 0.0 {
        find.ln()
    } else {
        f64::NAN
    }
}

/// Runs `profile` through the experiment harness once per strategy.
pub fn verify(
    profile: &CrowdProfile,
    targets: &CalibrationTargets,
    grid: &CalibrationGrid,
    seed: u64,
) -> Result<FitSummary, CalibrationError> {
    let one = run_experiment(&StrategyConfig::one_shot(), profile, grid.trials, seed)?;
    let roll = run_experiment(
        &StrategyConfig::rollover(profile.rollover_stages, 0.0),
        profile,
        grid.trials,
        seed,
    )?;
    let lat_ok = (one.latency_median / targets.oneshot_median_s - 1.0).abs() <= grid.latency_tolerance
        && (roll.latency_median / targets.rollover_median_s - 1.0).abs() <= grid.latency_tolerance;
    let mr = roll.mse_mean / one.mse_mean;
    let sr = roll.mse_std / one.mse_std;
    let q_ok = (mr - targets.mse_ratio).abs() <= grid.ratio_tolerance
        && (sr - targets.std_ratio).abs() <= grid.ratio_tolerance;
    Ok(FitSummary {
        oneshot_median_s: one.latency_median,
        rollover_median_s: roll.latency_median,
        mse_ratio: mr,
        std_ratio: sr,
        latency_pass_rate: f64::from(u8::from(lat_ok)),
        quality_pass_rate: f64::from(u8::from(q_ok)),
    })
}
