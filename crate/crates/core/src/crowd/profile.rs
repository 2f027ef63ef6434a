use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile io: {0}")]
    Io(#[from] std::io::Error),
    #[error("profile parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("profile serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid profile: {0}")]
    Invalid(String),
}

/// The image a simulated crowd labels, with the box a perfect worker would draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: f64,
    pub height: f64,
    pub truth: BoundingBox,
}

impl Default for Scene {
    fn default() -> Self {
        Self {
            width: 640.0,
            height: 480.0,
            truth: BoundingBox {
                left: 220.0,
                top: 160.0,
                right: 420.0,
                bottom: 320.0,
            },
        }
    }
}

/// Calibration parameters describing simulated worker latency and error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdProfile {
    pub name: String,
    /// Log-normal "find a participant" delay, parameters of ln(seconds).
    pub find_latency_log_mu: f64,
    pub find_latency_log_sigma: f64,
    /// Labeling duration, normal truncated at [`MIN_WORK_S`](super::MIN_WORK_S).
    pub work_duration_mean: f64,
    pub work_duration_sigma: f64,
    /// Per-coordinate Gaussian annotation error, px.
    pub coord_noise_sigma: f64,
    /// Probability of a uniformly random box instead of a genuine attempt.
    pub gross_error_prob: f64,
    /// Fraction of the previous box's error kept by a rollover correction.
    pub rollover_gain: f64,
    /// Fresh per-coordinate noise added at each rollover stage, px.
    pub rollover_noise_sigma: f64,
    pub reward_cents: u32,
    /// Rollover chain length used by experiments run against this profile.
    pub rollover_stages: u32,
    /// Snapshot upload and wrapping delay before the first posting is visible.
    pub upload_overhead_s: f64,
    pub scene: Scene,
    pub calibration_seed: Option<u64>,
}

impl Default for CrowdProfile {
    fn default() -> Self {
        Self {
            name: "default".into(),
            find_latency_log_mu: 20f64.ln(),
            find_latency_log_sigma: 1.0,
            work_duration_mean: 45.0,
            work_duration_sigma: 15.0,
            coord_noise_sigma: 10.0,
            gross_error_prob: 0.05,
            rollover_gain: 0.5,
            rollover_noise_sigma: 3.0,
            reward_cents: 25,
            rollover_stages: 5,
            upload_overhead_s: 2.0,
            scene: Scene::default(),
            calibration_seed: None,
        }
    }
}

const PAPER2016: &str = include_str!("../../../../profiles/paper2016.toml");

impl CrowdProfile {
    /// The checked-in profile fitted to the reference latency and quality figures.
    pub fn paper2016() -> Self {
        Self::from_toml_str(PAPER2016).expect("shipped paper2016 profile is valid")
    }

    /// Zero-variance crowd: every worker is found after `find_s`, works for
    /// `work_s`, and draws the true box.
    pub fn deterministic(find_s: f64, work_s: f64) -> Self {
        Self {
            name: "deterministic".into(),
            find_latency_log_mu: find_s.ln(),
            find_latency_log_sigma: 0.0,
            work_duration_mean: work_s,
            work_duration_sigma: 0.0,
            coord_noise_sigma: 0.0,
            gross_error_prob: 0.0,
            rollover_gain: 0.0,
            rollover_noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let sigmas = [
            ("find_latency_log_sigma", self.find_latency_log_sigma),
            ("work_duration_sigma", self.work_duration_sigma),
            ("coord_noise_sigma", self.coord_noise_sigma),
            ("rollover_noise_sigma", self.rollover_noise_sigma),
        ];
        for (name, v) in sigmas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ProfileError::Invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !self.find_latency_log_mu.is_finite() || !self.work_duration_mean.is_finite() {
            return Err(ProfileError::Invalid("latency parameters must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.gross_error_prob) {
            return Err(ProfileError::Invalid(format!(
                "gross_error_prob must be in [0, 1], got {}",
                self.gross_error_prob
            )));
        }
        if !(0.0..1.0).contains(&self.rollover_gain) {
            return Err(ProfileError::Invalid(format!(
                "rollover_gain must be in [0, 1), got {}",
                self.rollover_gain
            )));
        }
        if !(self.upload_overhead_s >= 0.0) {
            return Err(ProfileError::Invalid("upload_overhead_s must be >= 0".into()));
        }
        if self.rollover_stages < 2 {
            return Err(ProfileError::Invalid("rollover_stages must be >= 2".into()));
        }
        let s = &self.scene;
        if !(s.width >= 1.0 && s.height >= 1.0) || !s.truth.fits_within(s.width, s.height) {
            return Err(ProfileError::Invalid("scene truth box must lie inside the scene".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ProfileError> {
        let file: ProfileFile = toml::from_str(text)?;
        let profile = Self::from(file);
        profile.validate()?;
        Ok(profile)
    }

    pub fn to_toml_string(&self) -> Result<String, ProfileError> {
        let mut out = String::from("# nimbus crowd profile\n");
        if let Some(seed) = self.calibration_seed {
            out.push_str(&format!("# produced by `nimbus calibrate --seed {seed}`\n"));
        }
        out.push_str(&toml::to_string(&ProfileFile::from(self))?);
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProfileError> {
        fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

/// On-disk layout: one flat table of scalar keys.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    name: String,
    find_latency_log_mu: f64,
    find_latency_log_sigma: f64,
    work_duration_mean: f64,
    work_duration_sigma: f64,
    coord_noise_sigma: f64,
    gross_error_prob: f64,
    rollover_gain: f64,
    rollover_noise_sigma: f64,
    reward_cents: u32,
    rollover_stages: u32,
    upload_overhead_s: f64,
    scene_width: f64,
    scene_height: f64,
    truth_left: f64,
    truth_top: f64,
    truth_right: f64,
    truth_bottom: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    calibration_seed: Option<u64>,
}

impl From<ProfileFile> for CrowdProfile {
    fn from(f: ProfileFile) -> Self {
        Self {
            name: f.name,
            find_latency_log_mu: f.find_latency_log_mu,
            find_latency_log_sigma: f.find_latency_log_sigma,
            work_duration_mean: f.work_duration_mean,
            work_duration_sigma: f.work_duration_sigma,
            coord_noise_sigma: f.coord_noise_sigma,
            gross_error_prob: f.gross_error_prob,
            rollover_gain: f.rollover_gain,
            rollover_noise_sigma: f.rollover_noise_sigma,
            reward_cents: f.reward_cents,
            rollover_stages: f.rollover_stages,
            upload_overhead_s: f.upload_overhead_s,
            scene: Scene {
                width: f.scene_width,
                height: f.scene_height,
                truth: BoundingBox {
                    left: f.truth_left,
                    top: f.truth_top,
                    right: f.truth_right,
                    bottom: f.truth_bottom,
                },
            },
            calibration_seed: f.calibration_seed,
        }
    }
}

impl From<&CrowdProfile> for ProfileFile {
    fn from(p: &CrowdProfile) -> Self {
        Self {
            name: p.name.clone(),
            find_latency_log_mu: p.find_latency_log_mu,
            find_latency_log_sigma: p.find_latency_log_sigma,
            work_duration_mean: p.work_duration_mean,
            work_duration_sigma: p.work_duration_sigma,
            coord_noise_sigma: p.coord_noise_sigma,
            gross_error_prob: p.gross_error_prob,
            rollover_gain: p.rollover_gain,
            rollover_noise_sigma: p.rollover_noise_sigma,
            reward_cents: p.reward_cents,
            rollover_stages: p.rollover_stages,
            upload_overhead_s: p.upload_overhead_s,
            scene_width: p.scene.width,
            scene_height: p.scene.height,
            truth_left: p.scene.truth.left,
            truth_top: p.scene.truth.top,
            truth_right: p.scene.truth.right,
            truth_bottom: p.scene.truth.bottom,
            calibration_seed: p.calibration_seed,
        }
    }
}
