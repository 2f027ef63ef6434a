//! Seedable model of crowd workers: how long until someone accepts a
//! posting, how long they work, and how far off their box is.

mod calibrate;
mod profile;
mod sampling;

pub use calibrate::{
    calibrate, CalibrationError, CalibrationFit, CalibrationGrid, CalibrationTargets,
};
pub use profile::{CrowdProfile, ProfileError, Scene};
pub use sampling::{perturb_box, refine_box, sample_find_latency, sample_work_duration};

/// Shortest possible labeling duration, seconds.
pub const MIN_WORK_S: f64 = 1.0;
