use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

use super::{CrowdProfile, MIN_WORK_S};
use crate::geometry::{clamp_box, BoundingBox};

/// Delay until some worker accepts a posting, seconds.
pub fn sample_find_latency<R: Rng + ?Sized>(profile: &CrowdProfile, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (profile.find_latency_log_mu + profile.find_latency_log_sigma * z).exp()
}

/// Time a worker spends labeling, seconds, never below [`MIN_WORK_S`].
pub fn sample_work_duration<R: Rng + ?Sized>(profile: &CrowdProfile, rng: &mut R) -> f64 {
    truncated_normal_above(
        profile.work_duration_mean,
        profile.work_duration_sigma,
        MIN_WORK_S,
        rng,
    )
}

/// Normal(mean, sigma) conditioned on `x >= lo`.
///
/// Plain rejection when the cut is at or left of ~0.5 sd above the mean,
/// otherwise Robert's exponential-proposal sampler for the one-sided tail.
pub(crate) fn truncated_normal_above<R: Rng + ?Sized>(
    mean: f64,
    sigma: f64,
    lo: f64,
    rng: &mut R,
) -> f64 {
    if sigma == 0.0 {
        return mean.max(lo);
    }
    let a = (lo - mean) / sigma;
    if a < 0.5 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z >= a {
                return (mean + sigma * z).max(lo);
            }
        }
    }
    let alpha = (a + (a * a + 4.0).sqrt()) / 2.0;
    loop {
        let e: f64 = rng.sample(Exp1);
        let z = a + e / alpha;
        let u: f64 = rng.random();
        if u <= (-(z - alpha) * (z - alpha) / 2.0).exp() {
            return (mean + sigma * z).max(lo);
        }
    }
}

fn uniform_box<R: Rng + ?Sized>(width: f64, height: f64, rng: &mut R) -> BoundingBox {
    let x = [rng.random::<f64>() * width, rng.random::<f64>() * width];
    let y = [rng.random::<f64>() * height, rng.random::<f64>() * height];
    BoundingBox {
        left: x[0].min(x[1]),
        top: y[0].min(y[1]),
        right: x[0].max(x[1]),
        bottom: y[0].max(y[1]),
    }
}

fn noisy<R: Rng + ?Sized>(center: [f64; 4], sigma: f64, rng: &mut R) -> [f64; 4] {
    center.map(|c| {
        let z: f64 = rng.sample(StandardNormal);
        c + sigma * z
    })
}

fn settle(coords: [f64; 4], width: f64, height: f64) -> BoundingBox {
    clamp_box(&BoundingBox::from_coords(coords).repaired(), width, height)
}

/// A fresh worker's attempt at labeling `truth`.
pub fn perturb_box<R: Rng + ?Sized>(
    truth: &BoundingBox,
    width: f64,
    height: f64,
    profile: &CrowdProfile,
    rng: &mut R,
) -> BoundingBox {
    let u: f64 = rng.random();
    if u < profile.gross_error_prob {
        return uniform_box(width, height, rng);
    }
    settle(noisy(truth.coords(), profile.coord_noise_sigma, rng), width, height)
}

/// A rollover worker's correction of `prev`: each coordinate keeps
/// `rollover_gain` of the previous error and picks up fresh noise.
pub fn refine_box<R: Rng + ?Sized>(
    prev: &BoundingBox,
    truth: &BoundingBox,
    width: f64,
    height: f64,
    profile: &CrowdProfile,
    rng: &mut R,
) -> BoundingBox {
    let g = profile.rollover_gain;
    let t = truth.coords();
    let p = prev.coords();
    let pulled = [0, 1, 2, 3].map(|i| t[i] + g * (p[i] - t[i]));
    settle(noisy(pulled, profile.rollover_noise_sigma, rng), width, height)
}
