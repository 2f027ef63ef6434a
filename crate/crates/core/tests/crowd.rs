use nimbus_core::crowd::{perturb_box, refine_box, CrowdProfile};
use nimbus_core::geometry::{box_mse, BoundingBox};
use nimbus_core::rng::{derive_seed, rng_from_seed};
use proptest::prelude::*;

const W: f64 = 640.0;
const H: f64 = 480.0;

fn truth() -> BoundingBox {
    BoundingBox::new(220.0, 160.0, 420.0, 320.0).unwrap()
}

/// Expected per-coordinate squared error after `k` corrections.
fn geometric(gain: f64, sigma: f64, e0: f64, k: i32) -> f64 {
    let g2k = gain.powi(2 * k);
    g2k * e0 * e0 + sigma * sigma * (1.0 - g2k) / (1.0 - gain * gain)
}

#[test]
fn refine_error_follows_geometric_series() {
    let p = CrowdProfile {
        rollover_gain: 0.5,
        rollover_noise_sigma: 2.0,
        ..CrowdProfile::default()
    };
    let t = truth();
    let start = t.translate(8.0, 8.0);
    let runs = 10_000;
    let mut sums = [0.0; 6];
    for run in 0..runs {
        let mut rng = rng_from_seed(derive_seed(42, run));
        let mut b = start;
        for s in sums.iter_mut() {
            b = refine_box(&b, &t, W, H, &p, &mut rng);
            *s += box_mse(&b, &t);
        }
    }
    for (k, s) in sums.iter().enumerate() {
        let empirical = s / runs as f64;
        let expected = geometric(0.5, 2.0, 8.0, k as i32 + 1);
        assert!(
            (empirical / expected - 1.0).abs() < 0.1,
            "stage {}: {empirical} vs {expected}",
            k + 1
        );
    }
}

#[test]
fn contraction_is_monotone_below_the_noise_bound() {
    // rollover noise below coord_noise * sqrt(1 - gain^2) makes each stage no worse.
    let p = CrowdProfile {
        coord_noise_sigma: 12.0,
        gross_error_prob: 0.0,
        rollover_gain: 0.8,
        rollover_noise_sigma: 5.0,
        ..CrowdProfile::default()
    };
    assert!(p.rollover_noise_sigma < p.coord_noise_sigma * (1.0 - 0.64f64).sqrt());
    let t = truth();
    let runs = 10_000;
    let mut sums = [0.0; 6];
    for run in 0..runs {
        let mut rng = rng_from_seed(derive_seed(7, run));
        let mut b = perturb_box(&t, W, H, &p, &mut rng);
        sums[0] += box_mse(&b, &t);
        for s in sums.iter_mut().skip(1) {
            b = refine_box(&b, &t, W, H, &p, &mut rng);
            *s += box_mse(&b, &t);
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / runs as f64).collect();
    for (k, m) in means.iter().enumerate() {
        let expected = geometric(0.8, 5.0, 12.0, k as i32);
        assert!((m / expected - 1.0).abs() < 0.1, "stage {k}: {m} vs {expected}");
    }
    for w in means.windows(2) {
        assert!(w[1] <= w[0] * 1.02, "{means:?}");
    }
}

proptest! {
    #[test]
    fn sampled_boxes_stay_in_bounds(seed in any::<u64>(), noise in 0.0f64..400.0, gross in 0.0f64..1.0, gain in 0.0f64..0.99) {
        let p = CrowdProfile {
            coord_noise_sigma: noise,
            gross_error_prob: gross,
            rollover_gain: gain,
            rollover_noise_sigma: noise,
            ..CrowdProfile::default()
        };
        let mut rng = rng_from_seed(seed);
        let t = truth();
        let mut b = perturb_box(&t, W, H, &p, &mut rng);
        for _ in 0..5 {
            prop_assert!(b.is_valid() && b.fits_within(W, H), "{b:?}");
            b = refine_box(&b, &t, W, H, &p, &mut rng);
        }
        prop_assert!(b.is_valid() && b.fits_within(W, H));
    }

    #[test]
    fn sampled_latencies_are_positive(seed in any::<u64>(), mu in -3.0f64..6.0, sigma in 0.0f64..3.0, wm in -50.0f64..100.0, ws in 0.0f64..60.0) {
        let p = CrowdProfile {
            find_latency_log_mu: mu,
            find_latency_log_sigma: sigma,
            work_duration_mean: wm,
            work_duration_sigma: ws,
            ..CrowdProfile::default()
        };
        let mut rng = rng_from_seed(seed);
        for _ in 0..20 {
            prop_assert!(nimbus_core::crowd::sample_find_latency(&p, &mut rng) > 0.0);
            prop_assert!(nimbus_core::crowd::sample_work_duration(&p, &mut rng) >= 1.0);
        }
    }
}
