//! Axis-aligned bounding boxes and the quality metrics used to score crowd
//! labels against a reference box.
//!
//! All functions here are pure. Coordinates are real-valued pixels with the
//! image origin at the top-left corner.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("operation requires at least one box")]
    EmptySet,
    #[error("invalid box ({left}, {top}, {right}, {bottom})")]
    InvalidBox {
        left: f64,
        top: f64,
        right: f64,
        bottom: f64,
    },
    #[error("outlier threshold must be positive, got {0}")]
    InvalidThreshold(f64),
}

/// An axis-aligned rectangle in image pixel coordinates.
///
/// A valid box has finite coordinates with `left <= right` and
/// `top <= bottom`. Zero-area boxes are valid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl BoundingBox {
    /// Builds a box, rejecting inverted or non-finite coordinates.
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Result<Self, GeometryError> {
        let b = Self {
            left,
            top,
            right,
            bottom,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(GeometryError::InvalidBox {
                left,
                top,
                right,
                bottom,
            })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.coords().iter().all(|c| c.is_finite())
            && self.left <= self.right
            && self.top <= self.bottom
    }

    /// True when the box is valid and lies inside a `width` x `height` image.
    pub fn fits_within(&self, width: f64, height: f64) -> bool {
        self.is_valid()
            && self.left >= 0.0
            && self.top >= 0.0
            && self.right <= width
            && self.bottom <= height
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.left, self.top, self.right, self.bottom]
    }

    pub(crate) fn from_coords(c: [f64; 4]) -> Self {
        Self {
            left: c[0],
            top: c[1],
            right: c[2],
            bottom: c[3],
        }
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            left: self.left + dx,
            top: self.top + dy,
            right: self.right + dx,
            bottom: self.bottom + dy,
        }
    }

    /// Swaps inverted edges so the box satisfies the ordering invariant.
    pub fn repaired(&self) -> Self {
        Self {
            left: self.left.min(self.right),
            top: self.top.min(self.bottom),
            right: self.left.max(self.right),
            bottom: self.top.max(self.bottom),
        }
    }
}

/// Summary of per-box squared error against a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityStats {
    /// Mean of the per-box MSE values, px².
    pub mse_mean: f64,
    /// Sample standard deviation (n-1) of the per-box MSE values; 0 when n = 1.
    pub mse_std: f64,
    pub n: usize,
}

/// Coordinate-wise arithmetic mean of a set of boxes.
pub fn mean_box(boxes: &[BoundingBox]) -> Result<BoundingBox, GeometryError> {
    if boxes.is_empty() {
        return Err(GeometryError::EmptySet);
    }
    let n = boxes.len() as f64;
    let mut acc = [0.0; 4];
    for b in boxes {
        for (a, c) in acc.iter_mut().zip(b.coords()) {
            *a += c;
        }
    }
    // Rounding can break left <= right by an ulp for degenerate inputs.
    Ok(BoundingBox::from_coords(acc.map(|s| s / n)).repaired())
}

/// Mean over the four edge coordinates of the squared deviation, px².
pub fn box_mse(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.coords()
        .iter()
        .zip(b.coords())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / 4.0
}

fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn quality_stats(
    boxes: &[BoundingBox],
    baseline: &BoundingBox,
) -> Result<QualityStats, GeometryError> {
    if boxes.is_empty() {
        return Err(GeometryError::EmptySet);
    }
    let errors: Vec<f64> = boxes.iter().map(|b| box_mse(b, baseline)).collect();
    let (mse_mean, mse_std) = mean_and_sample_std(&errors);
    Ok(QualityStats {
        mse_mean,
        mse_std,
        n: boxes.len(),
    })
}

/// Drops boxes whose MSE to the set's mean box exceeds
/// `mean + z_threshold * std` of the MSE distribution (sample std).
///
/// Survivors keep their input order. The result is never empty: if every box
/// would be rejected, the single box closest to the mean box is returned.
pub fn filter_outliers(
    boxes: &[BoundingBox],
    z_threshold: f64,
) -> Result<Vec<BoundingBox>, GeometryError> {
    if !(z_threshold > 0.0) {
        return Err(GeometryError::InvalidThreshold(z_threshold));
    }
    let baseline = mean_box(boxes)?;
    let errors: Vec<f64> = boxes.iter().map(|b| box_mse(b, &baseline)).collect();
    let (mean, std) = mean_and_sample_std(&errors);
    let cutoff = mean + z_threshold * std;

    let survivors: Vec<BoundingBox> = boxes
        .iter()
        .zip(&errors)
        .filter(|(_, e)| **e <= cutoff)
        .map(|(b, _)| *b)
        .collect();
    if !survivors.is_empty() {
        return Ok(survivors);
    }
    let best = errors
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| boxes[i])
        .ok_or(GeometryError::EmptySet)?;
    Ok(vec![best])
}

/// Clips a box into `[0, width] x [0, height]`.
pub fn clamp_box(b: &BoundingBox, width: f64, height: f64) -> BoundingBox {
    let b = b.repaired();
    BoundingBox {
        left: b.left.clamp(0.0, width),
        top: b.top.clamp(0.0, height),
        right: b.right.clamp(0.0, width),
        bottom: b.bottom.clamp(0.0, height),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(l: f64, t: f64, r: f64, b: f64) -> BoundingBox {
        BoundingBox::new(l, t, r, b).unwrap()
    }

    #[test]
    fn new_rejects_inverted() {
        assert!(BoundingBox::new(10.0, 0.0, 5.0, 5.0).is_err());
        assert!(BoundingBox::new(0.0, 10.0, 5.0, 5.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 5.0).is_err());
        assert!(BoundingBox::new(3.0, 3.0, 3.0, 3.0).is_ok());
    }

    #[test]
    fn mean_box_examples() {
        let single = bb(5.0, 5.0, 20.0, 20.0);
        assert_eq!(mean_box(&[single]).unwrap(), single);
        let m = mean_box(&[bb(0.0, 0.0, 10.0, 10.0), bb(2.0, 2.0, 12.0, 12.0)]).unwrap();
        assert_eq!(m, bb(1.0, 1.0, 11.0, 11.0));
        assert_eq!(mean_box(&[]), Err(GeometryError::EmptySet));
    }

    #[test]
    fn mean_box_recovers_truth_under_noise() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 3.0).unwrap();
        let boxes: Vec<_> = (0..100)
            .map(|_| {
                BoundingBox::from_coords([10.0, 10.0, 50.0, 50.0].map(|c| c + noise.sample(&mut rng)))
                    .repaired()
            })
            .collect();
        let m = mean_box(&boxes).unwrap();
        for (got, want) in m.coords().iter().zip([10.0, 10.0, 50.0, 50.0]) {
            assert!((got - want).abs() < 1.0, "{got} vs {want}");
        }
    }

    #[test]
    fn box_mse_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(box_mse(&a, &a), 0.0);
        assert_eq!(box_mse(&a, &bb(1.0, 1.0, 11.0, 11.0)), 1.0);
        assert_eq!(box_mse(&a, &bb(2.0, 0.0, 10.0, 10.0)), 1.0);
    }

    #[test]
    fn quality_stats_identical() {
        let b = bb(1.0, 2.0, 3.0, 4.0);
        let q = quality_stats(&[b, b], &b).unwrap();
        assert_eq!(
            q,
            QualityStats {
                mse_mean: 0.0,
                mse_std: 0.0,
                n: 2
            }
        );
        let one = quality_stats(&[bb(0.0, 0.0, 2.0, 2.0)], &b).unwrap();
        assert_eq!(one.mse_std, 0.0);
        assert_eq!(quality_stats(&[], &b), Err(GeometryError::EmptySet));
    }

    #[test]
    fn quality_stats_hand_listed() {
        // Per-box MSE values worked out by hand: 0, 1, 4, 0.25, 9.
        let base = bb(10.0, 10.0, 20.0, 20.0);
        let boxes = [
            bb(10.0, 10.0, 20.0, 20.0),
            bb(11.0, 11.0, 21.0, 21.0),
            bb(8.0, 8.0, 18.0, 18.0),
            bb(10.5, 10.5, 20.5, 20.5),
            bb(7.0, 7.0, 17.0, 17.0),
        ];
        let q = quality_stats(&boxes, &base).unwrap();
        assert!((q.mse_mean - 2.85).abs() < 1e-12);
        // frozen from an independent statistics.stdev computation
        assert!((q.mse_std - 3.78978891232744).abs() < 1e-12);
    }

    #[test]
    fn filter_removes_gross_box() {
        let mut boxes: Vec<_> = (0..9)
            .map(|i| {
                let d = (i as f64 - 4.0) * 0.5;
                bb(10.0 + d, 10.0 - d, 50.0 + d, 50.0 - d * 0.5)
            })
            .collect();
        boxes.insert(4, bb(200.0, 200.0, 300.0, 300.0));
        let kept = filter_outliers(&boxes, 2.0).unwrap();
        assert_eq!(kept.len(), 9);
        assert!(!kept.contains(&bb(200.0, 200.0, 300.0, 300.0)));
        let expected: Vec<_> = boxes.iter().copied().filter(|b| b.left < 100.0).collect();
        assert_eq!(kept, expected);
    }

    #[test]
    fn filter_identical_and_pairs() {
        let b = bb(1.0, 1.0, 5.0, 5.0);
        assert_eq!(filter_outliers(&[b; 4], 2.0).unwrap(), vec![b; 4]);
        let pair = [bb(0.0, 0.0, 10.0, 10.0), bb(30.0, 30.0, 90.0, 90.0)];
        assert_eq!(filter_outliers(&pair, 2.0).unwrap(), pair.to_vec());
        assert!(filter_outliers(&pair, 0.0).is_err());
        assert_eq!(filter_outliers(&[], 2.0), Err(GeometryError::EmptySet));
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(
            clamp_box(&bb(-5.0, -5.0, 10.0, 10.0), 100.0, 100.0),
            bb(0.0, 0.0, 10.0, 10.0)
        );
        let inside = bb(3.0, 4.0, 50.0, 60.0);
        assert_eq!(clamp_box(&inside, 100.0, 100.0), inside);
        assert_eq!(
            clamp_box(&bb(50.0, 50.0, 150.0, 150.0), 100.0, 100.0),
            bb(50.0, 50.0, 100.0, 100.0)
        );
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-500.0..500.0f64, -500.0..500.0f64, 0.0..300.0f64, 0.0..300.0f64)
            .prop_map(|(l, t, w, h)| bb(l, t, l + w, t + h))
    }

    proptest! {
        #[test]
        fn mean_box_singleton_identity(b in arb_box()) {
            prop_assert_eq!(mean_box(&[b]).unwrap(), b);
        }

        #[test]
        fn mean_box_translation_equivariant(
            boxes in prop::collection::vec(arb_box(), 1..20),
            dx in -100.0..100.0f64,
            dy in -100.0..100.0f64,
        ) {
            let shifted: Vec<_> = boxes.iter().map(|b| b.translate(dx, dy)).collect();
            let lhs = mean_box(&shifted).unwrap();
            let rhs = mean_box(&boxes).unwrap().translate(dx, dy);
            for (a, b) in lhs.coords().iter().zip(rhs.coords()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn box_mse_symmetric_and_translation_invariant(
            a in arb_box(), b in arb_box(), dx in -50.0..50.0f64, dy in -50.0..50.0f64,
        ) {
            let ab = box_mse(&a, &b);
            prop_assert_eq!(ab, box_mse(&b, &a));
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab == 0.0, a == b);
            let shifted = box_mse(&a.translate(dx, dy), &b.translate(dx, dy));
            prop_assert!((shifted - ab).abs() <= 1e-9 * ab.max(1.0));
        }

        #[test]
        fn filter_output_is_nonempty_subset(
            boxes in prop::collection::vec(arb_box(), 1..15), z in 0.1..4.0f64,
        ) {
            let kept = filter_outliers(&boxes, z).unwrap();
            prop_assert!(!kept.is_empty());
            prop_assert!(kept.iter().all(|k| boxes.contains(k)));
        }

        #[test]
        fn clamp_stays_in_bounds(b in arb_box(), w in 1.0..800.0f64, h in 1.0..800.0f64) {
            let c = clamp_box(&b, w, h);
            prop_assert!(c.fits_within(w, h));
        }
    }
}
