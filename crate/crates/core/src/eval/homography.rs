//! Metrics for image pairs related by a known homography.

use nalgebra::{Matrix3, Vector3};

use crate::detector::Keypoint;
use crate::error::{Error, Result};

use super::matching::MatchSet;

pub const MMA_THRESHOLDS: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];

/// Image size as `(width, height)` in pixels.
pub type Size = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyGt {
    /// Maps image A to image B, scaled so `h[(2, 2)] = 1`.
    pub h: Matrix3<f64>,
    pub h_inv: Matrix3<f64>,
    pub size_a: Size,
    pub size_b: Size,
}

impl HomographyGt {
    pub fn new(h: Matrix3<f64>, size_a: Size, size_b: Size) -> Result<Self> {
        if h.iter().any(|v| !v.is_finite()) || h[(2, 2)].abs() < 1e-12 {
            return Err(Error::validation("homography must be finite with nonzero h33"));
        }
        let h = h / h[(2, 2)];
        if h.determinant().abs() <= 1e-12 {
            return Err(Error::singular("homography is not invertible"));
        }
        let h_inv = h.try_inverse().ok_or_else(|| Error::singular("homography is not invertible"))?;
        Ok(Self { h, h_inv, size_a, size_b })
    }
}

/// Projective transform of `(x, y)`; `None` when the denominator vanishes.
pub fn warp_homography(h: &Matrix3<f64>, x: f64, y: f64) -> Option<(f64, f64)> {
    let p = h * Vector3::new(x, y, 1.0);
    if p.z.abs() <= 1e-12 {
        return None;
    }
    Some((p.x / p.z, p.y / p.z))
}

pub fn inside(p: (f64, f64), size: Size) -> bool {
    p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (size.0 as f64 - 1.0) && p.1 <= (size.1 as f64 - 1.0)
}

fn point(k: &Keypoint) -> (f64, f64) {
    (k.x as f64, k.y as f64)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Warps of the keypoints that land inside the other image.
fn shared(kps: &[Keypoint], h: &Matrix3<f64>, target: Size) -> Vec<(f64, f64)> {
    kps.iter()
        .filter_map(|k| warp_homography(h, k.x as f64, k.y as f64))
        .filter(|p| inside(*p, target))
        .collect()
}

/// Shared-view counts and the symmetric count of possible matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overlap {
    pub shared_a: usize,
    pub shared_b: usize,
    /// Keypoints of A (warped into B) within the threshold of some keypoint of B.
    pub covered_a: usize,
    /// Keypoints of B (warped into A) within the threshold of some keypoint of A.
    pub covered_b: usize,
}

impl Overlap {
    pub fn possible(&self) -> usize {
        self.covered_a.min(self.covered_b)
    }

    pub fn min_shared(&self) -> usize {
        self.shared_a.min(self.shared_b)
    }
}

pub fn overlap(kp_a: &[Keypoint], kp_b: &[Keypoint], gt: &HomographyGt, threshold: f64) -> Overlap {
    let wa = shared(kp_a, &gt.h, gt.size_b);
    let wb = shared(kp_b, &gt.h_inv, gt.size_a);
    let pb: Vec<(f64, f64)> = kp_b.iter().map(point).collect();
    let pa: Vec<(f64, f64)> = kp_a.iter().map(point).collect();
    let covered = |warped: &[(f64, f64)], other: &[(f64, f64)]| {
        warped
            .iter()
            .filter(|w| other.iter().any(|o| dist(**w, *o) <= threshold))
            .count()
    };
    Overlap {
        shared_a: wa.len(),
        shared_b: wb.len(),
        covered_a: covered(&wa, &pb),
        covered_b: covered(&wb, &pa),
    }
}

fn percent(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Possible matches over the smaller shared-view keypoint count, in percent.
pub fn repeatability(kp_a: &[Keypoint], kp_b: &[Keypoint], gt: &HomographyGt, threshold: f64) -> Option<f64> {
    let o = overlap(kp_a, kp_b, gt, threshold);
    percent(o.possible(), o.min_shared())
}

/// Matches whose A-side keypoint warps to within `threshold` of its B-side keypoint.
pub fn correct_matches(
    matches: &MatchSet,
    kp_a: &[Keypoint],
    kp_b: &[Keypoint],
    gt: &HomographyGt,
    threshold: f64,
) -> usize {
    matches
        .matches
        .iter()
        .filter(|m| {
            warp_homography(&gt.h, kp_a[m.a].x as f64, kp_a[m.a].y as f64)
                .is_some_and(|w| dist(w, point(&kp_b[m.b])) < threshold)
        })
        .count()
}

/// Correct matches over the smaller shared-view keypoint count, in percent.
pub fn matching_score(
    matches: &MatchSet,
    kp_a: &[Keypoint],
    kp_b: &[Keypoint],
    gt: &HomographyGt,
    threshold: f64,
) -> Option<f64> {
    let o = overlap(kp_a, kp_b, gt, threshold);
    percent(correct_matches(matches, kp_a, kp_b, gt, threshold), o.min_shared())
}

/// Correct matches over all putative matches, in percent.
pub fn mma(matches: &MatchSet, kp_a: &[Keypoint], kp_b: &[Keypoint], gt: &HomographyGt, threshold: f64) -> Option<f64> {
    percent(correct_matches(matches, kp_a, kp_b, gt, threshold), matches.len())
}

pub fn mma_curve(
    matches: &MatchSet,
    kp_a: &[Keypoint],
    kp_b: &[Keypoint],
    gt: &HomographyGt,
    thresholds: &[f64],
) -> Vec<Option<f64>> {
    thresholds
        .iter()
        .map(|t| mma(matches, kp_a, kp_b, gt, *t))
        .collect()
}
