//! Fundamental-matrix estimation and epipolar metrics.
//!
//! Distances are "normalized": pixel coordinates are divided by the image
//! diagonal before the symmetric epipolar distance is evaluated.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::homography::Size;

pub type Point = (f64, f64);

pub const DEFAULT_RANSAC_ITERATIONS: usize = 2000;
pub const DEFAULT_INLIER_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_RECALL_THRESHOLD: f64 = 0.05;
pub const VIRTUAL_CORRESPONDENCES: usize = 300;

pub fn diagonal(size: Size) -> f64 {
    ((size.0 * size.0 + size.1 * size.1) as f64).sqrt()
}

/// `F` expressed for coordinates divided by each image's diagonal.
pub fn normalize_fundamental(f: &Matrix3<f64>, size_a: Size, size_b: Size) -> Matrix3<f64> {
    let ta = Matrix3::from_diagonal(&Vector3::new(diagonal(size_a), diagonal(size_a), 1.0));
    let tb = Matrix3::from_diagonal(&Vector3::new(diagonal(size_b), diagonal(size_b), 1.0));
    tb.transpose() * f * ta
}

/// Symmetric epipolar distance `(x′ᵀFx)²·(1/‖(Fx)₁₂‖² + 1/‖(Fᵀx′)₁₂‖²)`;
/// `None` when an epipolar line is degenerate.
pub fn symmetric_epipolar_distance(f: &Matrix3<f64>, a: Point, b: Point) -> Option<f64> {
    let xa = Vector3::new(a.0, a.1, 1.0);
    let xb = Vector3::new(b.0, b.1, 1.0);
    let la = f * xa;
    let lb = f.transpose() * xb;
    let na = la.x * la.x + la.y * la.y;
    let nb = lb.x * lb.x + lb.y * lb.y;
    if na <= 0.0 || nb <= 0.0 {
        return None;
    }
    let r = xb.dot(&la);
    Some(r * r * (1.0 / na + 1.0 / nb))
}

/// Symmetric epipolar distance in diagonal-normalized coordinates.
pub fn normalized_sed(f: &Matrix3<f64>, a: Point, b: Point, size_a: Size, size_b: Size) -> Option<f64> {
    let (da, db) = (diagonal(size_a), diagonal(size_b));
    let fn_ = normalize_fundamental(f, size_a, size_b);
    symmetric_epipolar_distance(&fn_, (a.0 / da, a.1 / da), (b.0 / db, b.1 / db))
}

/// Mean normalized distance over point pairs; `None` if any pair is degenerate.
pub fn mean_normalized_sed(f: &Matrix3<f64>, pairs: &[(Point, Point)], size_a: Size, size_b: Size) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        total += normalized_sed(f, *a, *b, size_a, size_b)?;
    }
    Some(total / pairs.len() as f64)
}

/// Scales to unit Frobenius norm with a positive largest-magnitude entry.
pub fn canonical_fundamental(f: &Matrix3<f64>) -> Matrix3<f64> {
    let f = f / f.norm();
    let big = f.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
    if big < 0.0 {
        -f
    } else {
        f
    }
}

/// Ground-truth fundamental matrix with the image sizes used for normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalGt {
    pub f: Matrix3<f64>,
    pub size_a: Size,
    pub size_b: Size,
}

impl FundamentalGt {
    pub fn new(f: Matrix3<f64>, size_a: Size, size_b: Size) -> Result<Self> {
        if f.iter().any(|v| !v.is_finite()) || f.norm() == 0.0 {
            return Err(Error::validation("fundamental matrix must be finite and nonzero"));
        }
        let sv = f.singular_values();
        let (hi, lo) = (sv.max(), sv.min());
        if lo / hi >= 1e-6 {
            return Err(Error::validation(format!(
                "fundamental matrix is not rank 2 (σ_min/σ_max = {:.3e})",
                lo / hi
            )));
        }
        Ok(Self {
            f: canonical_fundamental(&f),
            size_a,
            size_b,
        })
    }
}

fn hartley(points: &[Point]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_d = points
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_d > 0.0 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Projects onto rank 2 by zeroing the smallest singular value.
pub fn enforce_rank2(f: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = f.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = svd.singular_values;
    let k = s.imin();
    s[k] = 0.0;
    u * Matrix3::from_diagonal(&s) * vt
}

/// Normalized 8-point solve on `n ≥ 8` correspondences, rank 2, unit norm.
pub fn eight_point(a: &[Point], b: &[Point]) -> Result<Matrix3<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape("point lists differ in length"));
    }
    if a.len() < 8 {
        return Err(Error::Numeric(format!("8-point needs 8 correspondences, got {}", a.len())));
    }
    let (ta, tb) = (hartley(a), hartley(b));
    let rows = a.len().max(9);
    let mut m = DMatrix::<f64>::zeros(rows, 9);
    for (i, (pa, pb)) in a.iter().zip(b).enumerate() {
        let x = ta * Vector3::new(pa.0, pa.1, 1.0);
        let y = tb * Vector3::new(pb.0, pb.1, 1.0);
        let row = [
            y.x * x.x,
            y.x * x.y,
            y.x,
            y.y * x.x,
            y.y * x.y,
            y.y,
            x.x,
            x.y,
            1.0,
        ];
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    let svd = m.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Numeric("SVD failed".into()))?;
    let k = svd.singular_values.imin();
    let f = Matrix3::from_row_slice(vt.row(k).transpose().as_slice());
    let f = tb.transpose() * enforce_rank2(&f) * ta;
    if !f.iter().all(|v| v.is_finite()) || f.norm() == 0.0 {
        return Err(Error::Numeric("degenerate 8-point solution".into()));
    }
    Ok(canonical_fundamental(&f))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Normalized symmetric epipolar distance below which a pair is an inlier.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_RANSAC_ITERATIONS,
            threshold: DEFAULT_INLIER_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub f: Matrix3<f64>,
    pub inliers: Vec<bool>,
}

impl RansacResult {
    pub fn num_inliers(&self) -> usize {
        self.inliers.iter().filter(|v| **v).count()
    }
}

fn inlier_mask(f: &Matrix3<f64>, a: &[Point], b: &[Point], size_a: Size, size_b: Size, thr: f64) -> Vec<bool> {
    let (da, db) = (diagonal(size_a), diagonal(size_b));
    let fn_ = normalize_fundamental(f, size_a, size_b);
    a.iter()
        .zip(b)
        .map(|(pa, pb)| {
            symmetric_epipolar_distance(&fn_, (pa.0 / da, pa.1 / da), (pb.0 / db, pb.1 / db))
                .is_some_and(|d| d < thr)
        })
        .collect()
}

/// Minimal-sample RANSAC over the normalized 8-point solver; the best model
/// is refit on its inliers.
pub fn estimate_fundamental_ransac(
    a: &[Point],
    b: &[Point],
    size_a: Size,
    size_b: Size,
    cfg: &RansacConfig,
) -> Result<RansacResult> {
    if a.len() != b.len() {
        return Err(Error::shape("point lists differ in length"));
    }
    if a.len() < 8 {
        return Err(Error::Numeric(format!(
            "fundamental estimation needs 8 matches, got {}",
            a.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Matrix3<f64>, Vec<bool>)> = None;
    let (mut sa, mut sb) = (Vec::with_capacity(8), Vec::with_capacity(8));
    for _ in 0..cfg.iterations {
        sa.clear();
        sb.clear();
        for i in sample(&mut rng, a.len(), 8) {
            sa.push(a[i]);
            sb.push(b[i]);
        }
        let Ok(f) = eight_point(&sa, &sb) else { continue };
        let mask = inlier_mask(&f, a, b, size_a, size_b, cfg.threshold);
        let count = mask.iter().filter(|v| **v).count();
        if best.as_ref().is_none_or(|(c, _, _)| count > *c) {
            best = Some((count, f, mask));
        }
    }
    let (count, f, mask) = best.ok_or_else(|| Error::Numeric("no non-degenerate sample".into()))?;
    if count >= 8 {
        let ia: Vec<Point> = a.iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
        let ib: Vec<Point> = b.iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
        if let Ok(refit) = eight_point(&ia, &ib) {
            let refit_mask = inlier_mask(&refit, a, b, size_a, size_b, cfg.threshold);
            if refit_mask.iter().filter(|v| **v).count() >= count {
                return Ok(RansacResult {
                    f: refit,
                    inliers: refit_mask,
                });
            }
        }
    }
    Ok(RansacResult { f, inliers: mask })
}

/// `n` correspondences exactly on the epipolar geometry of `f`: points drawn
/// uniformly in image A, each paired with a uniformly drawn point of its
/// epipolar line's segment inside image B.
pub fn virtual_from_fundamental(f: &Matrix3<f64>, size_a: Size, size_b: Size, n: usize, seed: u64) -> Vec<(Point, Point)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wb, hb) = ((size_b.0 as f64 - 1.0).max(1.0), (size_b.1 as f64 - 1.0).max(1.0));
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < 100 * n {
        attempts += 1;
        let pa = (
            rng.random_range(0.0..(size_a.0 as f64 - 1.0).max(1.0)),
            rng.random_range(0.0..(size_a.1 as f64 - 1.0).max(1.0)),
        );
        let l = f * Vector3::new(pa.0, pa.1, 1.0);
        // clip l·(x, y, 1) = 0 to the image box
        let mut ends = Vec::new();
        if l.y.abs() > 1e-12 {
            for x in [0.0, wb] {
                let y = -(l.x * x + l.z) / l.y;
                if (0.0..=hb).contains(&y) {
                    ends.push((x, y));
                }
            }
        }
        if l.x.abs() > 1e-12 {
            for y in [0.0, hb] {
                let x = -(l.y * y + l.z) / l.x;
                if (0.0..=wb).contains(&x) {
                    ends.push((x, y));
                }
            }
        }
        if ends.len() < 2 {
            continue;
        }
        let t: f64 = rng.random_range(0.0..1.0);
        let (p, q) = (ends[0], ends[ends.len() - 1]);
        out.push((pa, (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))));
    }
    out
}

/// Percentage of pairs whose mean normalized distance is below `threshold`;
/// `None` entries are failed estimates.
pub fn pose_recall(mean_errors: &[Option<f64>], threshold: f64) -> f64 {
    if mean_errors.is_empty() {
        return 0.0;
    }
    let ok = mean_errors.iter().filter(|e| e.is_some_and(|v| v < threshold)).count();
    100.0 * ok as f64 / mean_errors.len() as f64
}
