//! Keypoint selection on a fused score map.

use std::cmp::Ordering;

use crate::tensor::Tensor;

use super::{DetectorConfig, Keypoint};

/// `true` if `(y, x)` dominates every other cell of its window: strictly
/// larger, or equal and earlier in `(y, x)` order.
fn is_window_max(s: &Tensor<f32>, y: usize, x: usize, half: usize) -> bool {
    let v = s.get(y, x, 0);
    let (h, w) = (s.height(), s.width());
    for yy in y.saturating_sub(half)..(y + half + 1).min(h) {
        for xx in x.saturating_sub(half)..(x + half + 1).min(w) {
            if (yy, xx) == (y, x) {
                continue;
            }
            let u = s.get(yy, xx, 0);
            if u > v || (u == v && (yy, xx) < (y, x)) {
                return false;
            }
        }
    }
    true
}

/// Row-major mask of cells surviving non-maximum suppression over a
/// `size × size` window.
pub fn nms(s: &Tensor<f32>, size: usize) -> Vec<bool> {
    let half = size / 2;
    let (h, w) = (s.height(), s.width());
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            mask.push(is_window_max(s, y, x, half));
        }
    }
    mask
}

/// Central-difference gradient and Hessian of the map at an interior cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalQuadratic {
    pub value: f64,
    pub gx: f64,
    pub gy: f64,
    pub dxx: f64,
    pub dyy: f64,
    pub dxy: f64,
}

impl LocalQuadratic {
    /// Requires `1 ≤ x < W−1` and `1 ≤ y < H−1`.
    pub fn at(s: &Tensor<f32>, y: usize, x: usize) -> Self {
        let v = |dy: isize, dx: isize| s.get((y as isize + dy) as usize, (x as isize + dx) as usize, 0) as f64;
        let c = v(0, 0);
        Self {
            value: c,
            gx: 0.5 * (v(0, 1) - v(0, -1)),
            gy: 0.5 * (v(1, 0) - v(-1, 0)),
            dxx: v(0, 1) - 2.0 * c + v(0, -1),
            dyy: v(1, 0) - 2.0 * c + v(-1, 0),
            dxy: 0.25 * (v(1, 1) - v(1, -1) - v(-1, 1) + v(-1, -1)),
        }
    }

    pub fn det(&self) -> f64 {
        self.dxx * self.dyy - self.dxy * self.dxy
    }

    pub fn trace(&self) -> f64 {
        self.dxx + self.dyy
    }
}

/// `true` if the Hessian passes the ratio test `tr²/det < (r+1)²/r` with `det > 0`.
pub fn edge_keep(dxx: f64, dyy: f64, dxy: f64, r: f64) -> bool {
    let det = dxx * dyy - dxy * dxy;
    if det <= 0.0 {
        return false;
    }
    let tr = dxx + dyy;
    tr * tr / det < (r + 1.0) * (r + 1.0) / r
}

pub fn edge_eliminate(s: &Tensor<f32>, y: usize, x: usize, r: f64) -> bool {
    let q = LocalQuadratic::at(s, y, x);
    edge_keep(q.dxx, q.dyy, q.dxy, r)
}

/// Sub-pixel offset `(dx, dy)` and refitted score from a local quadratic.
pub fn refine_quadratic(q: &LocalQuadratic) -> (f64, f64, f64) {
    let det = q.det();
    if det.abs() < 1e-12 || !det.is_finite() {
        return (0.0, 0.0, q.value);
    }
    // −H⁻¹g
    let dx = -(q.dyy * q.gx - q.dxy * q.gy) / det;
    let dy = -(q.dxx * q.gy - q.dxy * q.gx) / det;
    let dx = dx.clamp(-0.5, 0.5);
    let dy = dy.clamp(-0.5, 0.5);
    let value = q.value
        + q.gx * dx
        + q.gy * dy
        + 0.5 * (q.dxx * dx * dx + 2.0 * q.dxy * dx * dy + q.dyy * dy * dy);
    (dx, dy, value)
}

pub fn subpixel_refine(s: &Tensor<f32>, y: usize, x: usize) -> Keypoint {
    let (dx, dy, value) = refine_quadratic(&LocalQuadratic::at(s, y, x));
    Keypoint {
        x: x as f32 + dx as f32,
        y: y as f32 + dy as f32,
        score: value as f32,
        level_hint: 0,
        pyramid_scale: 1.0,
    }
}

/// Score descending, then `(y, x)` ascending.
pub fn keypoint_order(a: &Keypoint, b: &Keypoint) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
}

/// A selected keypoint together with the integer cell it was refined from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selected {
    pub cell: (usize, usize),
    pub keypoint: Keypoint,
}

/// NMS, border exclusion, edge test, sub-pixel refinement, thresholding,
/// ordering and top-K truncation.
pub fn select_cells(s: &Tensor<f32>, cfg: &DetectorConfig) -> Vec<Selected> {
    let (h, w) = (s.height(), s.width());
    let border = cfg.border.max(1);
    if h <= 2 * border || w <= 2 * border {
        return Vec::new();
    }
    let half = cfg.nms_size / 2;
    let mut out = Vec::new();
    for y in border..h - border {
        for x in border..w - border {
            if !is_window_max(s, y, x, half) {
                continue;
            }
            let q = LocalQuadratic::at(s, y, x);
            if !edge_keep(q.dxx, q.dyy, q.dxy, cfg.edge_threshold) {
                continue;
            }
            let (dx, dy, value) = refine_quadratic(&q);
            if value < cfg.score_min as f64 {
                continue;
            }
            out.push(Selected {
                cell: (y, x),
                keypoint: Keypoint {
                    x: x as f32 + dx as f32,
                    y: y as f32 + dy as f32,
                    score: value as f32,
                    level_hint: 0,
                    pyramid_scale: 1.0,
                },
            });
        }
    }
    out.sort_by(|a, b| keypoint_order(&a.keypoint, &b.keypoint).then(a.cell.cmp(&b.cell)));
    if let Some(k) = cfg.top_k {
        out.truncate(k);
    }
    out
}

pub fn select_keypoints(s: &Tensor<f32>, cfg: &DetectorConfig) -> Vec<Keypoint> {
    select_cells(s, cfg).into_iter().map(|c| c.keypoint).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(h, w, 1, v.to_vec()).unwrap()
    }

    fn bump(h: usize, w: usize, peaks: &[(f32, f32, f32)]) -> Tensor<f32> {
        Tensor::from_fn(h, w, 1, |y, x, _| {
            peaks
                .iter()
                .map(|&(py, px, a)| {
                    let d2 = (y as f32 - py).powi(2) + (x as f32 - px).powi(2);
                    a * (-d2 / 4.0).exp()
                })
                .sum()
        })
    }

    #[test]
    fn nms_spike_constant_and_tie() {
        let mut s = Tensor::zeros(5, 5, 1);
        s.set(2, 3, 0, 1.0);
        let m = nms(&s, 3);
        assert!(m[2 * 5 + 3]);
        // zeros far from the spike are plateau minima kept only at their window's first cell
        assert!(!m[2 * 5 + 2] && !m[1 * 5 + 3]);

        let c = Tensor::filled(4, 4, 1, 0.3f32);
        let m = nms(&c, 3);
        assert_eq!(m.iter().filter(|k| **k).count(), 1);
        assert!(m[0]);

        let pair = map(1, 4, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(nms(&pair, 3), vec![false, true, false, false]);
    }

    #[test]
    fn edge_rule_cases() {
        assert!(edge_keep(-2.0, -2.0, 0.0, 10.0));
        assert!(!edge_keep(-10.0, -0.1, 0.0, 10.0));
        assert!(!edge_keep(-1.0, 1.0, 0.0, 10.0));
        assert!(!edge_keep(0.0, 0.0, 0.0, 10.0));
    }

    #[test]
    fn refine_cases() {
        let sym = map(3, 3, &[0.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 0.0]);
        let kp = subpixel_refine(&sym, 1, 1);
        assert_eq!((kp.x, kp.y, kp.score), (1.0, 1.0, 2.0));

        // x profile [1, 2, 1.5], y profile symmetric
        let skew = map(3, 3, &[0.0, 1.0, 0.0, 1.0, 2.0, 1.5, 0.0, 1.0, 0.0]);
        let q = LocalQuadratic::at(&skew, 1, 1);
        let (dx, dy, v) = refine_quadratic(&q);
        assert!((dx - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(dy, 0.0);
        // vertex value of the parabola through the three samples
        assert!((v - (2.0 + 0.25 / 6.0 - 0.75 / 36.0)).abs() < 1e-12);

        let steep = map(3, 3, &[0.0, 1.0, 0.0, 0.0, 2.0, 3.9, 0.0, 1.0, 0.0]);
        let (dx, _, _) = refine_quadratic(&LocalQuadratic::at(&steep, 1, 1));
        assert_eq!(dx, 0.5);

        let flat = Tensor::filled(3, 3, 1, 0.7f32);
        let kp = subpixel_refine(&flat, 1, 1);
        assert_eq!((kp.x, kp.y), (1.0, 1.0));
        assert!((kp.score - 0.7).abs() < 1e-7);
    }

    #[test]
    fn selection_cases() {
        let cfg = DetectorConfig {
            top_k: Some(1),
            ..DetectorConfig::default()
        };
        let s = bump(40, 40, &[(12.0, 12.0, 0.9), (26.0, 25.0, 0.8)]);
        let kps = select_keypoints(&s, &cfg);
        assert_eq!(kps.len(), 1);
        assert!((kps[0].x - 12.0).abs() < 1e-3 && (kps[0].y - 12.0).abs() < 1e-3);
        assert!((kps[0].score - 0.9).abs() < 1e-2);

        let all = select_keypoints(&s, &DetectorConfig::default());
        assert_eq!(all.len(), 2);

        let low = Tensor::filled(30, 30, 1, 0.49f32);
        assert!(select_keypoints(&low, &DetectorConfig::default()).is_empty());
        let ln2sq = Tensor::filled(30, 30, 1, (2f32.ln()).powi(2));
        assert!(select_keypoints(&ln2sq, &DetectorConfig::default()).is_empty());
    }

    #[test]
    fn border_cells_are_excluded() {
        let s = bump(40, 40, &[(4.0, 20.0, 0.9)]);
        assert!(select_keypoints(&s, &DetectorConfig::default()).is_empty());
    }

    proptest! {
        #[test]
        fn selection_is_sorted_deduplicated_and_bounded(
            vals in proptest::collection::vec(0.0f32..1.5, 30 * 30),
            k in 1usize..40,
        ) {
            let s = Tensor::from_vec(30, 30, 1, vals).unwrap();
            let cfg = DetectorConfig { top_k: Some(k), ..DetectorConfig::default() };
            let sel = select_cells(&s, &cfg);
            prop_assert!(sel.len() <= k);
            for pair in sel.windows(2) {
                prop_assert!(keypoint_order(&pair[0].keypoint, &pair[1].keypoint) != Ordering::Greater);
            }
            for (i, a) in sel.iter().enumerate() {
                prop_assert!(a.keypoint.score >= 0.5);
                for b in &sel[i + 1..] {
                    let d = a.cell.0.abs_diff(b.cell.0).max(a.cell.1.abs_diff(b.cell.1));
                    prop_assert!(d > cfg.nms_size / 2);
                }
            }
        }
    }
}
