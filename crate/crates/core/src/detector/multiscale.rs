//! Image-pyramid and in-network multi-scale detection.

use std::f64::consts::SQRT_2;

use crate::error::Result;
use crate::image::gaussian_blur;
use crate::tensor::Tensor;

use super::{keypoint_order, level_score, DetectorConfig, Keypoint, Scoring};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PyramidConfig {
    /// Downsampling ratio between consecutive levels.
    pub step: f64,
    pub blur_sigma: f64,
    /// Levels are added while their longest side is at least this long.
    pub min_side: usize,
    /// The first level is shrunk so its longest side does not exceed this.
    pub max_side: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            step: SQRT_2,
            blur_sigma: 0.8,
            min_side: 128,
            max_side: 2048,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub image: Tensor<f32>,
    /// Level coordinates equal original coordinates times `scale`.
    pub scale: f64,
}

/// Level sizes and scales for an image, without building it.
pub fn pyramid_dims(height: usize, width: usize, cfg: &PyramidConfig) -> Vec<(usize, usize, f64)> {
    let longest = height.max(width);
    let scale0 = if longest > cfg.max_side {
        cfg.max_side as f64 / longest as f64
    } else {
        1.0
    };
    let mut dims = Vec::new();
    for k in 0i32.. {
        let scale = scale0 * cfg.step.powi(-k);
        let h = ((height as f64 * scale).round() as usize).max(1);
        let w = ((width as f64 * scale).round() as usize).max(1);
        if k > 0 && h.max(w) < cfg.min_side {
            break;
        }
        dims.push((h, w, scale));
        if h.max(w) < cfg.min_side {
            break;
        }
    }
    dims
}

/// Each level is the previous one blurred and resampled by `step`.
pub fn build_pyramid(img: &Tensor<f32>, cfg: &PyramidConfig) -> Vec<PyramidLevel> {
    let dims = pyramid_dims(img.height(), img.width(), cfg);
    let mut levels: Vec<PyramidLevel> = Vec::with_capacity(dims.len());
    for (k, &(h, w, scale)) in dims.iter().enumerate() {
        let image = if k == 0 {
            if scale == 1.0 {
                img.clone()
            } else {
                gaussian_blur(img, cfg.blur_sigma).resample(h, w, 1.0 / scale, 1.0 / scale)
            }
        } else {
            let prev = &levels[k - 1].image;
            gaussian_blur(prev, cfg.blur_sigma).resample(h, w, cfg.step, cfg.step)
        };
        levels.push(PyramidLevel { image, scale });
    }
    levels
}

/// Level coordinates back to original-image coordinates.
pub fn level_to_image(p: (f64, f64), scale: f64) -> (f64, f64) {
    (p.0 / scale, p.1 / scale)
}

/// Greedy suppression by score in original coordinates: an item is dropped
/// when a better one lies within Chebyshev distance `radius`.
pub fn cross_scale_nms<D>(mut items: Vec<(Keypoint, D)>, radius: f32) -> Vec<(Keypoint, D)> {
    items.sort_by(|a, b| keypoint_order(&a.0, &b.0));
    let mut kept: Vec<(Keypoint, D)> = Vec::with_capacity(items.len());
    for item in items {
        let clash = kept
            .iter()
            .any(|(k, _)| (k.x - item.0.x).abs().max((k.y - item.0.y).abs()) <= radius);
        if !clash {
            kept.push(item);
        }
    }
    kept
}

/// Runs `detect_level` on every pyramid level, maps its keypoints back to
/// original coordinates and merges them.
///
/// `detect_level` receives the level image and index and returns keypoints
/// in level coordinates, each with a payload (typically a descriptor).
pub fn pyramid_detect<D, F>(
    img: &Tensor<f32>,
    cfg: &DetectorConfig,
    pyramid: &PyramidConfig,
    mut detect_level: F,
) -> Result<Vec<(Keypoint, D)>>
where
    F: FnMut(&Tensor<f32>, usize) -> Result<Vec<(Keypoint, D)>>,
{
    let mut all = Vec::new();
    for (k, level) in build_pyramid(img, pyramid).iter().enumerate() {
        for (kp, payload) in detect_level(&level.image, k)? {
            if kp.score < cfg.score_min {
                continue;
            }
            let (x, y) = level_to_image((kp.x as f64, kp.y as f64), level.scale);
            let mapped = Keypoint {
                x: x as f32,
                y: y as f32,
                pyramid_scale: level.scale as f32,
                ..kp
            };
            all.push((mapped, payload));
        }
    }
    let mut merged = cross_scale_nms(all, (cfg.nms_size / 2) as f32);
    if let Some(k) = cfg.top_k {
        merged.truncate(k);
    }
    Ok(merged)
}

/// `n` scale factors log-spaced over `[1/ratio, ratio]`.
pub fn innetwork_scales(n: usize, ratio: f64) -> Vec<f64> {
    if n <= 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| ratio.powf(2.0 * i as f64 / (n - 1) as f64 - 1.0))
        .collect()
}

/// Scores `y` at several resizings, brings the scores back to `y`'s grid and
/// merges them with per-position softmax weights over the scores.
pub fn innetwork_multiscale(y: &Tensor<f32>, scoring: Scoring, dilation: usize, n: usize, ratio: f64) -> Tensor<f32> {
    let (h, w, _) = y.shape();
    let maps: Vec<Tensor<f32>> = innetwork_scales(n, ratio)
        .into_iter()
        .map(|f| {
            let sh = ((h as f64 * f).round() as usize).max(1);
            let sw = ((w as f64 * f).round() as usize).max(1);
            let scaled = if (sh, sw) == (h, w) && f == 1.0 {
                y.clone()
            } else {
                y.resample(sh, sw, 1.0 / f, 1.0 / f)
            };
            let s = level_score(&scaled, scoring, dilation);
            if f == 1.0 {
                s
            } else {
                s.resample(h, w, f, f)
            }
        })
        .collect();
    Tensor::from_fn(h, w, 1, |i, j, _| {
        let vals: Vec<f64> = maps.iter().map(|m| m.get(i, j, 0) as f64).collect();
        let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = weights.iter().sum();
        (vals.iter().zip(&weights).map(|(v, wt)| v * wt).sum::<f64>() / total) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn level_counts_follow_stopping_rule() {
        let cfg = PyramidConfig::default();
        assert_eq!(pyramid_dims(100, 100, &cfg).len(), 1);
        let d = pyramid_dims(512, 512, &cfg);
        assert_eq!(d.len(), 5);
        assert_eq!(d.iter().map(|x| x.0).collect::<Vec<_>>(), [512, 362, 256, 181, 128]);
        let big = pyramid_dims(3000, 1000, &cfg);
        assert_eq!(big[0].0, 2048);
        assert!(big.last().unwrap().0 >= 128);
    }

    #[test]
    fn built_levels_match_dims() {
        let img = Tensor::from_fn(300, 200, 1, |y, x, _| ((x + 2 * y) % 7) as f32 / 7.0);
        let levels = build_pyramid(&img, &PyramidConfig::default());
        let dims = pyramid_dims(300, 200, &PyramidConfig::default());
        assert_eq!(levels.len(), dims.len());
        for (l, d) in levels.iter().zip(dims) {
            assert_eq!((l.image.height(), l.image.width()), (d.0, d.1));
            assert!(l.image.is_finite());
        }
    }

    #[test]
    fn keypoints_map_back_by_scale() {
        let img = Tensor::<f32>::zeros(512, 512, 1);
        let cfg = DetectorConfig::default();
        let out = pyramid_detect(&img, &cfg, &PyramidConfig::default(), |_, k| {
            Ok(if k == 1 {
                vec![(
                    Keypoint {
                        x: 40.0,
                        y: 40.0,
                        score: 0.9,
                        level_hint: 2,
                        pyramid_scale: 1.0,
                    },
                    (),
                )]
            } else {
                vec![]
            })
        })
        .unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].0.x as f64 - 40.0 * SQRT_2).abs() < 1e-4);
        assert!((out[0].0.pyramid_scale as f64 - 1.0 / SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn cross_scale_duplicates_collapse() {
        let kp = |x: f32, score: f32| Keypoint {
            x,
            y: 10.0,
            score,
            level_hint: 2,
            pyramid_scale: 1.0,
        };
        let out = cross_scale_nms(vec![(kp(10.0, 0.6), 0), (kp(10.5, 0.9), 1), (kp(14.0, 0.7), 2)], 1.0);
        assert_eq!(out.iter().map(|o| o.1).collect::<Vec<_>>(), [1, 2]);
    }

    #[test]
    fn innetwork_cases() {
        let c = Tensor::<f32>::filled(10, 12, 4, 0.3);
        let m = innetwork_multiscale(&c, Scoring::Peakiness, 1, 5, SQRT_2);
        let ln2sq = 2f32.ln().powi(2);
        assert!(m.data().iter().all(|v| (v - ln2sq).abs() < 1e-6));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = Tensor::from_fn(10, 12, 4, |_, _, _| rng.random_range(-1.0..1.0f32));
        let single = level_score(&y, Scoring::Peakiness, 1);
        assert_eq!(innetwork_multiscale(&y, Scoring::Peakiness, 1, 1, SQRT_2).data(), single.data());

        let merged = innetwork_multiscale(&y, Scoring::Peakiness, 1, 5, SQRT_2);
        let per: Vec<Tensor<f32>> = innetwork_scales(5, SQRT_2)
            .into_iter()
            .map(|f| {
                let sh = (10.0 * f).round() as usize;
                let sw = (12.0 * f).round() as usize;
                level_score(&y.resample(sh, sw, 1.0 / f, 1.0 / f), Scoring::Peakiness, 1).resample(10, 12, f, f)
            })
            .collect();
        for i in 0..10 {
            for j in 0..12 {
                let vals: Vec<f32> = per.iter().map(|p| p.get(i, j, 0)).collect();
                let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let v = merged.get(i, j, 0);
                assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
        let s = innetwork_scales(5, SQRT_2);
        assert!((s[0] - 1.0 / SQRT_2).abs() < 1e-12 && (s[4] - SQRT_2).abs() < 1e-12 && (s[2] - 1.0).abs() < 1e-12);
    }
}
