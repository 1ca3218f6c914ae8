//! Keypoint detection on the feature hierarchy.
//!
//! Each tapped level is scored at its own resolution, upsampled to the input
//! grid and fused. Keypoints are then picked from the fused map.

mod multiscale;
mod score;
mod select;

use std::fmt;
use std::str::FromStr;

pub use multiscale::{
    build_pyramid, cross_scale_nms, innetwork_multiscale, innetwork_scales, level_to_image, pyramid_detect,
    pyramid_dims, PyramidConfig, PyramidLevel,
};
pub use score::{
    combine_scores, combine_scores_backward, d2_channel_score, d2_local_score, d2_score,
    muldet_fuse, peakiness_score, peakiness_score_backward, peakiness_scores, sigmoid, softplus,
};
pub use select::{
    edge_eliminate, edge_keep, keypoint_order, nms, refine_quadratic, select_cells,
    select_keypoints, subpixel_refine, LocalQuadratic, Selected,
};

use crate::backbone::FeatureHierarchy;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    Peakiness,
    /// Spatial softmax times channel ratio.
    D2Net,
}

impl FromStr for Scoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "peakiness" => Ok(Scoring::Peakiness),
            "d2net" | "d2net-ratio" => Ok(Scoring::D2Net),
            other => Err(Error::validation(format!("unknown scoring {other:?}"))),
        }
    }
}

impl fmt::Display for Scoring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scoring::Peakiness => "peakiness",
            Scoring::D2Net => "d2net",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Weighted sum of conv1, conv3 and conv8 scores.
    MultiLevel,
    /// Image pyramid, conv8 scores per scale.
    Pyramid,
    /// conv8 features resized to several scales inside one forward pass.
    InNetwork,
    /// conv8 only.
    Single,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multilevel" => Ok(Fusion::MultiLevel),
            "pyramid" => Ok(Fusion::Pyramid),
            "in-network" => Ok(Fusion::InNetwork),
            "single" => Ok(Fusion::Single),
            other => Err(Error::validation(format!("unknown fusion {other:?}"))),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::MultiLevel => "multilevel",
            Fusion::Pyramid => "pyramid",
            Fusion::InNetwork => "in-network",
            Fusion::Single => "single",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub scoring: Scoring,
    pub fusion: Fusion,
    /// One weight per tapped level (conv1, conv3, conv8).
    pub level_weights: Vec<f64>,
    pub level_dilations: Vec<usize>,
    /// NMS window side length.
    pub nms_size: usize,
    pub edge_threshold: f64,
    pub score_min: f32,
    pub top_k: Option<usize>,
    /// Cells closer than this to the image border are never selected.
    pub border: usize,
    /// Scale count and ratio of the in-network mode.
    pub innetwork_scales: usize,
    pub innetwork_ratio: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            scoring: Scoring::Peakiness,
            fusion: Fusion::MultiLevel,
            level_weights: vec![1.0, 2.0, 3.0],
            level_dilations: vec![3, 2, 1],
            nms_size: 3,
            edge_threshold: 10.0,
            score_min: 0.5,
            top_k: None,
            border: 8,
            innetwork_scales: 5,
            innetwork_ratio: std::f64::consts::SQRT_2,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_weights.len() != 3 || self.level_dilations.len() != 3 {
            return Err(Error::validation("need one weight and one dilation per level"));
        }
        if self.level_weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::validation("level weights must be positive"));
        }
        if self.level_dilations.contains(&0) {
            return Err(Error::validation("dilations must be at least 1"));
        }
        if self.nms_size < 3 || self.nms_size % 2 == 0 {
            return Err(Error::validation(format!(
                "NMS window {} must be odd and at least 3",
                self.nms_size
            )));
        }
        if !(self.edge_threshold > 0.0) {
            return Err(Error::validation("edge threshold must be positive"));
        }
        if !self.score_min.is_finite() {
            return Err(Error::validation("score threshold must be finite"));
        }
        if self.innetwork_scales == 0 || !(self.innetwork_ratio >= 1.0) {
            return Err(Error::validation("in-network scales need N ≥ 1 and R ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub score: f32,
    /// Index of the tapped level contributing most to the score.
    pub level_hint: usize,
    /// Pyramid scale the keypoint was found at; 1 for single-scale modes.
    pub pyramid_scale: f32,
}

/// A fused map at input resolution.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub values: Tensor<f32>,
    /// Weights of the levels that were fused, in tap order.
    pub level_weights: Vec<f64>,
    /// Per-level weighted contributions at input resolution, when fused.
    pub contributions: Vec<Tensor<f32>>,
}

impl ScoreMap {
    /// Index of the largest contribution at a cell.
    pub fn dominant_level(&self, y: usize, x: usize) -> usize {
        if self.contributions.is_empty() {
            return 2;
        }
        let mut best = 0;
        for (i, c) in self.contributions.iter().enumerate() {
            if c.get(y, x, 0) > self.contributions[best].get(y, x, 0) {
                best = i;
            }
        }
        best
    }
}

/// Single-level score with the configured scoring rule.
pub fn level_score<T: Scalar>(y: &Tensor<T>, scoring: Scoring, dilation: usize) -> Tensor<T> {
    match scoring {
        Scoring::Peakiness => peakiness_score(y, dilation),
        Scoring::D2Net => d2_score(y, dilation),
    }
}

/// Upsamples a stride-`stride` map and crops it to `height × width`.
pub fn to_input_resolution(s: &Tensor<f32>, stride: usize, height: usize, width: usize) -> Tensor<f32> {
    let up = s.upsample_bilinear(stride);
    if up.shape() == (height, width, 1) {
        up
    } else {
        up.crop(0, 0, height, width)
    }
}

/// Fused score map for the single, multilevel and in-network modes.
pub fn score_map(h: &FeatureHierarchy, cfg: &DetectorConfig) -> Result<ScoreMap> {
    cfg.validate()?;
    let (height, width) = (h.input_height, h.input_width);
    match cfg.fusion {
        Fusion::Single | Fusion::Pyramid => {
            let l = &h.levels[2];
            let s = level_score(&l.tensor, cfg.scoring, cfg.level_dilations[2]);
            Ok(ScoreMap {
                values: to_input_resolution(&s, l.stride, height, width),
                level_weights: vec![cfg.level_weights[2]],
                contributions: Vec::new(),
            })
        }
        Fusion::InNetwork => {
            let l = &h.levels[2];
            let s = innetwork_multiscale(
                &l.tensor,
                cfg.scoring,
                cfg.level_dilations[2],
                cfg.innetwork_scales,
                cfg.innetwork_ratio,
            );
            Ok(ScoreMap {
                values: to_input_resolution(&s, l.stride, height, width),
                level_weights: vec![cfg.level_weights[2]],
                contributions: Vec::new(),
            })
        }
        Fusion::MultiLevel => {
            let maps: Vec<Tensor<f32>> = h
                .levels
                .iter()
                .zip(&cfg.level_dilations)
                .map(|(l, d)| to_input_resolution(&level_score(&l.tensor, cfg.scoring, *d), l.stride, height, width))
                .collect();
            let values = muldet_fuse(&maps, &cfg.level_weights)?;
            let contributions = maps
                .iter()
                .zip(&cfg.level_weights)
                .map(|(m, w)| m.map(|v| v * *w as f32))
                .collect();
            Ok(ScoreMap {
                values,
                level_weights: cfg.level_weights.clone(),
                contributions,
            })
        }
    }
}

/// Keypoints of a single-scale score map, tagged with their dominant level.
pub fn detect(map: &ScoreMap, cfg: &DetectorConfig) -> Vec<Keypoint> {
    select_cells(&map.values, cfg)
        .into_iter()
        .map(|s| Keypoint {
            level_hint: map.dominant_level(s.cell.0, s.cell.1),
            ..s.keypoint
        })
        .collect()
}
