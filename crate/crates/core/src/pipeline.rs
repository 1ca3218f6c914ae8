//! Image to keypoints and descriptors.

use crate::backbone::{sample_descriptor, Backbone, DESCRIPTOR_DIM};
use crate::detector::{
    detect, pyramid_detect, score_map, DetectorConfig, Fusion, Keypoint, PyramidConfig,
};
use crate::error::Result;
use crate::features::FeatureSet;
use crate::image::{standardize_tensor, to_grayscale, Image};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Extractor {
    pub backbone: Backbone,
    pub detector: DetectorConfig,
    pub pyramid: PyramidConfig,
}

impl Extractor {
    pub fn new(backbone: Backbone, detector: DetectorConfig) -> Self {
        Self {
            backbone,
            detector,
            pyramid: PyramidConfig::default(),
        }
    }

    pub fn extract(&self, img: &Image) -> Result<FeatureSet> {
        let gray = to_grayscale(img);
        self.extract_gray(&gray.pixels)
    }

    /// Extraction from a single-channel image with values in `[0, 1]`.
    pub fn extract_gray(&self, gray: &Tensor<f32>) -> Result<FeatureSet> {
        self.extract_inner(gray, true)
    }

    /// Extraction from an already standardized single-channel input; the
    /// pyramid mode still standardizes each level.
    pub fn extract_standardized(&self, input: &Tensor<f32>) -> Result<FeatureSet> {
        self.extract_inner(input, false)
    }

    fn extract_inner(&self, gray: &Tensor<f32>, standardize: bool) -> Result<FeatureSet> {
        self.detector.validate()?;
        let found = match self.detector.fusion {
            Fusion::Pyramid => {
                let per_level = DetectorConfig {
                    fusion: Fusion::Single,
                    top_k: None,
                    ..self.detector.clone()
                };
                pyramid_detect(gray, &self.detector, &self.pyramid, |level, _| {
                    self.detect_single(level, &per_level, true)
                })?
            }
            _ => self.detect_single(gray, &self.detector, standardize)?,
        };
        let mut set = FeatureSet::new(DESCRIPTOR_DIM);
        for (kp, desc) in found {
            set.push(kp, &desc)?;
        }
        Ok(set)
    }

    fn detect_single(
        &self,
        gray: &Tensor<f32>,
        cfg: &DetectorConfig,
        standardize: bool,
    ) -> Result<Vec<(Keypoint, Vec<f32>)>> {
        let hierarchy = if standardize {
            self.backbone.forward(&standardize_tensor(gray))?
        } else {
            self.backbone.forward(gray)?
        };
        let map = score_map(&hierarchy, cfg)?;
        Ok(detect(&map, cfg)
            .into_iter()
            .map(|kp| {
                let (d, _) = sample_descriptor(&hierarchy, kp.x, kp.y);
                (kp, d)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, DcnVariant};
    use crate::geom::DeformKind;

    fn textured(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(h, w, 1, |y, x, _| {
            let (xf, yf) = (x as f32, y as f32);
            (0.5 + 0.3 * (xf * 0.37).sin() * (yf * 0.23).cos() + 0.2 * ((xf * yf) * 0.01).sin()).clamp(0.0, 1.0)
        })
    }

    fn extractor(fusion: Fusion) -> Extractor {
        let net = Backbone::seeded(BackboneConfig::new(DcnVariant::Deform(DeformKind::FreeForm)), 7).unwrap();
        Extractor::new(
            net,
            DetectorConfig {
                fusion,
                top_k: Some(50),
                ..DetectorConfig::default()
            },
        )
    }

    #[test]
    fn uniform_image_gives_no_keypoints() {
        for fusion in [Fusion::MultiLevel, Fusion::Single, Fusion::InNetwork] {
            let set = extractor(fusion).extract_gray(&Tensor::filled(64, 64, 1, 0.5)).unwrap();
            assert!(set.is_empty(), "{fusion}");
        }
    }

    #[test]
    fn textured_image_gives_bounded_unit_features() {
        for fusion in [Fusion::MultiLevel, Fusion::Single, Fusion::InNetwork] {
            let set = extractor(fusion).extract_gray(&textured(64, 80)).unwrap();
            assert!(set.len() <= 50);
            for (i, kp) in set.keypoints.iter().enumerate() {
                assert!(kp.score >= 0.5);
                assert!(kp.x >= 0.0 && kp.x < 80.0 && kp.y >= 0.0 && kp.y < 64.0);
                let n: f32 = set.descriptor(i).iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn pyramid_mode_reports_scales() {
        let set = extractor(Fusion::Pyramid).extract_gray(&textured(200, 190)).unwrap();
        assert!(set.len() <= 50);
        assert!(set.keypoints.iter().all(|k| k.pyramid_scale > 0.0 && k.pyramid_scale <= 1.0));
    }
}
