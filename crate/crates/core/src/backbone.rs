//! Eight-layer convolutional trunk with deformable conv6–conv8.
//!
//! Taps are exposed at conv1 (stride 1, post-activation), conv3 (stride 2)
//! and conv8 (stride 4, raw). conv8 feeds both detection and description.

use std::fmt;
use std::str::FromStr;

use crate::dcn::{conv2d, deform_conv2d, predict_deform_field, ChannelNorm, ConvLayer};
use crate::error::{Error, Result};
use crate::geom::DeformKind;
use crate::tensor::Tensor;
use crate::weights::{seeded_random_weights, InitRule, TensorSpec, WeightStore, PREDICTOR_GAIN};

pub const DESCRIPTOR_DIM: usize = 128;
pub const TAP_NAMES: [&str; 3] = ["conv1", "conv3", "conv8"];

/// Which deformation model, if any, drives the layers flagged as deformable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcnVariant {
    None,
    Deform(DeformKind),
}

impl fmt::Display for DcnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DcnVariant::None => f.write_str("none"),
            DcnVariant::Deform(k) => f.write_str(k.name()),
        }
    }
}

impl FromStr for DcnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("none") {
            Ok(DcnVariant::None)
        } else {
            s.parse().map(DcnVariant::Deform)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDef {
    pub name: &'static str,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub dcn: bool,
    /// Normalization followed by ReLU.
    pub norm_relu: bool,
}

const fn layer(
    name: &'static str,
    c_in: usize,
    c_out: usize,
    stride: usize,
    dcn: bool,
    norm_relu: bool,
) -> LayerDef {
    LayerDef {
        name,
        k: 3,
        c_in,
        c_out,
        stride,
        dcn,
        norm_relu,
    }
}

pub const LAYER_TABLE: [LayerDef; 8] = [
    layer("conv1", 1, 32, 1, false, true),
    layer("conv2", 32, 32, 1, false, true),
    layer("conv3", 32, 64, 2, false, true),
    layer("conv4", 64, 64, 1, false, true),
    layer("conv5", 64, 128, 2, false, true),
    layer("conv6", 128, 128, 1, true, true),
    layer("conv7", 128, 128, 1, true, true),
    layer("conv8", 128, 128, 1, true, false),
];

/// Shape of one tap for a given input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapShape {
    pub name: &'static str,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub layers: Vec<LayerDef>,
    pub dcn: DcnVariant,
}

impl BackboneConfig {
    pub fn new(dcn: DcnVariant) -> Self {
        Self {
            layers: LAYER_TABLE.to_vec(),
            dcn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let names: Vec<&str> = self.layers.iter().map(|l| l.name).collect();
        if names != LAYER_TABLE.iter().map(|l| l.name).collect::<Vec<_>>() {
            return Err(Error::validation(format!("unexpected layer list {names:?}")));
        }
        for pair in self.layers.windows(2) {
            if pair[0].c_out != pair[1].c_in {
                return Err(Error::validation(format!(
                    "{} emits {} channels but {} expects {}",
                    pair[0].name, pair[0].c_out, pair[1].name, pair[1].c_in
                )));
            }
        }
        let dcn: Vec<&str> = self.layers.iter().filter(|l| l.dcn).map(|l| l.name).collect();
        if dcn != ["conv6", "conv7", "conv8"] {
            return Err(Error::validation(format!("deformable layers {dcn:?}")));
        }
        if self.layers.iter().filter(|l| l.stride == 2).count() != 2 {
            return Err(Error::validation("trunk needs exactly two stride-2 layers"));
        }
        if self.layers.last().map(|l| l.c_out) != Some(DESCRIPTOR_DIM) {
            return Err(Error::validation("conv8 must emit 128 channels"));
        }
        Ok(())
    }

    fn deform_kind(&self, l: &LayerDef) -> Option<DeformKind> {
        match self.dcn {
            DcnVariant::Deform(kind) if l.dcn => Some(kind),
            _ => None,
        }
    }

    /// Every named tensor the trunk expects, in file order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        for l in &self.layers {
            let fan_in = l.k * l.k * l.c_in;
            specs.push(TensorSpec::new(
                format!("{}.weight", l.name),
                vec![l.k, l.k, l.c_in, l.c_out],
                InitRule::Uniform { fan_in, gain: 1.0 },
            ));
            specs.push(TensorSpec::new(format!("{}.bias", l.name), vec![l.c_out], InitRule::Zeros));
            if l.norm_relu {
                specs.push(TensorSpec::new(format!("{}.mean", l.name), vec![l.c_out], InitRule::Zeros));
                specs.push(TensorSpec::new(format!("{}.var", l.name), vec![l.c_out], InitRule::Ones));
            }
            if let Some(kind) = self.deform_kind(l) {
                let outs = kind.raw_channels(l.k) + l.k * l.k;
                specs.push(TensorSpec::new(
                    format!("{}.offset.weight", l.name),
                    vec![l.k, l.k, l.c_in, outs],
                    InitRule::Uniform {
                        fan_in,
                        gain: PREDICTOR_GAIN,
                    },
                ));
                // the cosine-like angle input starts at one so the initial rotation is zero
                let bias_init = match kind {
                    DeformKind::Similarity | DeformKind::Affine => InitRule::OneHot { index: 2 },
                    _ => InitRule::Zeros,
                };
                specs.push(TensorSpec::new(format!("{}.offset.bias", l.name), vec![outs], bias_init));
            }
        }
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_specs().iter().map(TensorSpec::len).sum()
    }

    pub fn tap_shapes(&self, height: usize, width: usize) -> Vec<TapShape> {
        let (mut h, mut w, mut stride) = (height, width, 1);
        let mut taps = Vec::new();
        for l in &self.layers {
            h = h.div_ceil(l.stride);
            w = w.div_ceil(l.stride);
            stride *= l.stride;
            if TAP_NAMES.contains(&l.name) {
                taps.push(TapShape {
                    name: l.name,
                    height: h,
                    width: w,
                    channels: l.c_out,
                    stride,
                });
            }
        }
        taps
    }
}

#[derive(Debug, Clone)]
struct BuiltLayer {
    name: &'static str,
    conv: ConvLayer<f32>,
    predictor: Option<(DeformKind, ConvLayer<f32>)>,
}

/// A configured trunk with its weights loaded.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    layers: Vec<BuiltLayer>,
}

#[derive(Debug, Clone)]
pub struct FeatureLevel {
    pub name: &'static str,
    pub tensor: Tensor<f32>,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureHierarchy {
    pub levels: Vec<FeatureLevel>,
    pub input_height: usize,
    pub input_width: usize,
    /// Positions where a constrained offset predictor hit the undefined angle.
    pub degenerate_angles: usize,
}

impl FeatureHierarchy {
    pub fn level(&self, name: &str) -> Option<&FeatureLevel> {
        self.levels.iter().find(|l| l.name == name)
    }

    pub fn conv8(&self) -> &Tensor<f32> {
        &self.levels[2].tensor
    }
}

impl Backbone {
    pub fn from_weights(cfg: BackboneConfig, store: &WeightStore) -> Result<Self> {
        cfg.validate()?;
        store.validate(&cfg.tensor_specs())?;
        let mut layers = Vec::with_capacity(cfg.layers.len());
        for l in &cfg.layers {
            let get = |suffix: &str, dims: &[usize]| -> Result<Vec<f32>> {
                Ok(store.tensor(&format!("{}.{suffix}", l.name), dims)?.to_vec())
            };
            let norm = if l.norm_relu {
                Some(ChannelNorm {
                    mean: get("mean", &[l.c_out])?,
                    var: get("var", &[l.c_out])?,
                })
            } else {
                None
            };
            let conv = ConvLayer {
                k: l.k,
                c_in: l.c_in,
                c_out: l.c_out,
                stride: l.stride,
                weight: get("weight", &[l.k, l.k, l.c_in, l.c_out])?,
                bias: get("bias", &[l.c_out])?,
                norm,
                relu: l.norm_relu,
            };
            conv.validate()?;
            let predictor = match cfg.deform_kind(l) {
                Some(kind) => {
                    let outs = kind.raw_channels(l.k) + l.k * l.k;
                    let p = ConvLayer {
                        k: l.k,
                        c_in: l.c_in,
                        c_out: outs,
                        stride: l.stride,
                        weight: get("offset.weight", &[l.k, l.k, l.c_in, outs])?,
                        bias: get("offset.bias", &[outs])?,
                        norm: None,
                        relu: false,
                    };
                    p.validate()?;
                    Some((kind, p))
                }
                None => None,
            };
            layers.push(BuiltLayer {
                name: l.name,
                conv,
                predictor,
            });
        }
        Ok(Self { cfg, layers })
    }

    pub fn seeded(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        let store = seeded_random_weights(seed, &cfg.tensor_specs());
        Self::from_weights(cfg, &store)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Runs the trunk on a standardized single-channel image.
    pub fn forward(&self, input: &Tensor<f32>) -> Result<FeatureHierarchy> {
        if input.channels() != 1 {
            return Err(Error::shape(format!(
                "trunk expects 1 input channel, got {}",
                input.channels()
            )));
        }
        input.ensure_finite("trunk input")?;
        let mut levels = Vec::with_capacity(3);
        let mut degenerate = 0;
        let mut stride = 1;
        let mut x = input.clone();
        for l in &self.layers {
            x = match &l.predictor {
                Some((kind, p)) => {
                    let pred = predict_deform_field(&x, p, *kind, l.conv.k)?;
                    degenerate += pred.degenerate_angles;
                    deform_conv2d(&x, &l.conv, &pred.field)?
                }
                None => conv2d(&x, &l.conv)?,
            };
            stride *= l.conv.stride;
            if TAP_NAMES.contains(&l.name) {
                x.ensure_finite(l.name)?;
                levels.push(FeatureLevel {
                    name: l.name,
                    tensor: x.clone(),
                    stride,
                });
            }
        }
        Ok(FeatureHierarchy {
            levels,
            input_height: input.height(),
            input_width: input.width(),
            degenerate_angles: degenerate,
        })
    }
}

/// Normalizes `v` in place; returns `false` (leaving zeros) for a zero vector.
pub fn l2_normalize(v: &mut [f32]) -> bool {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return false;
    }
    v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
    true
}

#[derive(Debug, Clone)]
pub struct DenseDescriptors {
    pub descriptors: Tensor<f32>,
    /// Row-major flags for positions whose raw vector was zero.
    pub zero: Vec<bool>,
}

impl DenseDescriptors {
    pub fn zero_count(&self) -> usize {
        self.zero.iter().filter(|z| **z).count()
    }
}

/// Channel-wise L2 normalization of the conv8 map.
pub fn dense_descriptors(h: &FeatureHierarchy) -> DenseDescriptors {
    let mut descriptors = h.conv8().clone();
    let c = descriptors.channels();
    let zero = descriptors
        .data_mut()
        .chunks_exact_mut(c)
        .map(|px| !l2_normalize(px))
        .collect();
    DenseDescriptors { descriptors, zero }
}

/// Raw conv8 vector at image position `(x, y)`, before normalization.
pub fn sample_raw_descriptor(h: &FeatureHierarchy, x: f32, y: f32) -> Vec<f32> {
    let level = &h.levels[2];
    let s = level.stride as f32;
    let mut out = vec![0.0; level.tensor.channels()];
    level.tensor.bilinear_sample_pixel(x / s, y / s, &mut out);
    out
}

/// Unit descriptor at image position `(x, y)`; the flag is `false` for a zero vector.
pub fn sample_descriptor(h: &FeatureHierarchy, x: f32, y: f32) -> (Vec<f32>, bool) {
    let mut d = sample_raw_descriptor(h, x, y);
    let ok = l2_normalize(&mut d);
    (d, ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::standardize_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_image(h: usize, w: usize, phase: f64) -> Tensor<f32> {
        Tensor::from_fn(h, w, 1, |y, x, _| {
            let (xf, yf) = (x as f64 + phase, y as f64 + phase);
            (0.5 + 0.25 * (xf * 0.21).sin() * (yf * 0.17).cos() + 0.2 * ((xf + 2.0 * yf) * 0.05).sin())
                as f32
        })
    }

    #[test]
    fn layer_table_is_consistent() {
        for v in [
            DcnVariant::None,
            DcnVariant::Deform(DeformKind::FreeForm),
            DcnVariant::Deform(DeformKind::Affine),
        ] {
            BackboneConfig::new(v).validate().unwrap();
        }
        let mut bad = BackboneConfig::new(DcnVariant::None);
        bad.layers[3].stride = 2;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_count_matches_hand_sum() {
        let cfg = BackboneConfig::new(DcnVariant::None);
        let mut expected = 0;
        for l in LAYER_TABLE {
            expected += 9 * l.c_in * l.c_out + l.c_out;
            if l.norm_relu {
                expected += 2 * l.c_out;
            }
        }
        assert_eq!(cfg.parameter_count(), expected);

        let free = BackboneConfig::new(DcnVariant::Deform(DeformKind::FreeForm));
        // three predictors of 18 offsets + 9 modulation logits each
        assert_eq!(free.parameter_count(), expected + 3 * (9 * 128 * 27 + 27));
    }

    #[test]
    fn tap_shapes_follow_strides() {
        let cfg = BackboneConfig::new(DcnVariant::None);
        for (h, w) in [(32, 32), (33, 47), (480, 640)] {
            let taps = cfg.tap_shapes(h, w);
            assert_eq!(taps.len(), 3);
            assert_eq!((taps[0].height, taps[0].width, taps[0].channels), (h, w, 32));
            assert_eq!((taps[1].height, taps[1].width, taps[1].stride), (h.div_ceil(2), w.div_ceil(2), 2));
            assert_eq!(
                (taps[2].height, taps[2].width, taps[2].channels, taps[2].stride),
                (h.div_ceil(4), w.div_ceil(4), 128, 4)
            );
        }
    }

    #[test]
    fn forward_shapes_match_tap_table() {
        let cfg = BackboneConfig::new(DcnVariant::Deform(DeformKind::Affine));
        let net = Backbone::seeded(cfg.clone(), 3).unwrap();
        let img = standardize_tensor(&smooth_image(37, 50, 0.0));
        let h = net.forward(&img).unwrap();
        for (level, tap) in h.levels.iter().zip(cfg.tap_shapes(37, 50)) {
            assert_eq!(level.name, tap.name);
            assert_eq!(level.stride, tap.stride);
            assert_eq!(level.tensor.shape(), (tap.height, tap.width, tap.channels));
            assert!(level.tensor.is_finite());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Backbone::seeded(BackboneConfig::new(DcnVariant::Deform(DeformKind::FreeForm)), 11).unwrap();
        let img = standardize_tensor(&smooth_image(64, 64, 0.0));
        let a = net.forward(&img).unwrap();
        let b = net.forward(&img).unwrap();
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            assert_eq!(la.tensor.data(), lb.tensor.data());
        }
    }

    #[test]
    fn conv8_is_shift_equivariant_in_interior() {
        let net = Backbone::seeded(BackboneConfig::new(DcnVariant::Deform(DeformKind::FreeForm)), 5).unwrap();
        let big = smooth_image(96, 100, 0.0);
        // b is a shifted 4 px to the right
        let a = big.crop(0, 4, 96, 96);
        let b = big.crop(0, 0, 96, 96);
        // raw intensities, no standardization, so both crops see identical values
        let fa = net.forward(&a).unwrap();
        let fb = net.forward(&b).unwrap();
        let (ta, tb) = (fa.conv8(), fb.conv8());
        let mut worst = 0.0f32;
        for y in 8..ta.height() - 8 {
            for x in 8..ta.width() - 8 {
                for c in 0..ta.channels() {
                    worst = worst.max((ta.get(y, x, c) - tb.get(y, x + 1, c)).abs());
                }
            }
        }
        assert!(worst < 1e-4, "max deviation {worst}");
    }

    #[test]
    fn wrong_weights_are_rejected() {
        let cfg = BackboneConfig::new(DcnVariant::None);
        let other = BackboneConfig::new(DcnVariant::Deform(DeformKind::Similarity));
        let store = seeded_random_weights(1, &other.tensor_specs());
        let err = Backbone::from_weights(cfg, &store).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn dense_descriptors_are_unit_or_flagged() {
        let mut raw = Tensor::zeros(1, 2, 128);
        raw.set(0, 0, 0, 3.0);
        raw.set(0, 0, 1, 4.0);
        let h = FeatureHierarchy {
            levels: vec![
                FeatureLevel { name: "conv1", tensor: Tensor::zeros(4, 8, 32), stride: 1 },
                FeatureLevel { name: "conv3", tensor: Tensor::zeros(2, 4, 64), stride: 2 },
                FeatureLevel { name: "conv8", tensor: raw, stride: 4 },
            ],
            input_height: 4,
            input_width: 8,
            degenerate_angles: 0,
        };
        let d = dense_descriptors(&h);
        assert!((d.descriptors.get(0, 0, 0) - 0.6).abs() < 1e-7);
        assert!((d.descriptors.get(0, 0, 1) - 0.8).abs() < 1e-7);
        assert_eq!(d.zero, vec![false, true]);
        assert!(d.descriptors.pixel(0, 1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn real_descriptors_have_unit_norm_and_sample_consistently() {
        let net = Backbone::seeded(BackboneConfig::new(DcnVariant::Deform(DeformKind::Homography)), 2).unwrap();
        let img = standardize_tensor(&smooth_image(48, 48, 1.5));
        let h = net.forward(&img).unwrap();
        let d = dense_descriptors(&h);
        for (px, z) in d.descriptors.data().chunks_exact(128).zip(&d.zero) {
            let n: f32 = px.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(*z || (n - 1.0).abs() < 1e-5);
        }
        // a cell center maps to the dense descriptor there
        let (s, _) = sample_descriptor(&h, 20.0, 12.0);
        for (a, b) in s.iter().zip(d.descriptors.pixel(3, 5)) {
            assert!((a - b).abs() < 1e-6);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (x, y) = (rng.random_range(0.0..47.0f32), rng.random_range(0.0..47.0f32));
            let (s, ok) = sample_descriptor(&h, x, y);
            assert!(ok);
            let n: f32 = s.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
            let r0 = sample_raw_descriptor(&h, x, y);
            let r1 = sample_raw_descriptor(&h, x + 1e-3, y);
            let diff = r0.iter().zip(&r1).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(diff < 1e-2);
        }
    }

    #[test]
    fn midpoint_sample_averages_linear_field() {
        let raw = Tensor::from_fn(2, 2, 128, |y, x, c| (1 + c + 3 * x + 5 * y) as f32);
        let h = FeatureHierarchy {
            levels: vec![
                FeatureLevel { name: "conv1", tensor: Tensor::zeros(8, 8, 32), stride: 1 },
                FeatureLevel { name: "conv3", tensor: Tensor::zeros(4, 4, 64), stride: 2 },
                FeatureLevel { name: "conv8", tensor: raw.clone(), stride: 4 },
            ],
            input_height: 8,
            input_width: 8,
            degenerate_angles: 0,
        };
        let (s, _) = sample_descriptor(&h, 2.0, 0.0);
        let mut avg: Vec<f32> = raw.pixel(0, 0).iter().zip(raw.pixel(0, 1)).map(|(a, b)| 0.5 * (a + b)).collect();
        l2_normalize(&mut avg);
        for (a, b) in s.iter().zip(&avg) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
