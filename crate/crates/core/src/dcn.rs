//! Regular and modulated deformable 3×3-style convolutions.
//!
//! Output cell `i` of a stride-`s` layer is centered on input position `s·i`;
//! taps falling outside the input are clamped to the edge. Deformable layers
//! use a single deformation group shared by every input channel.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{
    activate_angle, activate_residual, activate_scale, kernel_grid, offsets_from_transform,
    DeformKind, LocalTransform,
};
use crate::tensor::{Scalar, Tensor};

/// Added to the stored variance before normalizing.
pub const NORM_EPS: f64 = 1e-5;

/// Per-channel normalization statistics (no learned affine).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNorm<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T = f32> {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    /// Layout `[ky][kx][c_in][c_out]`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub norm: Option<ChannelNorm<T>>,
    pub relu: bool,
}

impl<T: Scalar> ConvLayer<T> {
    /// A layer with zero weights and bias and no post-processing.
    pub fn zeros(k: usize, c_in: usize, c_out: usize, stride: usize) -> Self {
        Self {
            k,
            c_in,
            c_out,
            stride,
            weight: vec![T::zero(); k * k * c_in * c_out],
            bias: vec![T::zero(); c_out],
            norm: None,
            relu: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k % 2 == 0 {
            return Err(Error::validation(format!("kernel size {} is even", self.k)));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::validation(format!("stride {} not in {{1, 2}}", self.stride)));
        }
        if self.weight.len() != self.k * self.k * self.c_in * self.c_out {
            return Err(Error::shape("kernel weight count"));
        }
        if self.bias.len() != self.c_out {
            return Err(Error::shape("bias length"));
        }
        if let Some(n) = &self.norm {
            if n.mean.len() != self.c_out || n.var.len() != self.c_out {
                return Err(Error::shape("normalization statistics length"));
            }
            if n.var.iter().any(|v| *v < T::zero()) {
                return Err(Error::validation("negative variance"));
            }
        }
        Ok(())
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    #[inline]
    fn weight_row(&self, tap: usize, ci: usize) -> &[T] {
        let start = (tap * self.c_in + ci) * self.c_out;
        &self.weight[start..start + self.c_out]
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect::<Vec<_>>();
        ConvLayer {
            k: self.k,
            c_in: self.c_in,
            c_out: self.c_out,
            stride: self.stride,
            weight: conv(&self.weight),
            bias: conv(&self.bias),
            norm: self.norm.as_ref().map(|n| ChannelNorm {
                mean: conv(&n.mean),
                var: conv(&n.var),
            }),
            relu: self.relu,
        }
    }

    /// Adds the bias, then the optional normalization and ReLU, in place.
    pub fn apply_post(&self, t: &mut Tensor<T>) {
        let scale: Option<Vec<T>> = self.norm.as_ref().map(|n| {
            n.var
                .iter()
                .map(|v| T::one() / (*v + T::of(NORM_EPS)).sqrt())
                .collect()
        });
        for px in t.data_mut().chunks_exact_mut(self.c_out) {
            for (c, v) in px.iter_mut().enumerate() {
                let mut y = *v + self.bias[c];
                if let (Some(n), Some(s)) = (&self.norm, &scale) {
                    y = (y - n.mean[c]) * s[c];
                }
                if self.relu && y < T::zero() {
                    y = T::zero();
                }
                *v = y;
            }
        }
    }
}

/// Per-position sampling displacements and amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformField<T = f32> {
    /// `(H, W, 2k²)`, interleaved `(Δx, Δy)` per tap.
    pub offsets: Tensor<T>,
    /// `(H, W, k²)`, values in `(0, 1)`.
    pub modulation: Tensor<T>,
}

impl<T: Scalar> DeformField<T> {
    pub fn uniform(h: usize, w: usize, k: usize, modulation: T) -> Self {
        Self {
            offsets: Tensor::zeros(h, w, 2 * k * k),
            modulation: Tensor::filled(h, w, k * k, modulation),
        }
    }

    fn check(&self, out_h: usize, out_w: usize, k: usize) -> Result<()> {
        let want_off = (out_h, out_w, 2 * k * k);
        let want_mod = (out_h, out_w, k * k);
        if self.offsets.shape() != want_off || self.modulation.shape() != want_mod {
            return Err(Error::shape(format!(
                "deform field {:?}/{:?} does not match output grid {want_off:?}/{want_mod:?}",
                self.offsets.shape(),
                self.modulation.shape()
            )));
        }
        Ok(())
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, layer: &ConvLayer<T>) -> Result<()> {
    layer.validate()?;
    if x.channels() != layer.c_in {
        return Err(Error::shape(format!(
            "input has {} channels, layer expects {}",
            x.channels(),
            layer.c_in
        )));
    }
    Ok(())
}

/// `y(p) = Σₙ w(pₙ)·x(p + pₙ)` without bias or post-processing.
pub fn conv2d_raw<T: Scalar>(x: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    check_input(x, layer)?;
    let (out_h, out_w) = layer.output_size(x.height(), x.width());
    let grid = kernel_grid(layer.k);
    let mut out = Tensor::zeros(out_h, out_w, layer.c_out);
    let row_len = out_w * layer.c_out;
    out.data_mut()
        .par_chunks_mut(row_len.max(1))
        .enumerate()
        .for_each(|(oy, row)| {
            let cy = (oy * layer.stride) as isize;
            for (ox, acc) in row.chunks_exact_mut(layer.c_out).enumerate() {
                let cx = (ox * layer.stride) as isize;
                for (tap, (u, v)) in grid.iter().enumerate() {
                    let sy = (cy + *v as isize).clamp(0, x.height() as isize - 1) as usize;
                    let sx = (cx + *u as isize).clamp(0, x.width() as isize - 1) as usize;
                    let px = x.pixel(sy, sx);
                    for (ci, &val) in px.iter().enumerate() {
                        if val == T::zero() {
                            continue;
                        }
                        axpy(acc, val, layer.weight_row(tap, ci));
                    }
                }
            }
        });
    Ok(out)
}

/// Regular convolution followed by bias and the layer's post-processing.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    let mut y = conv2d_raw(x, layer)?;
    layer.apply_post(&mut y);
    Ok(y)
}

#[inline(always)]
fn axpy<T: Scalar>(acc: &mut [T], a: T, w: &[T]) {
    for (o, &wv) in acc.iter_mut().zip(w) {
        *o = *o + a * wv;
    }
}

/// `y(p) = Σₙ w(pₙ)·x(p + pₙ + Δpₙ)·Δmₙ` without bias or post-processing.
pub fn deform_conv2d_raw<T: Scalar>(
    x: &Tensor<T>,
    layer: &ConvLayer<T>,
    field: &DeformField<T>,
) -> Result<Tensor<T>> {
    check_input(x, layer)?;
    let (out_h, out_w) = layer.output_size(x.height(), x.width());
    field.check(out_h, out_w, layer.k)?;
    let grid = kernel_grid(layer.k);
    let mut out = Tensor::zeros(out_h, out_w, layer.c_out);
    let row_len = out_w * layer.c_out;
    out.data_mut()
        .par_chunks_mut(row_len.max(1))
        .enumerate()
        .for_each(|(oy, row)| {
            let mut sample = vec![T::zero(); layer.c_in];
            for (ox, acc) in row.chunks_exact_mut(layer.c_out).enumerate() {
                let off = field.offsets.pixel(oy, ox);
                let amp = field.modulation.pixel(oy, ox);
                for (tap, (u, v)) in grid.iter().enumerate() {
                    let sx = T::of((ox * layer.stride) as f64 + u) + off[2 * tap];
                    let sy = T::of((oy * layer.stride) as f64 + v) + off[2 * tap + 1];
                    x.bilinear_sample_pixel(sx, sy, &mut sample);
                    let m = amp[tap];
                    for (ci, &val) in sample.iter().enumerate() {
                        let a = val * m;
                        if a == T::zero() {
                            continue;
                        }
                        axpy(acc, a, layer.weight_row(tap, ci));
                    }
                }
            }
        });
    Ok(out)
}

pub fn deform_conv2d<T: Scalar>(
    x: &Tensor<T>,
    layer: &ConvLayer<T>,
    field: &DeformField<T>,
) -> Result<Tensor<T>> {
    let mut y = deform_conv2d_raw(x, layer, field)?;
    layer.apply_post(&mut y);
    Ok(y)
}

/// Gradient of `Σ grad_out ⊙ deform_conv2d_raw(x, layer, field)` with respect
/// to the field's offsets and modulation.
pub fn deform_conv2d_field_grad<T: Scalar>(
    x: &Tensor<T>,
    layer: &ConvLayer<T>,
    field: &DeformField<T>,
    grad_out: &Tensor<T>,
) -> Result<DeformField<T>> {
    check_input(x, layer)?;
    let (out_h, out_w) = layer.output_size(x.height(), x.width());
    field.check(out_h, out_w, layer.k)?;
    if grad_out.shape() != (out_h, out_w, layer.c_out) {
        return Err(Error::shape("upstream gradient shape"));
    }
    let grid = kernel_grid(layer.k);
    let kk = grid.len();
    let mut g_off = Tensor::zeros(out_h, out_w, 2 * kk);
    let mut g_mod = Tensor::zeros(out_h, out_w, kk);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let g = grad_out.pixel(oy, ox);
            let off = field.offsets.pixel(oy, ox);
            let amp = field.modulation.pixel(oy, ox);
            for (tap, (u, v)) in grid.iter().enumerate() {
                let sx = T::of((ox * layer.stride) as f64 + u) + off[2 * tap];
                let sy = T::of((oy * layer.stride) as f64 + v) + off[2 * tap + 1];
                let (mut dval, mut dx, mut dy) = (T::zero(), T::zero(), T::zero());
                for ci in 0..layer.c_in {
                    // contraction of the upstream gradient with this tap's kernel column
                    let wg: T = layer
                        .weight_row(tap, ci)
                        .iter()
                        .zip(g)
                        .map(|(&w, &gg)| w * gg)
                        .sum();
                    if wg == T::zero() {
                        continue;
                    }
                    let (val, gx, gy) = x.bilinear_sample_grad(sx, sy, ci);
                    dval = dval + wg * val;
                    dx = dx + wg * gx;
                    dy = dy + wg * gy;
                }
                g_mod.set(oy, ox, tap, dval);
                g_off.set(oy, ox, 2 * tap, dx * amp[tap]);
                g_off.set(oy, ox, 2 * tap + 1, dy * amp[tap]);
            }
        }
    }
    Ok(DeformField {
        offsets: g_off,
        modulation: g_mod,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Output of [`predict_deform_field`].
#[derive(Debug, Clone)]
pub struct PredictedField<T = f32> {
    pub field: DeformField<T>,
    /// Positions whose angle inputs were both zero (angle forced to 0).
    pub degenerate_angles: usize,
}

/// Runs the offset predictor and turns its raw outputs into a deformation field.
///
/// The predictor emits the variant's raw parameters followed by `k²`
/// modulation logits. Constrained variants are activated, converted to a
/// transform and expanded to per-tap offsets.
pub fn predict_deform_field<T: Scalar>(
    x: &Tensor<T>,
    predictor: &ConvLayer<T>,
    kind: DeformKind,
    k: usize,
) -> Result<PredictedField<T>> {
    let params = kind.raw_channels(k);
    if predictor.c_out != params + k * k {
        return Err(Error::shape(format!(
            "{} predictor needs {} outputs, has {}",
            kind.name(),
            params + k * k,
            predictor.c_out
        )));
    }
    let mut raw = conv2d_raw(x, predictor)?;
    // bias only; predictors carry no normalization
    let bias_only = ConvLayer {
        norm: None,
        relu: false,
        ..predictor.clone()
    };
    bias_only.apply_post(&mut raw);

    let (h, w, _) = raw.shape();
    let kk = k * k;
    let mut offsets = Tensor::zeros(h, w, 2 * kk);
    let mut modulation = Tensor::zeros(h, w, kk);
    let mut degenerate = 0;
    for y in 0..h {
        for xx in 0..w {
            let r: Vec<f64> = raw.pixel(y, xx).iter().map(|v| v.f64()).collect();
            let transform = match kind {
                DeformKind::FreeForm => LocalTransform::FreeForm(r[..2 * kk].to_vec()),
                DeformKind::Similarity | DeformKind::Affine => {
                    let angle = activate_angle(r[1], r[2]);
                    degenerate += angle.degenerate as usize;
                    let scale = activate_scale(r[0]);
                    if kind == DeformKind::Similarity {
                        LocalTransform::Similarity {
                            scale,
                            angle: angle.theta,
                        }
                    } else {
                        LocalTransform::Affine {
                            scale,
                            angle: angle.theta,
                            residual: [
                                activate_residual(r[3]),
                                activate_residual(r[4]),
                                activate_residual(r[5]),
                            ],
                        }
                    }
                }
                DeformKind::Homography => LocalTransform::Homography {
                    corner_offsets: std::array::from_fn(|i| r[i].tanh()),
                },
            };
            let off = offsets_from_transform(&transform, k)?;
            for (dst, v) in offsets.pixel_mut(y, xx).iter_mut().zip(off) {
                *dst = T::of(v);
            }
            for (dst, logit) in modulation.pixel_mut(y, xx).iter_mut().zip(&r[params..]) {
                *dst = T::of(sigmoid(*logit));
            }
        }
    }
    Ok(PredictedField {
        field: DeformField {
            offsets,
            modulation,
        },
        degenerate_angles: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_layer(rng: &mut ChaCha8Rng, k: usize, ci: usize, co: usize, s: usize) -> ConvLayer<f64> {
        let mut l = ConvLayer::zeros(k, ci, co, s);
        l.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        l.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        l
    }

    /// Direct nested-loop convolution with clamp-to-edge indexing.
    fn naive_conv(x: &Tensor<f64>, l: &ConvLayer<f64>) -> Tensor<f64> {
        let (oh, ow) = l.output_size(x.height(), x.width());
        let r = (l.k / 2) as isize;
        Tensor::from_fn(oh, ow, l.c_out, |oy, ox, co| {
            let mut s = 0.0;
            for ky in 0..l.k {
                for kx in 0..l.k {
                    for ci in 0..l.c_in {
                        let yy = (oy * l.stride) as isize + ky as isize - r;
                        let xx = (ox * l.stride) as isize + kx as isize - r;
                        let w = l.weight[((ky * l.k + kx) * l.c_in + ci) * l.c_out + co];
                        s += w * x.get_clamped(yy, xx, ci);
                    }
                }
            }
            s
        })
    }

    #[test]
    fn unit_1x1_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 4, 5, 1);
        let mut l = ConvLayer::<f64>::zeros(1, 1, 1, 1);
        l.weight[0] = 1.0;
        assert_eq!(conv2d(&x, &l).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let x = Tensor::<f64>::filled(6, 6, 1, 0.7);
        let mut l = ConvLayer::<f64>::zeros(3, 1, 1, 1);
        l.weight.iter_mut().for_each(|w| *w = 1.0);
        let y = conv2d(&x, &l).unwrap();
        assert!((y.get(3, 3, 0) - 6.3).abs() < 1e-12);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for stride in [1, 2] {
            let x = random_tensor(&mut rng, 5, 5, 3);
            let l = random_layer(&mut rng, 3, 3, 4, stride);
            let got = conv2d_raw(&x, &l).unwrap();
            assert!(got.max_abs_diff(&naive_conv(&x, &l)) < 1e-6);
        }
    }

    #[test]
    fn stride_two_output_size_rounds_up() {
        let l = ConvLayer::<f32>::zeros(3, 1, 1, 2);
        assert_eq!(l.output_size(5, 8), (3, 4));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros(4, 4, 2);
        let l = ConvLayer::<f32>::zeros(3, 3, 1, 1);
        assert!(matches!(conv2d(&x, &l), Err(Error::Shape(_))));
    }

    #[test]
    fn even_kernel_is_rejected() {
        let x = Tensor::<f32>::zeros(4, 4, 1);
        let l = ConvLayer::<f32>::zeros(2, 1, 1, 1);
        assert!(matches!(conv2d(&x, &l), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_offsets_half_modulation_halves_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 7, 6, 2);
        let l = random_layer(&mut rng, 3, 2, 3, 1);
        let field = DeformField::uniform(7, 6, 3, 0.5);
        let d = deform_conv2d_raw(&x, &l, &field).unwrap();
        let c = conv2d_raw(&x, &l).unwrap().map(|v| 0.5 * v);
        assert!(d.max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn integer_offset_equals_shifted_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, 8, 9, 2);
        let l = random_layer(&mut rng, 3, 2, 2, 1);
        let mut field = DeformField::uniform(8, 9, 3, 1.0);
        for px in field.offsets.data_mut().chunks_exact_mut(2) {
            px[0] = 1.0;
        }
        let d = deform_conv2d_raw(&x, &l, &field).unwrap();
        // oracle: shift the image left by one pixel, then convolve
        let shifted = Tensor::from_fn(8, 9, 2, |y, xx, c| x.get_clamped(y as isize, xx as isize + 1, c));
        let c = conv2d_raw(&shifted, &l).unwrap();
        for y in 1..7 {
            for xx in 1..7 {
                for co in 0..2 {
                    assert!((d.get(y, xx, co) - c.get(y, xx, co)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn half_pixel_offset_on_ramp() {
        let x = Tensor::<f64>::from_fn(6, 10, 1, |_, xx, _| xx as f64 * 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = random_layer(&mut rng, 3, 1, 1, 1);
        let mut field = DeformField::uniform(6, 10, 3, 1.0);
        for px in field.offsets.data_mut().chunks_exact_mut(2) {
            px[0] = 0.5;
        }
        let d = deform_conv2d_raw(&x, &l, &field).unwrap();
        let shifted = Tensor::<f64>::from_fn(6, 10, 1, |_, xx, _| (xx as f64 + 0.5) * 0.3);
        let c = conv2d_raw(&shifted, &l).unwrap();
        for y in 0..6 {
            for xx in 1..7 {
                assert!((d.get(y, xx, 0) - c.get(y, xx, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn field_shape_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros(4, 4, 1);
        let l = ConvLayer::<f32>::zeros(3, 1, 1, 1);
        let field = DeformField::uniform(3, 4, 3, 0.5);
        assert!(matches!(deform_conv2d(&x, &l, &field), Err(Error::Shape(_))));
    }

    #[test]
    fn offset_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&mut rng, 6, 6, 2);
        let l = random_layer(&mut rng, 3, 2, 2, 1);
        let mut field = DeformField::uniform(6, 6, 3, 0.5);
        field
            .offsets
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.1..0.9) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        field
            .modulation
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.1..0.9));
        let g = random_tensor(&mut rng, 6, 6, 2);
        let loss = |f: &DeformField<f64>| -> f64 {
            let y = deform_conv2d_raw(&x, &l, f).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let grad = deform_conv2d_field_grad(&x, &l, &field, &g).unwrap();
        let h = 1e-4;
        for i in 0..field.offsets.data().len() {
            let mut p = field.clone();
            p.offsets.data_mut()[i] += h;
            let mut m = field.clone();
            m.offsets.data_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grad.offsets.data()[i]).abs() < 1e-4, "offset {i}");
        }
        for i in 0..field.modulation.data().len() {
            let mut p = field.clone();
            p.modulation.data_mut()[i] += h;
            let mut m = field.clone();
            m.modulation.data_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grad.modulation.data()[i]).abs() < 1e-4, "modulation {i}");
        }
    }

    #[test]
    fn zero_predictor_gives_identity_field() {
        let x = Tensor::<f32>::from_fn(5, 5, 4, |y, xx, c| (y + xx + c) as f32);
        for kind in [DeformKind::FreeForm, DeformKind::Similarity, DeformKind::Affine, DeformKind::Homography] {
            let pred = ConvLayer::<f32>::zeros(3, 4, kind.raw_channels(3) + 9, 1);
            let out = predict_deform_field(&x, &pred, kind, 3).unwrap();
            assert!(out.field.offsets.data().iter().all(|&v| v == 0.0), "{kind:?}");
            assert!(out.field.modulation.data().iter().all(|&v| v == 0.5));
            let expect_degenerate = matches!(kind, DeformKind::Similarity | DeformKind::Affine);
            assert_eq!(out.degenerate_angles > 0, expect_degenerate);
        }
    }

    #[test]
    fn affine_field_matches_per_position_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, 5, 4, 3);
        let mut pred = random_layer(&mut rng, 3, 3, 6 + 9, 1);
        pred.weight.iter_mut().for_each(|w| *w *= 0.3);
        let out = predict_deform_field(&x, &pred, DeformKind::Affine, 3).unwrap();
        let mut raw = conv2d_raw(&x, &pred).unwrap();
        ConvLayer { norm: None, relu: false, ..pred.clone() }.apply_post(&mut raw);
        for y in 0..5 {
            for xx in 0..4 {
                let r = raw.pixel(y, xx);
                let t = LocalTransform::Affine {
                    scale: r[0].tanh().exp(),
                    angle: r[1].atan2(r[2]),
                    residual: [r[3].tanh(), r[4].tanh(), r[5].tanh()],
                };
                let want = offsets_from_transform(&t, 3).unwrap();
                for (a, b) in out.field.offsets.pixel(y, xx).iter().zip(&want) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn predictor_channel_count_is_checked() {
        let x = Tensor::<f32>::zeros(4, 4, 2);
        let pred = ConvLayer::<f32>::zeros(3, 2, 10, 1);
        assert!(predict_deform_field(&x, &pred, DeformKind::Similarity, 3).is_err());
    }
}
