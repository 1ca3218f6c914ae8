//! Per-level detection scores.
//!
//! Neighborhoods are 3×3 taps spaced by `dilation`, with out-of-range taps
//! clamped to the border.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `ln(1 + eˣ)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Clamped source coordinates of the nine taps around `(y, x)`.
#[inline]
pub(crate) fn taps(h: usize, w: usize, y: usize, x: usize, dilation: usize) -> [(usize, usize); 9] {
    let d = dilation as isize;
    let mut out = [(0, 0); 9];
    let mut i = 0;
    for dy in -1..=1isize {
        for dx in -1..=1isize {
            let yy = (y as isize + dy * d).clamp(0, h as isize - 1) as usize;
            let xx = (x as isize + dx * d).clamp(0, w as isize - 1) as usize;
            out[i] = (yy, xx);
            i += 1;
        }
    }
    out
}

/// Spatial softmax of each channel over its neighborhood.
pub fn d2_local_score<T: Scalar>(y: &Tensor<T>, dilation: usize) -> Tensor<T> {
    let (h, w, c) = y.shape();
    let mut out = Tensor::zeros(h, w, c);
    for i in 0..h {
        for j in 0..w {
            let nb = taps(h, w, i, j, dilation);
            for ch in 0..c {
                let m = nb
                    .iter()
                    .map(|&(a, b)| y.get(a, b, ch))
                    .fold(T::neg_infinity(), T::max);
                let denom: T = nb.iter().map(|&(a, b)| (y.get(a, b, ch) - m).exp()).sum();
                out.set(i, j, ch, (y.get(i, j, ch) - m).exp() / denom);
            }
        }
    }
    out
}

/// Channel ratio `yᶜ / maxₜ yᵗ`; positions with a non-positive maximum are
/// zeroed and flagged (row-major flags).
pub fn d2_channel_score<T: Scalar>(y: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let (h, w, c) = y.shape();
    let mut out = Tensor::zeros(h, w, c);
    let mut flags = vec![false; h * w];
    for (p, (src, dst)) in y
        .data()
        .chunks_exact(c)
        .zip(out.data_mut().chunks_exact_mut(c))
        .enumerate()
    {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        if m <= T::zero() {
            flags[p] = true;
            continue;
        }
        for (d, s) in dst.iter_mut().zip(src) {
            *d = *s / m;
        }
    }
    (out, flags)
}

/// `(α, β)` with `βᶜ = softplus(yᶜ − mean over channels)` and
/// `αᶜ = softplus(yᶜ − mean over the dilated neighborhood)`.
pub fn peakiness_scores<T: Scalar>(y: &Tensor<T>, dilation: usize) -> (Tensor<T>, Tensor<T>) {
    let (h, w, c) = y.shape();
    let mut alpha = Tensor::zeros(h, w, c);
    let mut beta = Tensor::zeros(h, w, c);
    let ninth = T::of(1.0 / 9.0);
    let inv_c = T::of(1.0 / c as f64);
    for i in 0..h {
        for j in 0..w {
            let nb = taps(h, w, i, j, dilation);
            let px = y.pixel(i, j);
            let mean_c: T = px.iter().copied().sum::<T>() * inv_c;
            for ch in 0..c {
                let mean_n: T = nb.iter().map(|&(a, b)| y.get(a, b, ch)).sum::<T>() * ninth;
                alpha.set(i, j, ch, softplus(px[ch] - mean_n));
                beta.set(i, j, ch, softplus(px[ch] - mean_c));
            }
        }
    }
    (alpha, beta)
}

/// `s = maxₜ αᵗβᵗ` per position, as an `(H, W, 1)` map.
pub fn combine_scores<T: Scalar>(alpha: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    if alpha.shape() != beta.shape() {
        return Err(Error::shape("α and β differ in shape"));
    }
    let (h, w, c) = alpha.shape();
    let data = alpha
        .data()
        .chunks_exact(c)
        .zip(beta.data().chunks_exact(c))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| *x * *y)
                .fold(T::neg_infinity(), T::max)
        })
        .collect();
    Tensor::from_vec(h, w, 1, data)
}

/// Gradient of `Σ g·s` through [`combine_scores`]: returns `(∂/∂α, ∂/∂β)`.
/// The maximizing channel takes the whole gradient (first index on ties).
pub fn combine_scores_backward<T: Scalar>(
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (h, w, c) = alpha.shape();
    let mut ga = Tensor::zeros(h, w, c);
    let mut gb = Tensor::zeros(h, w, c);
    for i in 0..h {
        for j in 0..w {
            let (a, b) = (alpha.pixel(i, j), beta.pixel(i, j));
            let mut best = 0;
            for t in 1..c {
                if a[t] * b[t] > a[best] * b[best] {
                    best = t;
                }
            }
            let g = grad.get(i, j, 0);
            ga.set(i, j, best, g * b[best]);
            gb.set(i, j, best, g * a[best]);
        }
    }
    (ga, gb)
}

/// Single-level peakiness score `s = maxₜ αᵗβᵗ`.
pub fn peakiness_score<T: Scalar>(y: &Tensor<T>, dilation: usize) -> Tensor<T> {
    let (a, b) = peakiness_scores(y, dilation);
    combine_scores(&a, &b).expect("α and β share a shape")
}

/// Gradient of `Σ g·peakiness_score(y)` with respect to `y`.
pub fn peakiness_score_backward<T: Scalar>(y: &Tensor<T>, dilation: usize, grad: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = y.shape();
    let (alpha, beta) = peakiness_scores(y, dilation);
    let (ga, gb) = combine_scores_backward(&alpha, &beta, grad);
    let ninth = T::of(1.0 / 9.0);
    let inv_c = T::of(1.0 / c as f64);
    let mut gy = Tensor::zeros(h, w, c);
    for i in 0..h {
        for j in 0..w {
            let nb = taps(h, w, i, j, dilation);
            let px = y.pixel(i, j).to_vec();
            let mean_c: T = px.iter().copied().sum::<T>() * inv_c;
            // β branch: softplus'(yᶜ − mean) · (δ − 1/C)
            let gbeta: Vec<T> = (0..c)
                .map(|ch| gb.get(i, j, ch) * sigmoid(px[ch] - mean_c))
                .collect();
            let total: T = gbeta.iter().copied().sum();
            for ch in 0..c {
                let v = gy.get(i, j, ch) + gbeta[ch] - total * inv_c;
                gy.set(i, j, ch, v);
            }
            // α branch: softplus'(yᶜ − neighborhood mean) · (δ − tap share)
            for ch in 0..c {
                let g = ga.get(i, j, ch);
                if g == T::zero() {
                    continue;
                }
                let mean_n: T = nb.iter().map(|&(a, b)| y.get(a, b, ch)).sum::<T>() * ninth;
                let d = g * sigmoid(px[ch] - mean_n);
                gy.set(i, j, ch, gy.get(i, j, ch) + d);
                for &(a, b) in &nb {
                    gy.set(a, b, ch, gy.get(a, b, ch) - d * ninth);
                }
            }
        }
    }
    gy
}

/// Baseline score: spatial softmax times channel ratio.
pub fn d2_score<T: Scalar>(y: &Tensor<T>, dilation: usize) -> Tensor<T> {
    let a = d2_local_score(y, dilation);
    let (b, _) = d2_channel_score(y);
    combine_scores(&a, &b).expect("α and β share a shape")
}

/// Weighted mean `Σ wₗ sₗ / Σ wₗ` of equally sized maps.
pub fn muldet_fuse<T: Scalar>(levels: &[Tensor<T>], weights: &[f64]) -> Result<Tensor<T>> {
    if levels.is_empty() || levels.len() != weights.len() {
        return Err(Error::validation(format!(
            "{} score maps for {} weights",
            levels.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::validation("level weights must be positive"));
    }
    let shape = levels[0].shape();
    if levels.iter().any(|l| l.shape() != shape) {
        return Err(Error::shape("score maps differ in shape"));
    }
    let total: f64 = weights.iter().sum();
    let mut out = Tensor::zeros(shape.0, shape.1, shape.2);
    for (l, wt) in levels.iter().zip(weights) {
        let wt = T::of(wt / total);
        for (o, v) in out.data_mut().iter_mut().zip(l.data()) {
            *o = *o + wt * *v;
        }
    }
    Ok(out)
}
