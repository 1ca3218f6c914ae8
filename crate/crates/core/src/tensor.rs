//! Dense `height × width × channels` tensors and the sampling primitives built on them.
//!
//! Storage is row-major with the channel index varying fastest, so the feature
//! vector of one pixel is a contiguous slice. Pixel centers sit at integer
//! coordinates; anything sampled outside `[0, W-1] × [0, H-1]` is clamped to the
//! border.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. `f32` is the inference precision, `f64` the
/// evaluation precision used for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Wraps `data` after checking its length and that every value is finite.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width}x{channels} tensor",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at flat index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.height && x < self.width && c < self.channels);
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// All channels of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Value at integer coordinates with clamp-to-edge for out-of-range indices.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize, c: usize) -> T {
        let yy = y.clamp(0, self.height as isize - 1) as usize;
        let xx = x.clamp(0, self.width as isize - 1) as usize;
        self.get(yy, xx, c)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Extracts one channel as a single-channel tensor.
    pub fn channel(&self, c: usize) -> Self {
        Self::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x, c))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains non-finite values")))
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bilinear interpolation of channel `c` at fractional `(x, y)`.
    #[inline]
    pub fn bilinear_sample(&self, x: T, y: T, c: usize) -> T {
        let s = BilinearTaps::new(x, y, self.width, self.height);
        s.w00 * self.get(s.y0, s.x0, c)
            + s.w01 * self.get(s.y0, s.x1, c)
            + s.w10 * self.get(s.y1, s.x0, c)
            + s.w11 * self.get(s.y1, s.x1, c)
    }

    /// Bilinear interpolation of every channel at `(x, y)`, written into `out`.
    #[inline]
    pub fn bilinear_sample_pixel(&self, x: T, y: T, out: &mut [T]) {
        let s = BilinearTaps::new(x, y, self.width, self.height);
        let p00 = self.pixel(s.y0, s.x0);
        let p01 = self.pixel(s.y0, s.x1);
        let p10 = self.pixel(s.y1, s.x0);
        let p11 = self.pixel(s.y1, s.x1);
        for (c, o) in out.iter_mut().enumerate() {
            *o = s.w00 * p00[c] + s.w01 * p01[c] + s.w10 * p10[c] + s.w11 * p11[c];
        }
    }

    /// Value and partial derivatives `(v, ∂v/∂x, ∂v/∂y)` of the bilinear sample.
    /// Derivatives vanish along an axis whose coordinate was clamped.
    pub fn bilinear_sample_grad(&self, x: T, y: T, c: usize) -> (T, T, T) {
        let s = BilinearTaps::new(x, y, self.width, self.height);
        let v00 = self.get(s.y0, s.x0, c);
        let v01 = self.get(s.y0, s.x1, c);
        let v10 = self.get(s.y1, s.x0, c);
        let v11 = self.get(s.y1, s.x1, c);
        let v = s.w00 * v00 + s.w01 * v01 + s.w10 * v10 + s.w11 * v11;
        let one = T::one();
        let dx = if s.clamped_x {
            T::zero()
        } else {
            (one - s.fy) * (v01 - v00) + s.fy * (v11 - v10)
        };
        let dy = if s.clamped_y {
            T::zero()
        } else {
            (one - s.fx) * (v10 - v00) + s.fx * (v11 - v01)
        };
        (v, dx, dy)
    }

    /// Resamples to `out_h × out_w`, reading output pixel `(X, Y)` from source
    /// coordinates `(X · step_x, Y · step_y)`.
    pub fn resample(&self, out_h: usize, out_w: usize, step_y: f64, step_x: f64) -> Self {
        let mut out = Self::zeros(out_h, out_w, self.channels);
        for yy in 0..out_h {
            let sy = T::of(yy as f64 * step_y);
            for xx in 0..out_w {
                let sx = T::of(xx as f64 * step_x);
                let ch = self.channels;
                let start = (yy * out_w + xx) * ch;
                self.bilinear_sample_pixel(sx, sy, &mut out.data[start..start + ch]);
            }
        }
        out
    }

    /// Upsamples by an integer factor. Output pixel `X` reads source coordinate
    /// `X / factor`, which is where a cell of a stride-`factor` map is centered.
    pub fn upsample_bilinear(&self, factor: usize) -> Self {
        assert!(factor >= 1, "upsampling factor must be >= 1");
        if factor == 1 {
            return self.clone();
        }
        let step = 1.0 / factor as f64;
        self.resample(self.height * factor, self.width * factor, step, step)
    }

    /// Crops the top-left `h × w` window.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop out of bounds");
        Self::from_fn(h, w, self.channels, |y, x, c| self.get(y0 + y, x0 + x, c))
    }
}

/// Neighbor indices and weights of one bilinear lookup.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearTaps<T> {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: T,
    pub fy: T,
    pub w00: T,
    pub w01: T,
    pub w10: T,
    pub w11: T,
    pub clamped_x: bool,
    pub clamped_y: bool,
}

impl<T: Scalar> BilinearTaps<T> {
    #[inline]
    pub fn new(x: T, y: T, width: usize, height: usize) -> Self {
        let (x0, x1, fx, clamped_x) = axis(x, width);
        let (y0, y1, fy, clamped_y) = axis(y, height);
        let one = T::one();
        Self {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            w00: (one - fx) * (one - fy),
            w01: fx * (one - fy),
            w10: (one - fx) * fy,
            w11: fx * fy,
            clamped_x,
            clamped_y,
        }
    }
}

#[inline]
fn axis<T: Scalar>(v: T, len: usize) -> (usize, usize, T, bool) {
    let hi = T::of((len - 1) as f64);
    if len == 1 {
        return (0, 0, T::zero(), true);
    }
    // NaN coordinates fall through to the lower border.
    if !(v > T::zero()) {
        return (0, 1, T::zero(), v < T::zero() || v.is_nan());
    }
    if v >= hi {
        return (len - 2, len - 1, T::one(), v > hi);
    }
    let i0 = v.floor().to_usize().unwrap_or(0).min(len - 2);
    (i0, i0 + 1, v - T::of(i0 as f64), false)
}
