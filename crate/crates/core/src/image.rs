//! Binary PGM/PPM input and output plus the per-image preprocessing steps.

use std::fs;
use std::io;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest standard deviation used when standardizing; blank images map to zeros.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    /// Pixel values in `[0, 1]`, one or three channels.
    pub pixels: Tensor<f32>,
    pub source_path: String,
}

impl Image {
    pub fn new(pixels: Tensor<f32>) -> Self {
        Self {
            pixels,
            source_path: String::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let pixels = decode_pnm(&bytes)?;
    Ok(Image {
        pixels,
        source_path: path.display().to_string(),
    })
}

/// Decodes a binary P5 (gray) or P6 (RGB) file with maximum value 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let magic = cur.token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format(format!("unsupported magic {other:?}"))),
    };
    let width = cur.number()?;
    let height = cur.number()?;
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(Error::format(format!("max value {maxval}, only 255 is supported")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format("zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format("missing whitespace after header")),
    }
    let need = width * height * channels;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("raster truncated: {} of {need} bytes", raster.len()),
        )));
    }
    let data = raster[..need].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(height, width, channels, data)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn token(&mut self) -> Result<String> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(Error::format("header ended early")),
            }
        }
        let start = self.pos;
        while let Some(b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::format(format!("bad header number {tok:?}")))
    }
}

/// Encodes a 1- or 3-channel tensor with values in `[0, 1]` as binary PGM/PPM.
pub fn encode_pnm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let magic = match t.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::shape(format!("cannot encode {c} channels as PNM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", t.width(), t.height()).into_bytes();
    out.extend(
        t.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn save_pnm(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pnm(t)?)?;
    Ok(())
}

/// Luma conversion `0.299 R + 0.587 G + 0.114 B`; gray input is returned unchanged.
pub fn to_grayscale(img: &Image) -> Image {
    let p = &img.pixels;
    if p.channels() == 1 {
        return img.clone();
    }
    let gray = Tensor::from_fn(p.height(), p.width(), 1, |y, x, _| {
        let px = p.pixel(y, x);
        0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
    });
    Image {
        pixels: gray,
        source_path: img.source_path.clone(),
    }
}

/// Zero mean, unit (population) standard deviation over the whole tensor.
pub fn standardize(img: &Image) -> Tensor<f32> {
    standardize_tensor(&img.pixels)
}

pub fn standardize_tensor(t: &Tensor<f32>) -> Tensor<f32> {
    let n = t.data().len() as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = t
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let sigma = var.sqrt().max(SIGMA_FLOOR);
    t.map(|v| ((v as f64 - mean) / sigma) as f32)
}

/// Separable Gaussian blur with the kernel truncated at `3σ` and normalized to
/// sum one. Borders are clamped.
pub fn gaussian_blur(t: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w, ch) = t.shape();
    let horiz = Tensor::from_fn(h, w, ch, |y, x, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * t.get_clamped(y as isize, x as isize + i as isize - radius, c) as f64)
            .sum::<f64>() as f32
    });
    Tensor::from_fn(h, w, ch, |y, x, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| {
                k * horiz.get_clamped(y as isize + i as isize - radius, x as isize, c) as f64
            })
            .sum::<f64>() as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pgm(w: usize, h: usize, data: &[u8]) -> Vec<u8> {
        let mut v = format!("P5\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(data);
        v
    }

    #[test]
    fn decodes_p5_with_255_scaling() {
        let t = decode_pnm(&pgm(2, 2, &[0, 255, 128, 64])).unwrap();
        assert_eq!(t.shape(), (2, 2, 1));
        let want = [0.0, 1.0, 0.50196, 0.25098];
        for (got, want) in t.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn decodes_p6_all_white() {
        let mut bytes = b"P6\n# comment line\n3 2\n255\n".to_vec();
        bytes.extend(std::iter::repeat_n(255u8, 18));
        let t = decode_pnm(&bytes).unwrap();
        assert_eq!(t.shape(), (2, 3, 3));
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_raster_is_io_error() {
        let err = decode_pnm(&pgm(4, 4, &[0u8; 8])).unwrap_err();
        assert!(matches!(err, Error::Io(_)), "{err:?}");
    }

    #[test]
    fn bad_header_is_format_error() {
        assert!(matches!(decode_pnm(b"P3\n1 1\n255\n0"), Err(Error::Format(_))));
        assert!(matches!(decode_pnm(b"P5\n1 x\n255\n0"), Err(Error::Format(_))));
        assert!(matches!(decode_pnm(b"P5\n1 1\n65535\n00"), Err(Error::Format(_))));
        assert!(matches!(decode_pnm(b"P5\n1"), Err(Error::Format(_))));
    }

    #[test]
    fn encode_decode_round_trip() {
        let t = Tensor::from_fn(3, 5, 3, |y, x, c| ((y * 5 + x) * 3 + c) as f32 / 255.0);
        let back = decode_pnm(&encode_pnm(&t).unwrap()).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-6);
    }

    #[test]
    fn grayscale_weights() {
        let red = Image::new(Tensor::from_vec(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap());
        assert!((to_grayscale(&red).pixels.get(0, 0, 0) - 0.299).abs() < 1e-7);
        let gray = Image::new(Tensor::from_vec(1, 1, 3, vec![0.4, 0.4, 0.4]).unwrap());
        assert!((to_grayscale(&gray).pixels.get(0, 0, 0) - 0.4).abs() < 1e-6);
        let single = Image::new(Tensor::from_vec(1, 2, 1, vec![0.1, 0.7]).unwrap());
        assert_eq!(to_grayscale(&single), single);
    }

    #[test]
    fn standardize_examples() {
        let two = Image::new(Tensor::from_vec(1, 2, 1, vec![0.0, 1.0]).unwrap());
        assert_eq!(standardize(&two).data(), &[-1.0, 1.0]);

        let flat = Image::new(Tensor::filled(4, 4, 1, 0.3));
        assert!(standardize(&flat).data().iter().all(|&v| v == 0.0));

        let three = Image::new(Tensor::from_vec(1, 3, 1, vec![0.0, 0.5, 1.0]).unwrap());
        let s = standardize(&three);
        let want = [-1.224_744_9, 0.0, 1.224_744_9];
        for (got, want) in s.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let t = Tensor::filled(6, 7, 1, 0.6f32);
        let b = gaussian_blur(&t, 0.8);
        assert!(b.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    proptest! {
        #[test]
        fn standardize_moments_and_idempotence(vals in proptest::collection::vec(0.0f32..1.0, 16)) {
            let t = Tensor::from_vec(4, 4, 1, vals).unwrap();
            let (lo, hi) = t.min_max();
            prop_assume!(hi - lo > 1e-2);
            let s = standardize_tensor(&t);
            let n = 16.0;
            let mean = s.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = s.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-5);
            let twice = standardize_tensor(&s);
            prop_assert!(twice.max_abs_diff(&s) < 1e-6);
        }
    }
}
