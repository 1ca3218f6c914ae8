//! Seeded synthetic scenes: textured images, homographies, stereo pose pairs
//! and HPatches-style sequences with exact features.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::Keypoint;
use crate::error::{Error, Result};
use crate::eval::homography::{inside, warp_homography, Size};
use crate::features::FeatureSet;
use crate::image::save_pnm;
use crate::loss::warp::{warp_points_depth, CameraPair, Point};
use crate::tensor::Tensor;

/// Homography taking the four `src` points to `dst`, with `h33 = 1`.
pub fn homography_from_points(src: &[Point; 4], dst: &[Point; 4]) -> Result<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let (x, y, u, v) = (s.0, s.1, d.0, d.1);
        let r = 2 * i;
        a.set_row(r, &SMatrix::<f64, 1, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(r + 1, &SMatrix::<f64, 1, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::singular("degenerate four-point configuration"))?;
    Ok(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

/// Homography moving each image corner by up to `magnitude` pixels per axis.
pub fn random_homography(seed: u64, size: Size, magnitude: f64) -> Matrix3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (size.0 as f64 - 1.0, size.1 as f64 - 1.0);
    let src = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    loop {
        let mut dst = src;
        for p in dst.iter_mut() {
            p.0 += rng.random_range(-magnitude..=magnitude);
            p.1 += rng.random_range(-magnitude..=magnitude);
        }
        if let Ok(m) = homography_from_points(&src, &dst) {
            return m;
        }
    }
}

/// One-channel image in `[0, 1]` made of random Gaussian blobs over a
/// low-frequency gradient.
pub fn textured_image(seed: u64, height: usize, width: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..(height * width / 150).max(4))
        .map(|_| {
            (
                rng.random_range(0.0..width as f64),
                rng.random_range(0.0..height as f64),
                rng.random_range(1.5..6.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let (gx, gy) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let mut acc = vec![0.0f64; height * width];
    for (i, v) in acc.iter_mut().enumerate() {
        let (y, x) = ((i / width) as f64, (i % width) as f64);
        *v = gx * x / width as f64 + gy * y / height as f64;
    }
    for &(cx, cy, s, amp) in &blobs {
        let r = (3.0 * s).ceil() as isize;
        let (x0, y0) = (cx.round() as isize, cy.round() as isize);
        for y in (y0 - r).max(0)..(y0 + r + 1).min(height as isize) {
            for x in (x0 - r).max(0)..(x0 + r + 1).min(width as isize) {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                acc[y as usize * width + x as usize] += amp * (-d2 / (2.0 * s * s)).exp();
            }
        }
    }
    let (lo, hi) = acc
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = (hi - lo).max(1e-12);
    let data = acc.into_iter().map(|v| ((v - lo) / span) as f32).collect();
    Tensor::from_vec(height, width, 1, data).expect("sized buffer")
}

/// Image B of size `size` seeing `img` through `h` (A to B); pixels whose
/// preimage falls outside A are zero.
pub fn warp_image(img: &Tensor<f32>, h: &Matrix3<f64>, size: Size) -> Result<Tensor<f32>> {
    let h_inv = h
        .try_inverse()
        .ok_or_else(|| Error::singular("homography is not invertible"))?;
    let src = (img.width(), img.height());
    let c = img.channels();
    let mut out = Tensor::zeros(size.1, size.0, c);
    for y in 0..size.1 {
        for x in 0..size.0 {
            if let Some(p) = warp_homography(&h_inv, x as f64, y as f64).filter(|p| inside(*p, src)) {
                for ch in 0..c {
                    out.set(y, x, ch, img.bilinear_sample(p.0 as f32, p.1 as f32, ch));
                }
            }
        }
    }
    Ok(out)
}

/// Random unit-norm descriptors.
pub fn random_descriptors(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn keypoint(p: Point) -> Keypoint {
    Keypoint {
        x: p.0 as f32,
        y: p.1 as f32,
        score: 1.0,
        level_hint: 0,
        pyramid_scale: 1.0,
    }
}

/// Two views of a smooth depth surface with exact correspondences.
#[derive(Debug, Clone)]
pub struct PosePair {
    pub cam: CameraPair,
    pub f: Matrix3<f64>,
    pub points: Vec<(Point, Point)>,
    pub size_a: Size,
    pub size_b: Size,
}

/// Pose and depth ranges of a synthetic stereo pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    /// Largest rotation-vector component, radians.
    pub max_rotation: f64,
    pub baseline: f64,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            max_rotation: 0.1,
            baseline: 1.0,
            depth_min: 4.0,
            depth_max: 12.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation >= 0.0 && self.max_rotation < 1.0) {
            return Err(Error::validation("pose magnitude must lie in [0, 1) rad"));
        }
        if !(self.baseline > 0.0 && self.depth_min > 0.0 && self.depth_max >= self.depth_min) {
            return Err(Error::validation("need baseline > 0 and 0 < depth_min <= depth_max"));
        }
        Ok(())
    }
}

/// 640×480 cameras with focal length 500 over the default scene; `n` valid
/// correspondences.
pub fn random_pose_pair(seed: u64, n: usize) -> PosePair {
    random_pose_pair_with(seed, n, &SceneConfig::default())
}

pub fn random_pose_pair_with(seed: u64, n: usize, scene: &SceneConfig) -> PosePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = (640usize, 480usize);
    let k = Matrix3::new(500.0, 0.0, 319.5, 0.0, 500.0, 239.5, 0.0, 0.0, 1.0);
    let rmax = scene.max_rotation;
    let axis: Vector3<f64> = Vector3::from_fn(|_, _| if rmax > 0.0 { rng.random_range(-rmax..rmax) } else { 0.0 });
    let r = Rotation3::new(axis).into_inner();
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3))
        .normalize()
        * scene.baseline;
    let (fx, fy, ph) = (
        rng.random_range(0.005..0.02),
        rng.random_range(0.005..0.02),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let (mid, amp) = (
        0.5 * (scene.depth_min + scene.depth_max),
        0.5 * (scene.depth_max - scene.depth_min),
    );
    let depth = Tensor::from_fn(size.1, size.0, 1, |y, x, _| {
        (mid + amp * (fx * x as f64 + ph).sin() * (fy * y as f64).cos()) as f32
    });
    let cam = CameraPair {
        k_a: k,
        k_b: k,
        r,
        t,
        depth,
        size_b: size,
    };
    let f = cam.fundamental();
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let batch: Vec<Point> = (0..n.max(16))
            .map(|_| (rng.random_range(0.0..639.0), rng.random_range(0.0..479.0)))
            .collect();
        let set = warp_points_depth(&batch, &cam).expect("valid synthetic camera");
        points.extend(set.valid().map(|c| (c.a, c.b)).take(n - points.len()));
    }
    PosePair {
        cam,
        f,
        points,
        size_a: size,
        size_b: size,
    }
}

/// Six images related to the first by known homographies, with features
/// placed exactly: image `k` holds the warps of image 1's keypoints that land
/// inside it, carrying the same descriptors.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub images: Vec<Tensor<f32>>,
    /// `H_1_k` for `k = 2..=6`.
    pub homographies: Vec<Matrix3<f64>>,
    pub features: Vec<FeatureSet>,
}

pub fn synthetic_sequence(seed: u64, size: Size, keypoints: usize, dim: usize) -> Result<SyntheticSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = textured_image(seed, size.1, size.0);
    let margin = 0.1 * size.0.min(size.1) as f64;
    let pts: Vec<Point> = (0..keypoints)
        .map(|_| {
            (
                rng.random_range(margin..size.0 as f64 - margin),
                rng.random_range(margin..size.1 as f64 - margin),
            )
        })
        .collect();
    let desc = random_descriptors(&mut rng, keypoints, dim);
    let mut first = FeatureSet::new(dim);
    for (p, d) in pts.iter().zip(&desc) {
        first.push(keypoint(*p), d)?;
    }
    let mut seq = SyntheticSequence {
        images: vec![base.clone()],
        homographies: Vec::new(),
        features: vec![first],
    };
    for k in 0..5u64 {
        let h = random_homography(seed.wrapping_mul(31).wrapping_add(k + 1), size, 0.12 * size.0.min(size.1) as f64);
        let mut fs = FeatureSet::new(dim);
        for (p, d) in pts.iter().zip(&desc) {
            if let Some(q) = warp_homography(&h, p.0, p.1).filter(|q| inside(*q, size)) {
                fs.push(keypoint(q), d)?;
            }
        }
        seq.images.push(warp_image(&base, &h, size)?);
        seq.homographies.push(h);
        seq.features.push(fs);
    }
    Ok(seq)
}

pub fn format_matrix3(m: &Matrix3<f64>) -> String {
    let mut s = String::new();
    for r in 0..3 {
        let row: Vec<String> = (0..3).map(|c| format!("{:e}", m[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

impl SyntheticSequence {
    /// Writes `1.pgm … 6.pgm`, `H_1_2 … H_1_6`, and with `features_ext` set,
    /// one feature file per image named `<k>.pgm.<ext>`.
    pub fn write(&self, dir: &Path, features_ext: Option<&str>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, img) in self.images.iter().enumerate() {
            let name = format!("{}.pgm", i + 1);
            save_pnm(img, dir.join(&name))?;
            if let Some(ext) = features_ext {
                self.features[i].save(dir.join(format!("{name}.{ext}")), false)?;
            }
        }
        for (k, h) in self.homographies.iter().enumerate() {
            std::fs::write(dir.join(format!("H_1_{}", k + 2)), format_matrix3(h))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_point_homography_hits_targets() {
        let src = [(0.0, 0.0), (99.0, 0.0), (99.0, 79.0), (0.0, 79.0)];
        let dst = [(3.0, -2.0), (101.0, 4.0), (95.0, 83.0), (-4.0, 75.0)];
        let h = homography_from_points(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let w = warp_homography(&h, s.0, s.1).unwrap();
            assert!((w.0 - d.0).abs() < 1e-9 && (w.1 - d.1).abs() < 1e-9);
        }
        let line = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)];
        assert!(homography_from_points(&line, &dst).is_err());
    }

    #[test]
    fn textured_image_is_normalized_and_seeded() {
        let a = textured_image(4, 40, 50);
        assert_eq!(a.shape(), (40, 50, 1));
        let (lo, hi) = a.min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
        assert_eq!(a, textured_image(4, 40, 50));
    }

    #[test]
    fn identity_warp_preserves_image() {
        let a = textured_image(1, 30, 30);
        let b = warp_image(&a, &Matrix3::identity(), (30, 30)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn pose_pair_points_are_valid() {
        let p = random_pose_pair(5, 50);
        assert_eq!(p.points.len(), 50);
        assert!(p.points.iter().all(|(_, b)| inside(*b, p.size_b)));
    }

    #[test]
    fn sequence_features_follow_homographies() {
        let seq = synthetic_sequence(2, (120, 100), 40, 16).unwrap();
        assert_eq!(seq.images.len(), 6);
        assert_eq!(seq.features[0].len(), 40);
        for (k, h) in seq.homographies.iter().enumerate() {
            let fs = &seq.features[k + 1];
            assert!(fs.len() <= 40 && !fs.is_empty());
            let first = &fs.keypoints[0];
            let src = seq.features[0]
                .keypoints
                .iter()
                .find_map(|p| {
                    let w = warp_homography(h, p.x as f64, p.y as f64)?;
                    ((w.0 - first.x as f64).abs() < 1e-3 && (w.1 - first.y as f64).abs() < 1e-3).then_some(w)
                });
            assert!(src.is_some());
        }
    }
}
