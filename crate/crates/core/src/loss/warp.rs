//! Ground-truth correspondences from depth and camera pose, or from a homography.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::eval::homography::{inside, warp_homography, Size};
use crate::tensor::Tensor;

pub type Point = (f64, f64);

/// Fewest and most correspondences a loss evaluation uses.
pub const MIN_CORRESPONDENCES: usize = 32;
pub const MAX_CORRESPONDENCES: usize = 512;

/// Two pinhole cameras, the pose of B relative to A, and A's depth map.
#[derive(Debug, Clone)]
pub struct CameraPair {
    pub k_a: Matrix3<f64>,
    pub k_b: Matrix3<f64>,
    /// `X_b = R·X_a + t`.
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    /// Depth along the optical axis of A, one channel; zero marks invalid.
    pub depth: Tensor<f32>,
    pub size_b: Size,
}

impl CameraPair {
    pub fn validate(&self) -> Result<()> {
        if (self.r.transpose() * self.r - Matrix3::identity()).abs().max() > 1e-6 || self.r.determinant() <= 0.0 {
            return Err(Error::validation("relative rotation is not orthonormal with det 1"));
        }
        for k in [&self.k_a, &self.k_b] {
            if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || k.try_inverse().is_none() {
                return Err(Error::validation("camera focal lengths must be positive"));
            }
        }
        if self.depth.channels() != 1 {
            return Err(Error::shape("depth map must have one channel"));
        }
        Ok(())
    }

    pub fn size_a(&self) -> Size {
        (self.depth.width(), self.depth.height())
    }

    /// Depth at the nearest pixel; `None` off the map or where invalid.
    pub fn depth_at(&self, p: Point) -> Option<f64> {
        let (x, y) = (p.0.round(), p.1.round());
        if x < 0.0 || y < 0.0 || x >= self.depth.width() as f64 || y >= self.depth.height() as f64 {
            return None;
        }
        let d = self.depth.get(y as usize, x as usize, 0) as f64;
        (d > 0.0 && d.is_finite()).then_some(d)
    }

    /// Projection into B of the point seen at `p` with depth `d` in A.
    pub fn transfer(&self, p: Point, d: f64) -> Option<Point> {
        let ray = self.k_a.try_inverse()? * Vector3::new(p.0, p.1, 1.0);
        let xb = self.r * (ray * d) + self.t;
        if xb.z <= 1e-12 {
            return None;
        }
        let q = self.k_b * xb;
        Some((q.x / q.z, q.y / q.z))
    }

    /// `F = K_b⁻ᵀ [t]ₓ R K_a⁻¹`.
    pub fn fundamental(&self) -> Matrix3<f64> {
        let t = self.t;
        let tx = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
        let ka_inv = self.k_a.try_inverse().expect("validated intrinsics");
        let kb_inv = self.k_b.try_inverse().expect("validated intrinsics");
        kb_inv.transpose() * tx * self.r * ka_inv
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrespondenceSource {
    DepthWarp,
    Homography,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub a: Point,
    pub b: Point,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    pub source: CorrespondenceSource,
}

impl CorrespondenceSet {
    pub fn valid(&self) -> impl Iterator<Item = &Correspondence> {
        self.pairs.iter().filter(|c| c.valid)
    }

    pub fn valid_count(&self) -> usize {
        self.valid().count()
    }

    /// The first valid pairs, capped at [`MAX_CORRESPONDENCES`]; an error
    /// below [`MIN_CORRESPONDENCES`].
    pub fn for_loss(&self) -> Result<Vec<(Point, Point)>> {
        let n = self.valid_count();
        if n < MIN_CORRESPONDENCES {
            return Err(Error::validation(format!(
                "{n} valid correspondences, at least {MIN_CORRESPONDENCES} required"
            )));
        }
        Ok(self.valid().take(MAX_CORRESPONDENCES).map(|c| (c.a, c.b)).collect())
    }
}

/// `p′ = π(K′(R·d·K⁻¹p̃ + t))`; invalid when the depth is missing, the point
/// is behind B or it projects outside B.
pub fn warp_points_depth(points: &[Point], cam: &CameraPair) -> Result<CorrespondenceSet> {
    cam.validate()?;
    let pairs = points
        .iter()
        .map(|&a| {
            let b = cam.depth_at(a).and_then(|d| cam.transfer(a, d));
            match b {
                Some(b) if inside(b, cam.size_b) => Correspondence { a, b, valid: true },
                Some(b) => Correspondence { a, b, valid: false },
                None => Correspondence {
                    a,
                    b: (f64::NAN, f64::NAN),
                    valid: false,
                },
            }
        })
        .collect();
    Ok(CorrespondenceSet {
        pairs,
        source: CorrespondenceSource::DepthWarp,
    })
}

/// Homography transfer; invalid when the denominator vanishes or the target
/// falls outside image B.
pub fn warp_points_homography(points: &[Point], h: &Matrix3<f64>, size_b: Size) -> CorrespondenceSet {
    let pairs = points
        .iter()
        .map(|&a| match warp_homography(h, a.0, a.1) {
            Some(b) => Correspondence {
                a,
                b,
                valid: inside(b, size_b),
            },
            None => Correspondence {
                a,
                b: (f64::NAN, f64::NAN),
                valid: false,
            },
        })
        .collect();
    CorrespondenceSet {
        pairs,
        source: CorrespondenceSource::Homography,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::random_homography;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(depth: f32, r: Matrix3<f64>, t: Vector3<f64>) -> CameraPair {
        let k = Matrix3::new(300.0, 0.0, 50.0, 0.0, 300.0, 40.0, 0.0, 0.0, 1.0);
        CameraPair {
            k_a: k,
            k_b: k,
            r,
            t,
            depth: Tensor::filled(80, 100, 1, depth),
            size_b: (100, 80),
        }
    }

    #[test]
    fn identity_pose_is_identity() {
        let c = cam(3.0, Matrix3::identity(), Vector3::zeros());
        let pts = [(10.0, 20.0), (55.5, 33.25), (98.5, 78.0)];
        let set = warp_points_depth(&pts, &c).unwrap();
        for p in &set.pairs {
            assert!(p.valid);
            assert!((p.a.0 - p.b.0).abs() < 1e-12 && (p.a.1 - p.b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn approaching_halves_depth_and_doubles_offsets() {
        let c = cam(4.0, Matrix3::identity(), Vector3::new(0.0, 0.0, -2.0));
        let set = warp_points_depth(&[(60.0, 45.0), (30.0, 30.0)], &c).unwrap();
        for p in &set.pairs {
            assert!((p.b.0 - 50.0 - 2.0 * (p.a.0 - 50.0)).abs() < 1e-9);
            assert!((p.b.1 - 40.0 - 2.0 * (p.a.1 - 40.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_depth_and_behind_camera_are_invalid() {
        let mut c = cam(2.0, Matrix3::identity(), Vector3::zeros());
        c.depth.set(20, 10, 0, 0.0);
        let set = warp_points_depth(&[(10.0, 20.0), (11.0, 20.0)], &c).unwrap();
        assert_eq!(set.pairs.iter().map(|p| p.valid).collect::<Vec<_>>(), [false, true]);
        let behind = cam(2.0, Matrix3::identity(), Vector3::new(0.0, 0.0, -5.0));
        assert_eq!(warp_points_depth(&[(10.0, 20.0)], &behind).unwrap().valid_count(), 0);
        let bad = cam(2.0, Matrix3::identity() * 2.0, Vector3::zeros());
        assert!(warp_points_depth(&[(1.0, 1.0)], &bad).is_err());
    }

    #[test]
    fn homography_round_trip() {
        let size = (200, 150);
        let h = random_homography(11, size, 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Point> = (0..100).map(|_| (rng.random_range(40.0..160.0), rng.random_range(40.0..110.0))).collect();
        let fwd = warp_points_homography(&pts, &h, size);
        assert_eq!(fwd.valid_count(), 100);
        let back = warp_points_homography(&fwd.pairs.iter().map(|p| p.b).collect::<Vec<_>>(), &h.try_inverse().unwrap(), size);
        for (p, q) in pts.iter().zip(&back.pairs) {
            assert!((p.0 - q.b.0).abs() < 1e-9 && (p.1 - q.b.1).abs() < 1e-9);
        }
        let ident = warp_points_homography(&pts, &Matrix3::identity(), size);
        assert!(ident.pairs.iter().all(|p| p.a == p.b));
    }

    #[test]
    fn loss_bounds_on_counts() {
        let c = cam(3.0, Matrix3::identity(), Vector3::zeros());
        let few: Vec<Point> = (0..31).map(|i| (i as f64, 5.0)).collect();
        assert!(warp_points_depth(&few, &c).unwrap().for_loss().is_err());
        let many: Vec<Point> = (0..600).map(|i| ((i % 100) as f64, (i / 100) as f64)).collect();
        assert_eq!(warp_points_depth(&many, &c).unwrap().for_loss().unwrap().len(), 512);
    }
}
