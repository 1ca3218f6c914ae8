//! Parameterized local deformations and the sampling offsets they induce.
//!
//! A kernel tap `p = (u, v)` on the `k × k` grid centered at the origin is moved
//! to `T p`; the deformable convolution consumes the displacement `T p - p`.

mod dlt;
mod jacobian;

pub use dlt::{corners_collinear, dlt_jacobian, dlt_solve, dlt_system, SOURCE_CORNERS};
pub use jacobian::{GeomOp, jacobian_analytic};

use nalgebra::{Matrix2, Matrix3, Vector2};

use crate::error::{Error, Result};

pub type Mat2 = Matrix2<f64>;
pub type Mat3 = Matrix3<f64>;

/// Residual shape terms are kept this far inside `(-1, 1)` so `1 + a` never vanishes.
pub const RESIDUAL_LIMIT: f64 = 1.0 - 1e-4;

/// Smallest projective denominator accepted when warping a grid point.
pub const PROJECTIVE_EPS: f64 = 1e-8;

/// Which deformation model a DCN layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeformKind {
    FreeForm,
    Similarity,
    Affine,
    Homography,
}

impl DeformKind {
    /// Number of raw predictor channels needed to produce the transform
    /// (excluding the `k²` modulation logits).
    pub fn raw_channels(self, k: usize) -> usize {
        match self {
            DeformKind::FreeForm => 2 * k * k,
            DeformKind::Similarity => 3,
            DeformKind::Affine => 6,
            DeformKind::Homography => 8,
        }
    }

    /// Degrees of freedom of the transform itself.
    pub fn dof(self, k: usize) -> usize {
        match self {
            DeformKind::FreeForm => 2 * k * k,
            DeformKind::Similarity => 2,
            DeformKind::Affine => 4,
            DeformKind::Homography => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DeformKind::FreeForm => "free",
            DeformKind::Similarity => "similarity",
            DeformKind::Affine => "affine",
            DeformKind::Homography => "homography",
        }
    }
}

impl std::str::FromStr for DeformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free" | "free-form" => Ok(DeformKind::FreeForm),
            "similarity" => Ok(DeformKind::Similarity),
            "affine" => Ok(DeformKind::Affine),
            "homography" => Ok(DeformKind::Homography),
            other => Err(Error::validation(format!("unknown deformation variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LocalTransform {
    /// Independent `(Δx, Δy)` per tap, `2k²` values.
    FreeForm(Vec<f64>),
    Similarity { scale: f64, angle: f64 },
    /// `residual` is `(a″₁₁, a″₂₁, a″₂₂)`.
    Affine { scale: f64, angle: f64, residual: [f64; 3] },
    /// Displacements of the four unit corners, `(du, dv)` per corner.
    Homography { corner_offsets: [f64; 8] },
}

impl LocalTransform {
    pub fn identity(kind: DeformKind, k: usize) -> Self {
        match kind {
            DeformKind::FreeForm => LocalTransform::FreeForm(vec![0.0; 2 * k * k]),
            DeformKind::Similarity => LocalTransform::Similarity { scale: 1.0, angle: 0.0 },
            DeformKind::Affine => LocalTransform::Affine {
                scale: 1.0,
                angle: 0.0,
                residual: [0.0; 3],
            },
            DeformKind::Homography => LocalTransform::Homography {
                corner_offsets: [0.0; 8],
            },
        }
    }

    /// The linear or projective map, when the variant has one.
    pub fn matrix(&self) -> Result<Option<Mat3>> {
        Ok(match self {
            LocalTransform::FreeForm(_) => None,
            LocalTransform::Similarity { scale, angle } => {
                Some(embed(&similarity_matrix(*scale, *angle)))
            }
            LocalTransform::Affine {
                scale,
                angle,
                residual,
            } => Some(embed(&affine_matrix(*scale, *angle, *residual))),
            LocalTransform::Homography { corner_offsets } => Some(dlt_solve(corner_offsets)?),
        })
    }
}

fn embed(m: &Mat2) -> Mat3 {
    Mat3::new(m[(0, 0)], m[(0, 1)], 0.0, m[(1, 0)], m[(1, 1)], 0.0, 0.0, 0.0, 1.0)
}

/// `λ(x) = exp(tanh x)`, bounded to `[e⁻¹, e]`.
pub fn activate_scale(x: f64) -> f64 {
    x.tanh().exp()
}

pub fn activate_scale_grad(x: f64) -> f64 {
    let t = x.tanh();
    t.exp() * (1.0 - t * t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Angle {
    pub theta: f64,
    /// Both inputs were zero; `theta` was set to 0.
    pub degenerate: bool,
}

/// `θ(x, y) = arctan2(x, y)`: `x` plays the sine and `y` the cosine.
pub fn activate_angle(x: f64, y: f64) -> Angle {
    if x == 0.0 && y == 0.0 {
        return Angle {
            theta: 0.0,
            degenerate: true,
        };
    }
    let mut theta = x.atan2(y);
    if theta <= -std::f64::consts::PI {
        theta = std::f64::consts::PI;
    }
    Angle {
        theta,
        degenerate: false,
    }
}

/// Partial derivatives `(∂θ/∂x, ∂θ/∂y)`; zero at the degenerate origin.
pub fn activate_angle_grad(x: f64, y: f64) -> (f64, f64) {
    let r2 = x * x + y * y;
    if r2 == 0.0 {
        return (0.0, 0.0);
    }
    (y / r2, -x / r2)
}

/// `tanh`, pulled strictly inside `(-1, 1)` by [`RESIDUAL_LIMIT`].
pub fn activate_residual(x: f64) -> f64 {
    x.tanh().clamp(-RESIDUAL_LIMIT, RESIDUAL_LIMIT)
}

pub fn activate_residual_grad(x: f64) -> f64 {
    let t = x.tanh();
    if t.abs() >= RESIDUAL_LIMIT {
        0.0
    } else {
        1.0 - t * t
    }
}

/// `R(θ) = [[cos θ, sin θ], [-sin θ, cos θ]]`.
pub fn rotation(theta: f64) -> Mat2 {
    let (s, c) = theta.sin_cos();
    Mat2::new(c, s, -s, c)
}

/// `S = λ R(θ)`.
pub fn similarity_matrix(scale: f64, angle: f64) -> Mat2 {
    rotation(angle) * scale
}

/// Unit-determinant shape matrix built from the residuals `(a″₁₁, a″₂₁, a″₂₂)`:
///
/// ```text
/// A' = [[|1+a″₁₁|, 0], [a″₂₁, |1+a″₂₂|]] · diag(1 / |(1+a″₁₁)(1+a″₂₂)|, 1)
/// ```
pub fn affine_shape(residual: [f64; 3]) -> Mat2 {
    let [r11, r21, r22] = residual;
    let d1 = (1.0 + r11).abs();
    let d2 = (1.0 + r22).abs();
    let norm = 1.0 / (d1 * d2);
    Mat2::new(d1 * norm, 0.0, r21 * norm, d2)
}

/// `A = λ R(θ) A'`.
pub fn affine_matrix(scale: f64, angle: f64, residual: [f64; 3]) -> Mat2 {
    similarity_matrix(scale, angle) * affine_shape(residual)
}

/// Kernel grid `{-(k-1)/2 … (k-1)/2}²` in row-major tap order, as `(u, v)`.
pub fn kernel_grid(k: usize) -> Vec<(f64, f64)> {
    assert!(k % 2 == 1, "kernel size must be odd");
    let c = (k / 2) as isize;
    (0..k as isize)
        .flat_map(|ky| (0..k as isize).map(move |kx| ((kx - c) as f64, (ky - c) as f64)))
        .collect()
}

/// Applies a 3×3 map to `(u, v)` with projective division.
pub fn apply_projective(h: &Mat3, u: f64, v: f64) -> Result<(f64, f64)> {
    let den = h[(2, 0)] * u + h[(2, 1)] * v + h[(2, 2)];
    if den.abs() < PROJECTIVE_EPS {
        return Err(Error::singular(format!(
            "projective denominator {den:e} at grid point ({u}, {v})"
        )));
    }
    Ok((
        (h[(0, 0)] * u + h[(0, 1)] * v + h[(0, 2)]) / den,
        (h[(1, 0)] * u + h[(1, 1)] * v + h[(1, 2)]) / den,
    ))
}

/// Displacements `Δpₙ = T pₙ − pₙ` for every tap, as interleaved `(Δx, Δy)`.
pub fn offsets_from_transform(t: &LocalTransform, k: usize) -> Result<Vec<f64>> {
    if let LocalTransform::FreeForm(offsets) = t {
        if offsets.len() != 2 * k * k {
            return Err(Error::shape(format!(
                "free-form field has {} values, expected {}",
                offsets.len(),
                2 * k * k
            )));
        }
        return Ok(offsets.clone());
    }
    let m = t.matrix()?.expect("constrained variants have a matrix");
    let mut out = Vec::with_capacity(2 * k * k);
    for (u, v) in kernel_grid(k) {
        let (tu, tv) = if matches!(t, LocalTransform::Homography { .. }) {
            apply_projective(&m, u, v)?
        } else {
            let p = m.fixed_view::<2, 2>(0, 0) * Vector2::new(u, v);
            (p.x, p.y)
        };
        out.push(tu - u);
        out.push(tv - v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, FRAC_PI_2, PI};

    #[test]
    fn scale_activation_values() {
        assert_eq!(activate_scale(0.0), 1.0);
        assert!((activate_scale(50.0) - E).abs() < 1e-12);
        assert!((activate_scale(1.0) - 2.1416).abs() < 1e-4);
        assert!((activate_scale(1.0) - 0.761_594_155_955_764_9f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn angle_activation_values() {
        assert_eq!(activate_angle(0.0, 1.0).theta, 0.0);
        assert!((activate_angle(1.0, 0.0).theta - FRAC_PI_2).abs() < 1e-15);
        assert!((activate_angle(-1.0, -1.0).theta + 3.0 * PI / 4.0).abs() < 1e-15);
        let d = activate_angle(0.0, 0.0);
        assert!(d.degenerate);
        assert_eq!(d.theta, 0.0);
        // -0.0 sine with negative cosine lands on +π, not -π
        assert_eq!(activate_angle(-0.0, -1.0).theta, PI);
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity_matrix(1.0, 0.0), Mat2::identity());
        let s = similarity_matrix(2.0, FRAC_PI_2);
        let want = Mat2::new(0.0, 2.0, -2.0, 0.0);
        assert!((s - want).abs().max() < 1e-15);
        for &(l, t) in &[(0.5, 0.3), (2.2, -1.9), (1.0, 3.0)] {
            assert!((similarity_matrix(l, t).determinant() - l * l).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_examples() {
        assert_eq!(affine_matrix(1.0, 0.0, [0.0; 3]), Mat2::identity());
        let shape = affine_shape([0.5, -0.3, 0.2]);
        assert!((shape.determinant() - 1.0).abs() < 1e-9);
        // independent determinant: product of the diagonal of a lower-triangular matrix
        assert!((shape[(0, 0)] * shape[(1, 1)] - 1.0).abs() < 1e-12);
        let a = affine_matrix(1.7, 0.4, [0.5, -0.3, 0.2]);
        assert!((a.determinant() - 1.7 * 1.7).abs() < 1e-12);
    }

    #[test]
    fn identity_parameters_give_zero_offsets() {
        for kind in [
            DeformKind::FreeForm,
            DeformKind::Similarity,
            DeformKind::Affine,
            DeformKind::Homography,
        ] {
            for k in [1, 3, 5] {
                let off = offsets_from_transform(&LocalTransform::identity(kind, k), k).unwrap();
                assert_eq!(off.len(), 2 * k * k);
                assert!(off.iter().all(|&d| d == 0.0), "{kind:?} k={k}: {off:?}");
            }
        }
    }

    #[test]
    fn doubled_similarity_offset() {
        let t = LocalTransform::Similarity { scale: 2.0, angle: 0.0 };
        let off = offsets_from_transform(&t, 3).unwrap();
        // tap (1, 1) is the last one in row-major order
        assert_eq!((off[16], off[17]), (1.0, 1.0));
    }

    #[test]
    fn quarter_turn_sign_convention() {
        let t = LocalTransform::Similarity { scale: 1.0, angle: FRAC_PI_2 };
        let off = offsets_from_transform(&t, 3).unwrap();
        // tap (u, v) = (1, 0) is index 5
        assert!((off[10] + 1.0).abs() < 1e-15);
        assert!((off[11] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn free_form_passes_through() {
        let vals: Vec<f64> = (0..18).map(|i| i as f64 * 0.1).collect();
        let off = offsets_from_transform(&LocalTransform::FreeForm(vals.clone()), 3).unwrap();
        assert_eq!(off, vals);
        assert!(offsets_from_transform(&LocalTransform::FreeForm(vec![0.0; 4]), 3).is_err());
    }

    #[test]
    fn singular_projection_is_reported() {
        // row 3 = (1, 0, 1) vanishes at u = -1
        let h = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0);
        assert!(matches!(apply_projective(&h, -1.0, 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn variant_names_parse() {
        for kind in [
            DeformKind::FreeForm,
            DeformKind::Similarity,
            DeformKind::Affine,
            DeformKind::Homography,
        ] {
            assert_eq!(kind.name().parse::<DeformKind>().unwrap(), kind);
        }
        assert!("spline".parse::<DeformKind>().is_err());
    }
}
