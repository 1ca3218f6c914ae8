//! Closed-form Jacobians of the transform constructors.

use nalgebra::{DMatrix, Vector2};

use super::{
    affine_matrix, affine_shape, dlt_jacobian, dlt_solve, kernel_grid, offsets_from_transform,
    rotation, similarity_matrix, DeformKind, LocalTransform, Mat2, PROJECTIVE_EPS,
};
use crate::error::{Error, Result};

/// A differentiable geometric constructor with a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeomOp {
    /// `(λ, θ)` → entries of `S`, row-major.
    Similarity,
    /// `(λ, θ, a″₁₁, a″₂₁, a″₂₂)` → entries of `A`, row-major.
    Affine,
    /// Eight corner offsets → the nine entries of `H`, row-major.
    Dlt,
    /// Transform parameters of `kind` → `2k²` tap offsets.
    Offsets { kind: DeformKind, k: usize },
}

impl GeomOp {
    pub fn num_params(&self) -> usize {
        match self {
            GeomOp::Similarity => 2,
            GeomOp::Affine => 5,
            GeomOp::Dlt => 8,
            GeomOp::Offsets { kind, k } => match kind {
                DeformKind::FreeForm => 2 * k * k,
                DeformKind::Similarity => 2,
                DeformKind::Affine => 5,
                DeformKind::Homography => 8,
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            GeomOp::Similarity => "similarity".into(),
            GeomOp::Affine => "affine".into(),
            GeomOp::Dlt => "dlt_solve".into(),
            GeomOp::Offsets { kind, k } => format!("offsets[{}; k={k}]", kind.name()),
        }
    }

    pub fn transform(&self, params: &[f64]) -> Result<LocalTransform> {
        if params.len() != self.num_params() {
            return Err(Error::shape(format!(
                "{} takes {} parameters, got {}",
                self.name(),
                self.num_params(),
                params.len()
            )));
        }
        let kind = match self {
            GeomOp::Similarity => DeformKind::Similarity,
            GeomOp::Affine => DeformKind::Affine,
            GeomOp::Dlt => DeformKind::Homography,
            GeomOp::Offsets { kind, .. } => *kind,
        };
        Ok(match kind {
            DeformKind::FreeForm => LocalTransform::FreeForm(params.to_vec()),
            DeformKind::Similarity => LocalTransform::Similarity {
                scale: params[0],
                angle: params[1],
            },
            DeformKind::Affine => LocalTransform::Affine {
                scale: params[0],
                angle: params[1],
                residual: [params[2], params[3], params[4]],
            },
            DeformKind::Homography => LocalTransform::Homography {
                corner_offsets: params.try_into().expect("length checked"),
            },
        })
    }

    /// Output vector of the op.
    pub fn eval(&self, params: &[f64]) -> Result<Vec<f64>> {
        let t = self.transform(params)?;
        match self {
            GeomOp::Similarity => Ok(flat2(&similarity_matrix(params[0], params[1]))),
            GeomOp::Affine => Ok(flat2(&affine_matrix(
                params[0],
                params[1],
                [params[2], params[3], params[4]],
            ))),
            GeomOp::Dlt => {
                let LocalTransform::Homography { corner_offsets } = t else {
                    unreachable!()
                };
                Ok(dlt_solve(&corner_offsets)?.transpose().iter().copied().collect())
            }
            GeomOp::Offsets { k, .. } => offsets_from_transform(&t, *k),
        }
    }
}

fn flat2(m: &Mat2) -> Vec<f64> {
    vec![m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]
}

/// `∂S/∂λ` and `∂S/∂θ`.
fn similarity_partials(scale: f64, angle: f64) -> [Mat2; 2] {
    let (s, c) = angle.sin_cos();
    [rotation(angle), Mat2::new(-s, c, -c, -s) * scale]
}

/// Partials of `A` w.r.t. `(λ, θ, a″₁₁, a″₂₁, a″₂₂)`.
fn affine_partials(scale: f64, angle: f64, residual: [f64; 3]) -> [Mat2; 5] {
    let [r11, r21, r22] = residual;
    let shape = affine_shape(residual);
    let sim = similarity_matrix(scale, angle);
    let [d_scale, d_angle] = similarity_partials(scale, angle);
    let (sg1, d1) = (1.0f64.copysign(1.0 + r11), (1.0 + r11).abs());
    let (sg2, d2) = (1.0f64.copysign(1.0 + r22), (1.0 + r22).abs());
    let n = 1.0 / (d1 * d2);
    let d_r11 = Mat2::new(0.0, 0.0, -r21 * sg1 / (d1 * d1 * d2), 0.0);
    let d_r21 = Mat2::new(0.0, 0.0, n, 0.0);
    let d_r22 = Mat2::new(-sg2 / (d2 * d2), 0.0, -r21 * sg2 / (d1 * d2 * d2), sg2);
    [
        d_scale * shape,
        d_angle * shape,
        sim * d_r11,
        sim * d_r21,
        sim * d_r22,
    ]
}

fn linear_offsets_jacobian(partials: &[Mat2], k: usize) -> DMatrix<f64> {
    let grid = kernel_grid(k);
    let mut jac = DMatrix::zeros(2 * grid.len(), partials.len());
    for (n, (u, v)) in grid.iter().enumerate() {
        let p = Vector2::new(*u, *v);
        for (j, d) in partials.iter().enumerate() {
            let dp = d * p;
            jac[(2 * n, j)] = dp.x;
            jac[(2 * n + 1, j)] = dp.y;
        }
    }
    jac
}

/// Analytic Jacobian (outputs × parameters) of `op` at `params`.
pub fn jacobian_analytic(op: &GeomOp, params: &[f64]) -> Result<DMatrix<f64>> {
    let t = op.transform(params)?;
    let mats_to_rows = |mats: &[Mat2]| {
        let mut jac = DMatrix::zeros(4, mats.len());
        for (j, m) in mats.iter().enumerate() {
            for (r, v) in flat2(m).into_iter().enumerate() {
                jac[(r, j)] = v;
            }
        }
        jac
    };
    match (op, t) {
        (GeomOp::Similarity, LocalTransform::Similarity { scale, angle }) => {
            Ok(mats_to_rows(&similarity_partials(scale, angle)))
        }
        (
            GeomOp::Affine,
            LocalTransform::Affine {
                scale,
                angle,
                residual,
            },
        ) => Ok(mats_to_rows(&affine_partials(scale, angle, residual))),
        (GeomOp::Dlt, LocalTransform::Homography { corner_offsets }) => {
            let reduced = dlt_jacobian(&corner_offsets)?;
            // ĥ = (h11, h12, h21, h22, h31, h32) → row-major slots 0, 1, 3, 4, 6, 7
            let slots = [0, 1, 3, 4, 6, 7];
            let mut jac = DMatrix::zeros(9, 8);
            for (row, slot) in slots.iter().enumerate() {
                for c in 0..8 {
                    jac[(*slot, c)] = reduced[(row, c)];
                }
            }
            Ok(jac)
        }
        (GeomOp::Offsets { k, .. }, t) => offsets_jacobian(&t, *k),
        _ => unreachable!("transform variant follows op"),
    }
}

fn offsets_jacobian(t: &LocalTransform, k: usize) -> Result<DMatrix<f64>> {
    match t {
        LocalTransform::FreeForm(v) => {
            if v.len() != 2 * k * k {
                return Err(Error::shape("free-form parameter count"));
            }
            Ok(DMatrix::identity(2 * k * k, 2 * k * k))
        }
        LocalTransform::Similarity { scale, angle } => {
            Ok(linear_offsets_jacobian(&similarity_partials(*scale, *angle), k))
        }
        LocalTransform::Affine {
            scale,
            angle,
            residual,
        } => Ok(linear_offsets_jacobian(
            &affine_partials(*scale, *angle, *residual),
            k,
        )),
        LocalTransform::Homography { corner_offsets } => {
            let h = dlt_solve(corner_offsets)?;
            let dh = dlt_jacobian(corner_offsets)?;
            let grid = kernel_grid(k);
            // ∂(offsets)/∂ĥ, then chain through the solve
            let mut d_off = DMatrix::zeros(2 * grid.len(), 6);
            for (n, (u, v)) in grid.iter().enumerate() {
                let n1 = h[(0, 0)] * u + h[(0, 1)] * v;
                let n2 = h[(1, 0)] * u + h[(1, 1)] * v;
                let den = h[(2, 0)] * u + h[(2, 1)] * v + 1.0;
                if den.abs() < PROJECTIVE_EPS {
                    return Err(Error::singular("projective denominator vanishes"));
                }
                let d2 = den * den;
                let (rx, ry) = (2 * n, 2 * n + 1);
                d_off[(rx, 0)] = u / den;
                d_off[(rx, 1)] = v / den;
                d_off[(ry, 2)] = u / den;
                d_off[(ry, 3)] = v / den;
                d_off[(rx, 4)] = -n1 * u / d2;
                d_off[(rx, 5)] = -n1 * v / d2;
                d_off[(ry, 4)] = -n2 * u / d2;
                d_off[(ry, 5)] = -n2 * v / d2;
            }
            let dh_dyn = DMatrix::from_iterator(6, 8, dh.iter().copied());
            Ok(d_off * dh_dyn)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn central_difference(op: &GeomOp, p: &[f64], h: f64) -> DMatrix<f64> {
        let rows = op.eval(p).unwrap().len();
        let mut jac = DMatrix::zeros(rows, p.len());
        for j in 0..p.len() {
            let mut plus = p.to_vec();
            let mut minus = p.to_vec();
            plus[j] += h;
            minus[j] -= h;
            let fp = op.eval(&plus).unwrap();
            let fm = op.eval(&minus).unwrap();
            for r in 0..rows {
                jac[(r, j)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        jac
    }

    fn random_params(op: &GeomOp, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match op.num_params() {
            2 => vec![rng.random_range(0.4..2.7), rng.random_range(-3.0..3.0)],
            5 => vec![
                rng.random_range(0.4..2.7),
                rng.random_range(-3.0..3.0),
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.9..0.9),
            ],
            n => (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
        }
    }

    #[test]
    fn scale_partial_at_zero_angle() {
        let j = jacobian_analytic(&GeomOp::Similarity, &[1.3, 0.0]).unwrap();
        // S₁₁ = λ cos θ
        assert_eq!(j[(0, 0)], 1.0);
    }

    #[test]
    fn similarity_offsets_are_linear_in_scale() {
        let op = GeomOp::Offsets {
            kind: DeformKind::Similarity,
            k: 3,
        };
        let j = jacobian_analytic(&op, &[1.7, 0.0]).unwrap();
        for (n, (u, v)) in kernel_grid(3).into_iter().enumerate() {
            assert_eq!(j[(2 * n, 0)], u);
            assert_eq!(j[(2 * n + 1, 0)], v);
        }
    }

    #[test]
    fn all_ops_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ops = [
            GeomOp::Similarity,
            GeomOp::Affine,
            GeomOp::Dlt,
            GeomOp::Offsets { kind: DeformKind::FreeForm, k: 3 },
            GeomOp::Offsets { kind: DeformKind::Similarity, k: 3 },
            GeomOp::Offsets { kind: DeformKind::Affine, k: 5 },
            GeomOp::Offsets { kind: DeformKind::Homography, k: 3 },
        ];
        for op in ops {
            for _ in 0..100 {
                let p = random_params(&op, &mut rng);
                let analytic = jacobian_analytic(&op, &p).unwrap();
                let numeric = central_difference(&op, &p, 1e-4);
                // absolute below unit magnitude, relative above it
                let err = analytic
                    .iter()
                    .zip(numeric.iter())
                    .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
                    .fold(0.0, f64::max);
                assert!(err < 1e-4, "{} at {p:?}: {err:e}", op.name());
            }
        }
    }

    #[test]
    fn wrong_parameter_count_is_rejected() {
        assert!(GeomOp::Dlt.eval(&[0.0; 3]).is_err());
        assert!(jacobian_analytic(&GeomOp::Affine, &[1.0]).is_err());
    }
}
