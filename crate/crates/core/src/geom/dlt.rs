//! Four-point homography solve with translation removed.
//!
//! With `H₃₃ = 1` and `H₁₃ = H₂₃ = 0` the six unknowns
//! `ĥ = (h₁₁, h₁₂, h₂₁, h₂₂, h₃₁, h₃₂)` satisfy two equations per corner:
//!
//! ```text
//! [ 0  0  -u  -v  v'u  v'v ] ĥ = -v'
//! [ u  v   0   0 -u'u -u'v ] ĥ =  u'
//! ```
//!
//! The stacked 8×6 system is solved in the least-squares sense.

use nalgebra::{SMatrix, SVector};

use super::Mat3;
use crate::error::{Error, Result};

pub type DltMatrix = SMatrix<f64, 8, 6>;
pub type DltRhs = SVector<f64, 8>;

/// Reference corners `(-1,-1), (1,-1), (1,1), (-1,1)`.
pub const SOURCE_CORNERS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];

/// Smallest triangle area accepted among the displaced corners.
pub const MIN_TRIANGLE_AREA: f64 = 1e-6;

/// Normal equations are abandoned for an SVD pseudo-inverse beyond this condition number.
pub const MAX_NORMAL_CONDITION: f64 = 1e8;

fn targets(offsets: &[f64; 8]) -> [(f64, f64); 4] {
    let mut t = [(0.0, 0.0); 4];
    for (i, (u, v)) in SOURCE_CORNERS.iter().enumerate() {
        t[i] = (u + offsets[2 * i], v + offsets[2 * i + 1]);
    }
    t
}

/// True when any three of the displaced corners span less than
/// [`MIN_TRIANGLE_AREA`].
pub fn corners_collinear(offsets: &[f64; 8]) -> bool {
    let t = targets(offsets);
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES.iter().any(|&[a, b, c]| {
        let (ax, ay) = t[a];
        let (bx, by) = t[b];
        let (cx, cy) = t[c];
        let area = 0.5 * ((bx - ax) * (cy - ay) - (by - ay) * (cx - ax)).abs();
        area <= MIN_TRIANGLE_AREA
    })
}

pub fn dlt_system(offsets: &[f64; 8]) -> (DltMatrix, DltRhs) {
    let mut m = DltMatrix::zeros();
    let mut b = DltRhs::zeros();
    for (i, ((u, v), (tu, tv))) in SOURCE_CORNERS.iter().zip(targets(offsets)).enumerate() {
        let r = 2 * i;
        m[(r, 2)] = -u;
        m[(r, 3)] = -v;
        m[(r, 4)] = tv * u;
        m[(r, 5)] = tv * v;
        b[r] = -tv;
        m[(r + 1, 0)] = *u;
        m[(r + 1, 1)] = *v;
        m[(r + 1, 4)] = -tu * u;
        m[(r + 1, 5)] = -tu * v;
        b[r + 1] = tu;
    }
    (m, b)
}

fn solve_reduced(offsets: &[f64; 8]) -> Result<(DltMatrix, DltRhs, SVector<f64, 6>)> {
    if offsets.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite corner offset".into()));
    }
    if corners_collinear(offsets) {
        return Err(Error::singular("displaced corners are collinear"));
    }
    let (m, b) = dlt_system(offsets);
    let normal = m.transpose() * m;
    let eig = normal.symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e.abs()), hi.max(e.abs())));
    let h = if lo > 0.0 && hi / lo <= MAX_NORMAL_CONDITION {
        let chol = normal
            .cholesky()
            .ok_or_else(|| Error::singular("normal matrix is not positive definite"))?;
        chol.solve(&(m.transpose() * b))
    } else {
        let svd = m.svd(true, true);
        svd.solve(&b, 1e-12)
            .map_err(|e| Error::singular(format!("pseudo-inverse failed: {e}")))?
    };
    Ok((m, b, h))
}

fn assemble(h: &SVector<f64, 6>) -> Mat3 {
    Mat3::new(h[0], h[1], 0.0, h[2], h[3], 0.0, h[4], h[5], 1.0)
}

/// Homography mapping the reference corners onto the displaced corners.
pub fn dlt_solve(corner_offsets: &[f64; 8]) -> Result<Mat3> {
    let (_, _, h) = solve_reduced(corner_offsets)?;
    Ok(assemble(&h))
}

/// `∂ĥ / ∂offsets` (6×8) of the least-squares solve.
///
/// With `N = MᵀM` and residual `r = b − Mĥ`, each parameter direction gives
/// `N ∂ĥ = ∂Mᵀ r + Mᵀ(∂b − ∂M ĥ)`; when the system is consistent (`r = 0`)
/// this is the plain solve sensitivity `∂ĥ = M⁻¹(∂b − ∂M ĥ)`.
pub fn dlt_jacobian(corner_offsets: &[f64; 8]) -> Result<SMatrix<f64, 6, 8>> {
    let (m, b, h) = solve_reduced(corner_offsets)?;
    let normal = m.transpose() * m;
    let inv = normal
        .try_inverse()
        .ok_or_else(|| Error::singular("normal matrix is not invertible"))?;
    let resid = b - m * h;
    let mut jac = SMatrix::<f64, 6, 8>::zeros();
    for (i, (u, v)) in SOURCE_CORNERS.iter().enumerate() {
        // parameter 2i moves u'_i, parameter 2i+1 moves v'_i
        for axis in 0..2 {
            let mut dm = DltMatrix::zeros();
            let mut db = DltRhs::zeros();
            if axis == 0 {
                dm[(2 * i + 1, 4)] = -u;
                dm[(2 * i + 1, 5)] = -v;
                db[2 * i + 1] = 1.0;
            } else {
                dm[(2 * i, 4)] = *u;
                dm[(2 * i, 5)] = *v;
                db[2 * i] = -1.0;
            }
            let rhs = dm.transpose() * resid + m.transpose() * (db - dm * h);
            jac.set_column(2 * i + axis, &(inv * rhs));
        }
    }
    Ok(jac)
}
