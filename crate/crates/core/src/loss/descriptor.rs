//! Hardest-contrastive and circle losses over corresponding descriptors.
//!
//! Descriptor `i` of image A corresponds to descriptor `i` of image B. Both
//! losses read one table of dot products `sᵢⱼ = aᵢ·bⱼ`; the contrastive loss
//! turns it into distances `D = √(2 − 2s)`, exact for unit vectors.

use crate::error::{Error, Result};

use super::warp::Point;

/// Arguments of hinges, clips and minima closer than this to a switch point
/// make a sample non-smooth.
pub const KINK_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub pos_margin: f64,
    pub neg_margin: f64,
    /// Chebyshev radius, in feature cells, inside which candidates are not negatives.
    pub safe_radius: f64,
    pub circle_margin: f64,
    pub circle_gamma: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            pos_margin: 0.2,
            neg_margin: 1.0,
            safe_radius: 3.0,
            circle_margin: 0.1,
            circle_gamma: 512.0,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.pos_margin && self.pos_margin < self.neg_margin) {
            return Err(Error::validation("margins need 0 < m_p < m_n"));
        }
        if !(self.safe_radius >= 0.0 && self.circle_gamma > 0.0 && self.circle_margin >= 0.0) {
            return Err(Error::validation("safe radius, γ and m must be non-negative"));
        }
        Ok(())
    }
}

/// Correspondences with their descriptors and feature-cell positions.
#[derive(Debug, Clone, Copy)]
pub struct DescriptorPairs<'a> {
    pub a: &'a [Vec<f64>],
    pub b: &'a [Vec<f64>],
    pub cells_a: &'a [Point],
    pub cells_b: &'a [Point],
}

impl DescriptorPairs<'_> {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.a.len();
        if self.b.len() != n || self.cells_a.len() != n || self.cells_b.len() != n {
            return Err(Error::shape("descriptor and cell lists differ in length"));
        }
        if n < 2 {
            return Err(Error::validation("at least 2 correspondences required"));
        }
        let d = self.a[0].len();
        if self.a.iter().chain(self.b).any(|v| v.len() != d) {
            return Err(Error::shape("descriptors differ in dimension"));
        }
        Ok(())
    }
}

/// Pixel positions to cells of a stride-`stride` map.
pub fn cells_from_pixels(points: &[Point], stride: f64) -> Vec<Point> {
    points.iter().map(|p| (p.0 / stride, p.1 / stride)).collect()
}

fn chebyshev(p: Point, q: Point) -> f64 {
    (p.0 - q.0).abs().max((p.1 - q.1).abs())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A negative similarity `a_i · b_j` used by some anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Negative {
    pub i: usize,
    pub j: usize,
}

/// Negatives of anchor `c`: `(c, k′)` for B-side cells outside the safe radius
/// of `c′`, and `(k, c′)` for A-side cells outside the safe radius of `c`.
pub fn negatives(pairs: &DescriptorPairs<'_>, c: usize, radius: f64) -> Vec<Negative> {
    let mut out = Vec::new();
    for k in 0..pairs.len() {
        if k != c && chebyshev(pairs.cells_b[k], pairs.cells_b[c]) > radius {
            out.push(Negative { i: c, j: k });
        }
    }
    for k in 0..pairs.len() {
        if k != c && chebyshev(pairs.cells_a[k], pairs.cells_a[c]) > radius {
            out.push(Negative { i: k, j: c });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub per_pair: Vec<f64>,
    pub grad_a: Vec<Vec<f64>>,
    pub grad_b: Vec<Vec<f64>>,
    /// Anchors without any eligible negative.
    pub no_negative: Vec<bool>,
    /// Distance to the hardest negative, per anchor (contrastive loss only).
    pub hardest_negative: Vec<Option<f64>>,
    /// Some hinge, clip or minimum sits within [`KINK_EPS`] of its switch.
    pub non_smooth: bool,
}

impl LossOutput {
    fn zeros(n: usize, d: usize) -> Self {
        Self {
            value: 0.0,
            per_pair: vec![0.0; n],
            grad_a: vec![vec![0.0; d]; n],
            grad_b: vec![vec![0.0; d]; n],
            no_negative: vec![false; n],
            hardest_negative: vec![None; n],
            non_smooth: false,
        }
    }

    /// Accumulates `g · ∂s_ij` into the descriptor gradients.
    fn add_sim_grad(&mut self, pairs: &DescriptorPairs<'_>, i: usize, j: usize, g: f64) {
        for (o, v) in self.grad_a[i].iter_mut().zip(&pairs.b[j]) {
            *o += g * v;
        }
        for (o, v) in self.grad_b[j].iter_mut().zip(&pairs.a[i]) {
            *o += g * v;
        }
    }
}

/// Distance from a dot product of unit vectors.
pub fn sim_to_dist(s: f64) -> f64 {
    (2.0 - 2.0 * s).max(0.0).sqrt()
}

/// `[d_pos − m_p]₊ + [m_n − d_neg]₊`.
pub fn contrastive_term(d_pos: f64, d_neg: Option<f64>, params: &LossParams) -> f64 {
    let pos = (d_pos - params.pos_margin).max(0.0);
    let neg = d_neg.map_or(0.0, |d| (params.neg_margin - d).max(0.0));
    pos + neg
}

fn uniform_weights(pairs: &DescriptorPairs<'_>) -> Vec<f64> {
    vec![1.0 / pairs.len().max(1) as f64; pairs.len()]
}

fn check_weights(pairs: &DescriptorPairs<'_>, weights: &[f64]) -> Result<()> {
    if weights.len() != pairs.len() {
        return Err(Error::shape("one weight per correspondence required"));
    }
    Ok(())
}

/// Mean over anchors of the hinge on the positive distance plus the hinge on
/// the hardest negative distance.
pub fn hardest_contrastive(pairs: &DescriptorPairs<'_>, params: &LossParams) -> Result<LossOutput> {
    hardest_contrastive_weighted(pairs, params, &uniform_weights(pairs))
}

/// `Σ_c w_c M_c` over the per-anchor contrastive terms, with gradients.
pub fn hardest_contrastive_weighted(
    pairs: &DescriptorPairs<'_>,
    params: &LossParams,
    weights: &[f64],
) -> Result<LossOutput> {
    pairs.check()?;
    params.validate()?;
    check_weights(pairs, weights)?;
    let n = pairs.len();
    let mut out = LossOutput::zeros(n, pairs.a[0].len());
    for c in 0..n {
        let wc = weights[c];
        let sp = dot(&pairs.a[c], &pairs.b[c]);
        let dp = sim_to_dist(sp);
        let negs = negatives(pairs, c, params.safe_radius);
        out.no_negative[c] = negs.is_empty();

        let mut hardest: Option<(f64, Negative)> = None;
        let mut runner_up = f64::INFINITY;
        for ng in &negs {
            let d = sim_to_dist(dot(&pairs.a[ng.i], &pairs.b[ng.j]));
            match hardest {
                Some((best, _)) if d >= best => runner_up = runner_up.min(d),
                _ => {
                    if let Some((best, _)) = hardest {
                        runner_up = runner_up.min(best);
                    }
                    hardest = Some((d, *ng));
                }
            }
        }
        out.hardest_negative[c] = hardest.map(|h| h.0);
        out.per_pair[c] = contrastive_term(dp, hardest.map(|h| h.0), params);

        if (dp - params.pos_margin).abs() < KINK_EPS || dp < KINK_EPS {
            out.non_smooth = true;
        }
        if dp > params.pos_margin {
            // ∂D/∂s = −1/D
            out.add_sim_grad(pairs, c, c, -wc / dp);
        }
        if let Some((dn, ng)) = hardest {
            // runner_up counts only distinct negatives; a tie appears as runner_up == dn
            if (params.neg_margin - dn).abs() < KINK_EPS || (runner_up - dn).abs() < KINK_EPS || dn < KINK_EPS {
                out.non_smooth = true;
            }
            if dn < params.neg_margin {
                out.add_sim_grad(pairs, ng.i, ng.j, wc / dn);
            }
        }
    }
    out.value = out.per_pair.iter().zip(weights).map(|(m, w)| m * w).sum();
    Ok(out)
}

/// `log(1 + e^u)` and its derivative `σ(u)`.
fn softplus_with_grad(u: f64) -> (f64, f64) {
    let v = u.max(0.0) + (-u.abs()).exp().ln_1p();
    let s = if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    };
    (v, s)
}

/// Circle loss of one anchor from its positive and negative similarities;
/// returns the loss and its partials.
pub fn circle_term(sp: f64, sn: &[f64], params: &LossParams) -> (f64, f64, Vec<f64>) {
    if sn.is_empty() {
        return (0.0, 0.0, Vec::new());
    }
    let m = params.circle_margin;
    let g = params.circle_gamma;
    let (op, on, dlt_p, dlt_n) = (1.0 + m, -m, 1.0 - m, m);

    let ap = (op - sp).max(0.0);
    let zp = -g * ap * (sp - dlt_p);
    let dzp = -g * (ap - if op - sp > 0.0 { sp - dlt_p } else { 0.0 });

    let zn: Vec<f64> = sn.iter().map(|s| g * (s - on).max(0.0) * (s - dlt_n)).collect();
    let dzn: Vec<f64> = sn
        .iter()
        .map(|s| g * ((s - on).max(0.0) + if *s > on { s - dlt_n } else { 0.0 }))
        .collect();
    let zmax = zn.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ez: Vec<f64> = zn.iter().map(|z| (z - zmax).exp()).collect();
    let sum: f64 = ez.iter().sum();
    let lse = zmax + sum.ln();

    let (value, sig) = softplus_with_grad(lse + zp);
    let dsn = ez.iter().zip(&dzn).map(|(e, d)| sig * e / sum * d).collect();
    (value, sig * dzp, dsn)
}

/// Mean over anchors of the circle loss with `O_p = 1+m`, `O_n = −m`,
/// `Δ_p = 1−m`, `Δ_n = m`.
pub fn circle_loss(pairs: &DescriptorPairs<'_>, params: &LossParams) -> Result<LossOutput> {
    circle_loss_weighted(pairs, params, &uniform_weights(pairs))
}

/// `Σ_c w_c L_c` over the per-anchor circle losses, with gradients.
pub fn circle_loss_weighted(pairs: &DescriptorPairs<'_>, params: &LossParams, weights: &[f64]) -> Result<LossOutput> {
    pairs.check()?;
    params.validate()?;
    check_weights(pairs, weights)?;
    let n = pairs.len();
    let mut out = LossOutput::zeros(n, pairs.a[0].len());
    let (op, on) = (1.0 + params.circle_margin, -params.circle_margin);
    for c in 0..n {
        let sp = dot(&pairs.a[c], &pairs.b[c]);
        let negs = negatives(pairs, c, params.safe_radius);
        out.no_negative[c] = negs.is_empty();
        let sn: Vec<f64> = negs.iter().map(|ng| dot(&pairs.a[ng.i], &pairs.b[ng.j])).collect();
        if (sp - op).abs() < KINK_EPS || sn.iter().any(|s| (s - on).abs() < KINK_EPS) {
            out.non_smooth = true;
        }
        let (v, dsp, dsn) = circle_term(sp, &sn, params);
        out.per_pair[c] = v;
        out.add_sim_grad(pairs, c, c, dsp * weights[c]);
        for (ng, d) in negs.iter().zip(dsn) {
            out.add_sim_grad(pairs, ng.i, ng.j, d * weights[c]);
        }
    }
    out.value = out.per_pair.iter().zip(weights).map(|(m, w)| m * w).sum();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn far_cells(n: usize) -> Vec<Point> {
        (0..n).map(|i| (10.0 * i as f64, 0.0)).collect()
    }

    #[test]
    fn contrastive_scalar_cases() {
        let p = LossParams::default();
        assert_eq!(contrastive_term(0.1, Some(1.2), &p), 0.0);
        assert!((contrastive_term(0.5, Some(0.4), &p) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn circle_scalar_cases() {
        let p = LossParams::default();
        let (v, _, _) = circle_term(1.0, &[0.0], &p);
        assert!((v - (1.0 + (-10.24f64).exp()).ln()).abs() < 1e-15);
        assert!((v - 3.5713e-5).abs() < 1e-8);
        let (v, _, _) = circle_term(0.9, &[0.1], &p);
        assert!((v - 2f64.ln()).abs() < 1e-9);
        let mut last = f64::INFINITY;
        for i in 0..20 {
            let (v, _, _) = circle_term(0.5 + 0.025 * i as f64, &[0.3, -0.2], &p);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn contrastive_equals_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = LossParams::default();
        for _ in 0..50 {
            let a: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, 4)).collect();
            let b: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, 4)).collect();
            let cells = far_cells(3);
            let pairs = DescriptorPairs { a: &a, b: &b, cells_a: &cells, cells_b: &cells };
            let got = hardest_contrastive(&pairs, &p).unwrap();
            let mut total = 0.0;
            for c in 0..3 {
                let l2 = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
                let mut neg = f64::INFINITY;
                for k in (0..3).filter(|k| *k != c) {
                    neg = neg.min(l2(&a[c], &b[k])).min(l2(&a[k], &b[c]));
                }
                total += (l2(&a[c], &b[c]) - 0.2).max(0.0) + (1.0 - neg).max(0.0);
            }
            assert!((got.value - total / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_vanish_only_when_margins_hold() {
        // orthonormal descriptors: positives coincide, negatives at distance √2
        let e = |i: usize| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let a: Vec<Vec<f64>> = (0..4).map(e).collect();
        let cells = far_cells(4);
        let pairs = DescriptorPairs { a: &a, b: &a, cells_a: &cells, cells_b: &cells };
        let p = LossParams::default();
        assert_eq!(hardest_contrastive(&pairs, &p).unwrap().value, 0.0);
        assert!(circle_loss(&pairs, &p).unwrap().value >= 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 4)).collect();
        let pairs = DescriptorPairs { a: &a, b: &b, cells_a: &cells, cells_b: &cells };
        assert!(hardest_contrastive(&pairs, &p).unwrap().value > 0.0);
        assert!(circle_loss(&pairs, &p).unwrap().value > 0.0);
    }

    #[test]
    fn safe_radius_never_lowers_the_hardest_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = LossParams::default();
        for _ in 0..30 {
            let a: Vec<Vec<f64>> = (0..6).map(|_| unit(&mut rng, 8)).collect();
            let b: Vec<Vec<f64>> = (0..6).map(|_| unit(&mut rng, 8)).collect();
            let cells = far_cells(6);
            let pairs = DescriptorPairs { a: &a, b: &b, cells_a: &cells, cells_b: &cells };
            let before = hardest_contrastive(&pairs, &p).unwrap().hardest_negative[0].unwrap();
            for k in 1..6 {
                let mut moved = cells.clone();
                moved[k] = (cells[0].0 + 2.0, cells[0].1 - 3.0);
                let pairs = DescriptorPairs { a: &a, b: &b, cells_a: &moved, cells_b: &moved };
                let after = hardest_contrastive(&pairs, &p).unwrap().hardest_negative[0].unwrap();
                assert!(after >= before);
            }
        }
    }

    #[test]
    fn anchors_without_negatives_are_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<Vec<f64>> = (0..2).map(|_| unit(&mut rng, 4)).collect();
        let cells = vec![(0.0, 0.0), (1.0, 1.0)];
        let pairs = DescriptorPairs { a: &a, b: &a, cells_a: &cells, cells_b: &cells };
        let out = hardest_contrastive(&pairs, &LossParams::default()).unwrap();
        assert_eq!(out.no_negative, [true, true]);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn losses_are_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = 6;
        let q = DMatrix::<f64>::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let rotate = |v: &Vec<f64>| (&q * nalgebra::DVector::from_vec(v.clone())).as_slice().to_vec();
        let a: Vec<Vec<f64>> = (0..8).map(|_| unit(&mut rng, d)).collect();
        let b: Vec<Vec<f64>> = (0..8).map(|_| unit(&mut rng, d)).collect();
        let (ra, rb): (Vec<_>, Vec<_>) = (a.iter().map(rotate).collect(), b.iter().map(rotate).collect());
        let cells = far_cells(8);
        let p = LossParams::default();
        let x = DescriptorPairs { a: &a, b: &b, cells_a: &cells, cells_b: &cells };
        let y = DescriptorPairs { a: &ra, b: &rb, cells_a: &cells, cells_b: &cells };
        assert!((hardest_contrastive(&x, &p).unwrap().value - hardest_contrastive(&y, &p).unwrap().value).abs() < 1e-6);
        assert!((circle_loss(&x, &p).unwrap().value - circle_loss(&y, &p).unwrap().value).abs() < 1e-6);
    }
}
