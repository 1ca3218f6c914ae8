//! Detection-weighted descriptor loss.

use crate::error::{Error, Result};

use super::descriptor::{
    circle_loss, circle_loss_weighted, hardest_contrastive, hardest_contrastive_weighted, DescriptorPairs, LossParams,
};

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLoss {
    pub value: f64,
    /// `ŝ_c ŝ′_c / Σ_q ŝ_q ŝ′_q`; sums to one unless degenerate.
    pub weights: Vec<f64>,
    pub grad_scores_a: Vec<f64>,
    pub grad_scores_b: Vec<f64>,
    pub grad_terms: Vec<f64>,
    /// Every score product was zero; value and gradients are zero.
    pub degenerate: bool,
}

/// `(1/|C|) Σ_c (ŝ_c ŝ′_c / Σ_q ŝ_q ŝ′_q) · M_c`, with both the leading
/// `1/|C|` and the normalized weights applied.
pub fn weighted_detection_loss(scores_a: &[f64], scores_b: &[f64], terms: &[f64]) -> Result<WeightedLoss> {
    let n = terms.len();
    if n == 0 {
        return Err(Error::validation("at least one correspondence required"));
    }
    if scores_a.len() != n || scores_b.len() != n {
        return Err(Error::shape("score and term lists differ in length"));
    }
    let products: Vec<f64> = scores_a.iter().zip(scores_b).map(|(a, b)| a * b).collect();
    let total: f64 = products.iter().sum();
    if total == 0.0 {
        return Ok(WeightedLoss {
            value: 0.0,
            weights: vec![0.0; n],
            grad_scores_a: vec![0.0; n],
            grad_scores_b: vec![0.0; n],
            grad_terms: vec![0.0; n],
            degenerate: true,
        });
    }
    let inv_n = 1.0 / n as f64;
    let weights: Vec<f64> = products.iter().map(|p| p / total).collect();
    let weighted: f64 = weights.iter().zip(terms).map(|(w, m)| w * m).sum();
    let value = inv_n * weighted;
    // ∂/∂p_c of (1/n)·Σ p M / Σ p = (1/n)(M_c − weighted)/Σ p
    let dp: Vec<f64> = terms.iter().map(|m| inv_n * (m - weighted) / total).collect();
    Ok(WeightedLoss {
        value,
        grad_scores_a: dp.iter().zip(scores_b).map(|(d, b)| d * b).collect(),
        grad_scores_b: dp.iter().zip(scores_a).map(|(d, a)| d * a).collect(),
        grad_terms: weights.iter().map(|w| inv_n * w).collect(),
        weights,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorLoss {
    HardestContrastive,
    Circle,
}

/// Detection-weighted descriptor loss with gradients for both score lists and
/// both descriptor sets.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLoss {
    pub value: f64,
    pub grad_scores_a: Vec<f64>,
    pub grad_scores_b: Vec<f64>,
    pub grad_a: Vec<Vec<f64>>,
    pub grad_b: Vec<Vec<f64>>,
    pub degenerate: bool,
    pub non_smooth: bool,
}

/// The descriptor terms `M_c` weighted by the detection scores at each
/// correspondence.
pub fn joint_loss(
    scores_a: &[f64],
    scores_b: &[f64],
    pairs: &DescriptorPairs<'_>,
    params: &LossParams,
    kind: DescriptorLoss,
) -> Result<JointLoss> {
    let terms = match kind {
        DescriptorLoss::HardestContrastive => hardest_contrastive(pairs, params)?,
        DescriptorLoss::Circle => circle_loss(pairs, params)?,
    };
    let w = weighted_detection_loss(scores_a, scores_b, &terms.per_pair)?;
    // chain the term weights ∂L/∂M_c back into the descriptors
    let back = match kind {
        DescriptorLoss::HardestContrastive => hardest_contrastive_weighted(pairs, params, &w.grad_terms)?,
        DescriptorLoss::Circle => circle_loss_weighted(pairs, params, &w.grad_terms)?,
    };
    Ok(JointLoss {
        value: w.value,
        grad_scores_a: w.grad_scores_a,
        grad_scores_b: w.grad_scores_b,
        grad_a: back.grad_a,
        grad_b: back.grad_b,
        degenerate: w.degenerate,
        non_smooth: terms.non_smooth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_scores_give_scaled_mean() {
        let m = [0.3, 0.9, 1.2, 0.0];
        let out = weighted_detection_loss(&[0.7; 4], &[0.7; 4], &m).unwrap();
        let mean = m.iter().sum::<f64>() / 4.0;
        assert!((out.value - mean / 4.0).abs() < 1e-15);
    }

    #[test]
    fn single_nonzero_product_selects_its_term() {
        let out = weighted_detection_loss(&[1.0, 0.0, 0.5], &[1.0, 0.3, 0.0], &[0.8, 5.0, 7.0]).unwrap();
        assert_eq!(out.weights, [1.0, 0.0, 0.0]);
        assert!((out.value - 0.8 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        assert!(weighted_detection_loss(&[0.0; 2], &[1.0; 2], &[1.0; 2]).unwrap().degenerate);
        assert!(weighted_detection_loss(&[], &[], &[]).is_err());
        assert!(weighted_detection_loss(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn equals_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n = rng.random_range(1..40);
            let sa: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let sb: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let m: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.5)).collect();
            let out = weighted_detection_loss(&sa, &sb, &m).unwrap();
            let mut den = 0.0;
            for q in 0..n {
                den += sa[q] * sb[q];
            }
            let mut direct = 0.0;
            for c in 0..n {
                direct += sa[c] * sb[c] / den * m[c];
            }
            direct /= n as f64;
            assert!((out.value - direct).abs() < 1e-7);
            assert!((out.weights.iter().sum::<f64>() - 1.0).abs() < 1e-7);
        }
    }
}
