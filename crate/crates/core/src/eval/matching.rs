//! Exhaustive nearest-neighbor descriptor matching.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    /// L2 distance between the two descriptors.
    pub distance: f32,
    pub mutual: bool,
    pub ratio_passed: bool,
    /// Set once geometric verification has run.
    pub ransac_inlier: Option<bool>,
}

/// Accepted matches plus how many candidates survived each filter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    /// One candidate per query descriptor in `a`.
    pub candidates: usize,
    pub after_ratio: usize,
    pub after_mutual: usize,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

fn l2(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt()
}

/// Nearest and second-nearest neighbor of `q` among `set` (lowest index wins ties).
fn two_nearest(q: &[f32], set: &FeatureSet) -> (usize, f32, Option<f32>) {
    let (mut i1, mut d1, mut d2) = (0, f32::INFINITY, None::<f32>);
    for j in 0..set.len() {
        let d = l2(q, set.descriptor(j));
        if d < d1 {
            if d1.is_finite() {
                d2 = Some(d1);
            }
            i1 = j;
            d1 = d;
        } else if d2.is_none_or(|v| d < v) {
            d2 = Some(d);
        }
    }
    (i1, d1, d2)
}

/// Matches every descriptor of `a` to its nearest neighbor in `b`, keeping it
/// when `d₁ < ratio·d₂` (always, with fewer than two candidates) and, if
/// `mutual`, when it is also `b`'s nearest neighbor back in `a`.
pub fn match_descriptors(a: &FeatureSet, b: &FeatureSet, ratio: f32, mutual: bool) -> Result<MatchSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::validation(format!("ratio {ratio} outside (0, 1]")));
    }
    if a.is_empty() || b.is_empty() {
        return Ok(MatchSet::default());
    }
    if a.dim != b.dim {
        return Err(Error::shape(format!("descriptor dims {} and {}", a.dim, b.dim)));
    }
    let forward: Vec<(usize, f32, Option<f32>)> = (0..a.len())
        .into_par_iter()
        .map(|i| two_nearest(a.descriptor(i), b))
        .collect();
    let backward: Vec<usize> = if mutual {
        (0..b.len())
            .into_par_iter()
            .map(|j| two_nearest(b.descriptor(j), a).0)
            .collect()
    } else {
        Vec::new()
    };
    let mut set = MatchSet {
        candidates: a.len(),
        ..MatchSet::default()
    };
    for (i, &(j, d1, d2)) in forward.iter().enumerate() {
        let ratio_passed = d2.is_none_or(|d2| d1 < ratio * d2);
        if !ratio_passed {
            continue;
        }
        set.after_ratio += 1;
        let is_mutual = !mutual || backward[j] == i;
        if !is_mutual {
            continue;
        }
        set.after_mutual += 1;
        set.matches.push(Match {
            a: i,
            b: j,
            distance: d1,
            mutual,
            ratio_passed,
            ransac_inlier: None,
        });
    }
    Ok(set)
}
