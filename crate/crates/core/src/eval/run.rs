//! Dataset-level evaluation: feature lookup, matching and metric collection.
//!
//! Pairs are evaluated in parallel and collected in input order, so reports
//! do not depend on the thread count.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::Result;
use crate::features::FeatureSet;
use crate::image::load_image;

use super::dataset::{discover_sequences, find_image, read_matrix3, read_pair_list, PairSpec};
use super::epipolar::{
    estimate_fundamental_ransac, mean_normalized_sed, normalized_sed, virtual_from_fundamental, FundamentalGt,
    Point, RansacConfig, DEFAULT_RECALL_THRESHOLD, VIRTUAL_CORRESPONDENCES,
};
use super::homography::{matching_score, mma_curve, repeatability, HomographyGt, Size, MMA_THRESHOLDS};
use super::matching::{match_descriptors, MatchSet};
use super::report::{EpipolarPairResult, EpipolarReport, HomographyPairResult, HomographyReport};

/// Distance (px) within which a warped keypoint counts as repeated or a match as correct.
pub const CORRECT_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub ratio: f32,
    pub mutual: bool,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self { ratio: 0.8, mutual: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarParams {
    pub ransac: RansacConfig,
    pub recall_threshold: f64,
    pub virtual_points: usize,
}

impl Default for EpipolarParams {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            recall_threshold: DEFAULT_RECALL_THRESHOLD,
            virtual_points: VIRTUAL_CORRESPONDENCES,
        }
    }
}

pub fn evaluate_homography_pair(
    sequence: &str,
    target: usize,
    fa: &FeatureSet,
    fb: &FeatureSet,
    gt: &HomographyGt,
    params: &MatchParams,
) -> Result<HomographyPairResult> {
    let m = match_descriptors(fa, fb, params.ratio, params.mutual)?;
    Ok(HomographyPairResult {
        sequence: sequence.to_string(),
        target,
        keypoints_a: fa.len(),
        keypoints_b: fb.len(),
        matches: m.len(),
        repeatability: repeatability(&fa.keypoints, &fb.keypoints, gt, CORRECT_THRESHOLD),
        matching_score: matching_score(&m, &fa.keypoints, &fb.keypoints, gt, CORRECT_THRESHOLD),
        mma: mma_curve(&m, &fa.keypoints, &fb.keypoints, gt, &MMA_THRESHOLDS),
    })
}

fn matched_points(m: &MatchSet, fa: &FeatureSet, fb: &FeatureSet) -> (Vec<Point>, Vec<Point>) {
    m.matches
        .iter()
        .map(|x| {
            let (ka, kb) = (&fa.keypoints[x.a], &fb.keypoints[x.b]);
            ((ka.x as f64, ka.y as f64), (kb.x as f64, kb.y as f64))
        })
        .unzip()
}

fn gt_share(gt: &FundamentalGt, a: &[Point], b: &[Point], keep: impl Fn(usize) -> bool, thr: f64) -> Option<f64> {
    let (mut total, mut good) = (0usize, 0usize);
    for i in (0..a.len()).filter(|i| keep(*i)) {
        total += 1;
        if normalized_sed(&gt.f, a[i], b[i], gt.size_a, gt.size_b).is_some_and(|d| d < thr) {
            good += 1;
        }
    }
    (total > 0).then(|| 100.0 * good as f64 / total as f64)
}

/// Matching, ground-truth inlier shares before and after RANSAC, and the
/// virtual-correspondence error of the estimate. `seed` drives the virtual sample.
pub fn evaluate_epipolar_pair(
    name: &str,
    fa: &FeatureSet,
    fb: &FeatureSet,
    gt: &FundamentalGt,
    matching: &MatchParams,
    params: &EpipolarParams,
    seed: u64,
) -> Result<EpipolarPairResult> {
    let m = match_descriptors(fa, fb, matching.ratio, matching.mutual)?;
    let (a, b) = matched_points(&m, fa, fb);
    let thr = params.ransac.threshold;
    let inlier_m = gt_share(gt, &a, &b, |_| true, thr);
    let mut out = EpipolarPairResult {
        name: name.to_string(),
        corrs_m: m.len(),
        inlier_m,
        corrs: None,
        inlier: None,
        mean_sed: None,
        recalled: false,
    };
    match estimate_fundamental_ransac(&a, &b, gt.size_a, gt.size_b, &params.ransac) {
        Ok(r) => {
            out.corrs = Some(r.num_inliers());
            out.inlier = gt_share(gt, &a, &b, |i| r.inliers[i], thr);
            let virt = virtual_from_fundamental(&gt.f, gt.size_a, gt.size_b, params.virtual_points, seed);
            out.mean_sed = mean_normalized_sed(&r.f, &virt, gt.size_a, gt.size_b);
            out.recalled = out.mean_sed.is_some_and(|e| e < params.recall_threshold);
        }
        Err(e) => log::warn!("{name}: estimation failed: {e}"),
    }
    Ok(out)
}

fn image_size(path: &Path) -> Result<Size> {
    let img = load_image(path)?;
    Ok((img.width(), img.height()))
}

enum Job<T> {
    Run(T),
    Skip(String),
}

/// Evaluates pairs `1-k` (`k = 2..=6`) of every sequence under `root`.
/// Pairs with a missing image or homography are skipped and counted.
pub fn evaluate_hpatches<F>(root: &Path, features: F, params: &MatchParams) -> Result<HomographyReport>
where
    F: Fn(&Path) -> Result<FeatureSet> + Sync,
{
    let mut jobs = Vec::new();
    for seq in discover_sequences(root)? {
        let first = find_image(&seq.dir, 1).expect("discovered sequences hold image 1");
        for k in 2..=6 {
            let job = match (find_image(&seq.dir, k), seq.dir.join(format!("H_1_{k}"))) {
                (None, _) => Job::Skip(format!("{}: image {k} missing", seq.name)),
                (Some(_), h) if !h.is_file() => Job::Skip(format!("{}: H_1_{k} missing", seq.name)),
                (Some(img), h) => Job::Run((seq.name.clone(), k, first.clone(), img, h)),
            };
            jobs.push(job);
        }
    }
    let results: Vec<Result<Option<HomographyPairResult>>> = jobs
        .into_par_iter()
        .map(|job| {
            let (name, k, pa, pb, hp): (String, usize, PathBuf, PathBuf, PathBuf) = match job {
                Job::Skip(msg) => {
                    log::warn!("skipping {msg}");
                    return Ok(None);
                }
                Job::Run(j) => j,
            };
            let h = match read_matrix3(&hp).and_then(|h| HomographyGt::new(h, image_size(&pa)?, image_size(&pb)?)) {
                Ok(gt) => gt,
                Err(e) => {
                    log::warn!("skipping {name} 1-{k}: {e}");
                    return Ok(None);
                }
            };
            let fa = features(&pa)?;
            let fb = features(&pb)?;
            evaluate_homography_pair(&name, k, &fa, &fb, &h, params).map(Some)
        })
        .collect();
    let mut report = HomographyReport::default();
    for r in results {
        match r? {
            Some(p) => report.pairs.push(p),
            None => report.skipped += 1,
        }
    }
    if report.pairs.is_empty() {
        log::warn!("no valid pairs under {}", root.display());
    }
    Ok(report)
}

/// Evaluates every line of a pair list; pairs whose files are missing or
/// whose ground truth is not a valid fundamental matrix are skipped and counted.
pub fn evaluate_pair_list<F>(
    list: &Path,
    features: F,
    matching: &MatchParams,
    params: &EpipolarParams,
) -> Result<EpipolarReport>
where
    F: Fn(&Path) -> Result<FeatureSet> + Sync,
{
    let pairs = read_pair_list(list)?;
    let results: Vec<Result<Option<EpipolarPairResult>>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p): (usize, &PairSpec)| {
            let name = p.name();
            let gt = match (|| FundamentalGt::new(read_matrix3(&p.f)?, image_size(&p.a)?, image_size(&p.b)?))() {
                Ok(gt) => gt,
                Err(e) => {
                    log::warn!("skipping {name}: {e}");
                    return Ok(None);
                }
            };
            let fa = features(&p.a)?;
            let fb = features(&p.b)?;
            let seed = params.ransac.seed.wrapping_add(i as u64);
            evaluate_epipolar_pair(&name, &fa, &fb, &gt, matching, params, seed).map(Some)
        })
        .collect();
    let mut report = EpipolarReport::default();
    for r in results {
        match r? {
            Some(p) => report.pairs.push(p),
            None => report.skipped += 1,
        }
    }
    if report.pairs.is_empty() {
        log::warn!("no valid pairs in {}", list.display());
    }
    Ok(report)
}

/// Features stored next to an image as `<image>.<ext>`.
pub fn sidecar_features(ext: &str) -> impl Fn(&Path) -> Result<FeatureSet> + Sync + '_ {
    move |img: &Path| {
        let mut name = img.as_os_str().to_owned();
        name.push(".");
        name.push(ext);
        FeatureSet::load(PathBuf::from(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_sequence;

    #[test]
    fn closed_loop_sequence_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let seq = synthetic_sequence(5, (160, 120), 80, 32).unwrap();
        seq.write(dir.path(), Some("aslf")).unwrap();
        let report = evaluate_hpatches(dir.path(), sidecar_features("aslf"), &MatchParams::default()).unwrap();
        assert_eq!(report.pairs.len(), 5);
        assert_eq!(report.skipped, 0);
        for p in &report.pairs {
            assert_eq!(p.repeatability, Some(100.0));
            assert_eq!(p.matching_score, Some(100.0));
            assert_eq!(p.mma[2], Some(100.0));
        }
    }

    #[test]
    fn missing_ground_truth_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let seq = synthetic_sequence(6, (80, 64), 20, 8).unwrap();
        seq.write(dir.path(), Some("aslf")).unwrap();
        std::fs::remove_file(dir.path().join("H_1_4")).unwrap();
        std::fs::remove_file(dir.path().join("6.pgm")).unwrap();
        let report = evaluate_hpatches(dir.path(), sidecar_features("aslf"), &MatchParams::default()).unwrap();
        assert_eq!(report.pairs.len(), 3);
        assert_eq!(report.skipped, 2);
        let again = evaluate_hpatches(dir.path(), sidecar_features("aslf"), &MatchParams::default()).unwrap();
        assert_eq!(report.to_tsv(), again.to_tsv());
    }
}
