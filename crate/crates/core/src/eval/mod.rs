//! Descriptor matching and the homography and epipolar evaluation protocols.

pub mod dataset;
pub mod epipolar;
pub mod homography;
pub mod matching;
pub mod report;
pub mod run;

pub use epipolar::{
    eight_point, estimate_fundamental_ransac, mean_normalized_sed, pose_recall, symmetric_epipolar_distance,
    FundamentalGt, RansacConfig, RansacResult,
};
pub use homography::{
    matching_score, mma, mma_curve, repeatability, warp_homography, HomographyGt, Size, MMA_THRESHOLDS,
};
pub use matching::{match_descriptors, Match, MatchSet};
pub use report::{EpipolarPairResult, EpipolarReport, HomographyPairResult, HomographyReport};
pub use run::{
    evaluate_epipolar_pair, evaluate_homography_pair, evaluate_hpatches, evaluate_pair_list, sidecar_features,
    EpipolarParams, MatchParams, CORRECT_THRESHOLD,
};
