//! Training-signal math: correspondences, descriptor losses, the
//! detection-weighted loss, and gradient verification.

pub mod descriptor;
pub mod detection;
pub mod gradcheck;
pub mod warp;

pub use descriptor::{
    cells_from_pixels, circle_loss, circle_loss_weighted, circle_term, contrastive_term, hardest_contrastive,
    hardest_contrastive_weighted, negatives, sim_to_dist, DescriptorPairs, LossOutput, LossParams, Negative, KINK_EPS,
};
pub use detection::{joint_loss, weighted_detection_loss, DescriptorLoss, JointLoss, WeightedLoss};
pub use gradcheck::{gradcheck, gradcheck_jacobian, GradcheckConfig, GradcheckReport, GradcheckStatus};
pub use warp::{
    warp_points_depth, warp_points_homography, CameraPair, Correspondence, CorrespondenceSet,
    CorrespondenceSource, MAX_CORRESPONDENCES, MIN_CORRESPONDENCES,
};
