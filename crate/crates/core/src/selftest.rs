//! Registry of property and oracle checks, runnable by module filter.
//!
//! Criterion checks carry the number of the acceptance criterion they verify;
//! the remaining checks cover extra module invariants.

use std::f64::consts::{LN_2, SQRT_2};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, DcnVariant, DESCRIPTOR_DIM};
use crate::dcn::{conv2d_raw, deform_conv2d_field_grad, deform_conv2d_raw, ConvLayer, DeformField};
use crate::detector::{
    combine_scores, d2_channel_score, d2_local_score, d2_score, edge_keep, level_to_image, muldet_fuse,
    peakiness_score, peakiness_score_backward, peakiness_scores, pyramid_detect, pyramid_dims, DetectorConfig,
    Fusion, Keypoint, PyramidConfig,
};
use crate::error::{Error, Result};
use crate::eval::epipolar::{
    estimate_fundamental_ransac, mean_normalized_sed, pose_recall, virtual_from_fundamental, Point, RansacConfig,
};
use crate::eval::homography::{
    correct_matches, inside, matching_score, mma, mma_curve, overlap, repeatability, warp_homography, HomographyGt,
    MMA_THRESHOLDS,
};
use crate::eval::matching::match_descriptors;
use crate::eval::run::{evaluate_homography_pair, MatchParams};
use crate::features::FeatureSet;


use crate::geom::{apply_projective, dlt_solve, jacobian_analytic, DeformKind, GeomOp, SOURCE_CORNERS};
use crate::image::standardize_tensor;
use crate::loss::{
    circle_loss, circle_term, contrastive_term, gradcheck, gradcheck_jacobian, hardest_contrastive, joint_loss,
    DescriptorLoss, DescriptorPairs, GradcheckConfig, GradcheckReport, LossParams,
};
use crate::pipeline::Extractor;
use crate::synth::{random_descriptors, random_homography, random_pose_pair_with, synthetic_sequence, textured_image, SceneConfig};
use crate::tensor::Tensor;
use crate::weights::{seeded_random_weights, WeightStore};

/// Deliberate defects for mutation testing of the checks themselves.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Adds this value to one entry of the analytic DLT Jacobian.
    DltJacobian(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SelftestOptions {
    pub seed: u64,
    pub scene: SceneConfig,
    pub fault: Fault,
    /// Random points per gradient-checked operation.
    pub grad_points: usize,
}

impl SelftestOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            scene: SceneConfig::default(),
            fault: Fault::None,
            grad_points: 100,
        }
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt))
    }
}

type Outcome = std::result::Result<String, String>;

pub struct Check {
    pub id: &'static str,
    /// Module the check belongs to, matched by `--filter`.
    pub module: &'static str,
    pub criterion: Option<u8>,
    pub description: &'static str,
    run: fn(&SelftestOptions) -> Outcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub id: &'static str,
    pub module: &'static str,
    pub criterion: Option<u8>,
    pub description: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Check {
    pub fn matches(&self, filter: &str) -> bool {
        self.module.contains(filter) || self.id.contains(filter)
    }

    pub fn run(&self, opts: &SelftestOptions) -> CheckResult {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(|| (self.run)(opts))
            .unwrap_or_else(|_| Err("check panicked".to_string()));
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        CheckResult {
            id: self.id,
            module: self.module,
            criterion: self.criterion,
            description: self.description,
            passed,
            detail,
            elapsed: start.elapsed(),
        }
    }
}

pub fn registry() -> Vec<Check> {
    vec![
        Check { id: "weights-roundtrip", module: "core-numerics", criterion: None, description: "weight files round-trip bit-exactly and reject corruption", run: weights_roundtrip },
        Check { id: "dcn-reduction", module: "dcn-ops", criterion: Some(1), description: "zero offsets and modulation 0.5 give half the plain convolution", run: dcn_reduction },
        Check { id: "dcn-field-gradient", module: "dcn-ops", criterion: None, description: "offset and modulation gradients match central differences", run: dcn_field_gradient },
        Check { id: "dlt-round-trip", module: "geom-transforms", criterion: Some(2), description: "constrained homographies recovered from their corners; collinear corners rejected", run: dlt_round_trip },
        Check { id: "gradcheck-geometry", module: "geom-transforms", criterion: Some(3), description: "similarity, affine and DLT Jacobians", run: gradcheck_geometry },
        Check { id: "gradcheck-offsets", module: "dcn-ops", criterion: Some(3), description: "offset-generation Jacobians for every deformation kind", run: gradcheck_offsets },
        Check { id: "gradcheck-peakiness", module: "detector", criterion: Some(3), description: "peakiness score gradient", run: gradcheck_peakiness },
        Check { id: "gradcheck-losses", module: "loss-lab", criterion: Some(3), description: "detection-weighted, hardest-contrastive and circle loss gradients", run: gradcheck_losses },
        Check { id: "scoring-oracles", module: "detector", criterion: Some(4), description: "score maps equal naive loops; constant input hits ln 2 and (ln 2)^2", run: scoring_oracles },
        Check { id: "backbone-shift", module: "backbone-net", criterion: None, description: "conv8 features shift with the input by whole cells", run: backbone_shift },
        Check { id: "detection-covariance", module: "detector", criterion: Some(5), description: "an (8, 8) px shift moves interior keypoints by (8, 8)", run: detection_covariance },
        Check { id: "edge-rule", module: "detector", criterion: Some(6), description: "Hessian ratio test keeps blobs and rejects ridges at r = 10", run: edge_rule },
        Check { id: "metrics-closed-loop", module: "match-eval", criterion: Some(7), description: "exact synthetic sequence scores 100%; curve monotone; metrics equal brute force", run: metrics_closed_loop },
        Check { id: "epipolar-loop", module: "match-eval", criterion: Some(8), description: "exact pose pairs, RANSAC under 60% outliers, pose recall", run: epipolar_loop },
        Check { id: "loss-fixed-points", module: "loss-lab", criterion: Some(9), description: "hinge and circle-loss fixed points; default margins", run: loss_fixed_points },
        Check { id: "pyramid-bookkeeping", module: "detector", criterion: Some(10), description: "512 px input gives 5 levels; coordinates map back exactly", run: pyramid_bookkeeping },
        Check { id: "extraction-time", module: "cli", criterion: Some(11), description: "single-threaded 480x480 extraction under 10 s", run: extraction_time },
    ]
}

/// Runs the checks matching `filter` (all when `None`), in registry order.
pub fn run_checks(filter: Option<&str>, opts: &SelftestOptions) -> Vec<CheckResult> {
    registry()
        .iter()
        .filter(|c| filter.is_none_or(|f| c.matches(f)))
        .map(|c| c.run(opts))
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err_str(e: Error) -> String {
    e.to_string()
}

fn random_tensor<R: Rng>(rng: &mut R, h: usize, w: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

fn random_layer<R: Rng>(rng: &mut R, k: usize, c_in: usize, c_out: usize) -> ConvLayer<f64> {
    let mut l = ConvLayer::zeros(k, c_in, c_out, 1);
    l.weight.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    l.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    l
}

fn weights_roundtrip(opts: &SelftestOptions) -> Outcome {
    let table = BackboneConfig::new(DcnVariant::Deform(DeformKind::FreeForm)).tensor_specs();
    let store = seeded_random_weights(opts.seed, &table);
    let bytes = store.to_bytes();
    let back = WeightStore::from_bytes(&bytes).map_err(err_str)?;
    ensure(back == store, || "round-trip changed the store".into())?;
    back.validate(&table).map_err(err_str)?;
    let mut bad = bytes.clone();
    bad[0] ^= 0xFF;
    ensure(WeightStore::from_bytes(&bad).is_err(), || "corrupt magic accepted".into())?;
    ensure(WeightStore::from_bytes(&bytes[..bytes.len() - 3]).is_err(), || "truncation accepted".into())?;
    Ok(format!("{} tensors, {} bytes", table.len(), bytes.len()))
}

fn dcn_reduction(opts: &SelftestOptions) -> Outcome {
    let mut rng = opts.rng(1);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(4..12), rng.random_range(4..12));
        let (ci, co) = (rng.random_range(1..5), rng.random_range(1..5));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let x = random_tensor(&mut rng, h, w, ci).cast::<f32>();
        let layer = random_layer(&mut rng, k, ci, co).cast::<f32>();
        let field = DeformField::uniform(h, w, k, 0.5f32);
        let d = deform_conv2d_raw(&x, &layer, &field).map_err(err_str)?;
        let c = conv2d_raw(&x, &layer).map_err(err_str)?;
        for (a, b) in d.data().iter().zip(c.data()) {
            let expect = 0.5 * *b as f64;
            let rel = (*a as f64 - expect).abs() / expect.abs().max(1e-6);
            worst = worst.max(rel);
        }
    }
    ensure(worst < 1e-5, || format!("max rel err {worst:e}"))?;
    Ok(format!("50 draws, max rel err {worst:.1e}"))
}

fn dcn_field_gradient(opts: &SelftestOptions) -> Outcome {
    let mut rng = opts.rng(2);
    let x = random_tensor(&mut rng, 6, 7, 2);
    let l = random_layer(&mut rng, 3, 2, 2);
    let mut field = DeformField::uniform(6, 7, 3, 0.5);
    // keep offsets off integer values, where bilinear sampling has kinks
    for v in field.offsets.data_mut() {
        *v = rng.random_range(0.1..0.9) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    for v in field.modulation.data_mut() {
        *v = rng.random_range(0.1..0.9);
    }
    let g = random_tensor(&mut rng, 6, 7, 2);
    let grad = deform_conv2d_field_grad(&x, &l, &field, &g).map_err(err_str)?;
    let n_off = field.offsets.data().len();
    let mut x0 = field.offsets.data().to_vec();
    x0.extend_from_slice(field.modulation.data());
    let mut analytic = grad.offsets.data().to_vec();
    analytic.extend_from_slice(grad.modulation.data());
    let f = |p: &[f64]| -> Result<f64> {
        let mut fl = field.clone();
        fl.offsets.data_mut().copy_from_slice(&p[..n_off]);
        fl.modulation.data_mut().copy_from_slice(&p[n_off..]);
        let y = deform_conv2d_raw(&x, &l, &fl)?;
        Ok(y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
    };
    let r = gradcheck("deform_conv2d field", f, &x0, &analytic, &GradcheckConfig::default());
    ensure(r.passed(), || r.to_string())?;
    Ok(r.to_string())
}

fn dlt_round_trip(opts: &SelftestOptions) -> Outcome {
    let mut rng = opts.rng(3);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 200 {
        let h0 = Matrix3::new(
            rng.random_range(0.5..1.5),
            rng.random_range(-0.4..0.4),
            0.0,
            rng.random_range(-0.4..0.4),
            rng.random_range(0.5..1.5),
            0.0,
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            1.0,
        );
        let mut off = [0.0; 8];
        let mut ok = true;
        for (i, (u, v)) in SOURCE_CORNERS.iter().enumerate() {
            let (tu, tv) = apply_projective(&h0, *u, *v).map_err(err_str)?;
            off[2 * i] = tu - u;
            off[2 * i + 1] = tv - v;
            ok &= tu.abs() < 2.0 && tv.abs() < 2.0;
        }
        if !ok {
            continue;
        }
        let h = dlt_solve(&off).map_err(err_str)?;
        worst = worst.max((h - h0).abs().max());
        checked += 1;
    }
    ensure(worst < 1e-6, || format!("max entry error {worst:e}"))?;
    let collinear = [0.0, 0.0, 0.0, 0.0, -1.0, -1.0, 0.0, 0.0];
    ensure(matches!(dlt_solve(&collinear), Err(Error::Singular(_))), || "collinear corners accepted".into())?;
    Ok(format!("200 homographies, max entry error {worst:.1e}; collinear rejected"))
}

/// Aggregate of gradient checks over random points of one operation.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSummary {
    pub name: String,
    pub points: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub max_mixed_err: f64,
    pub failures: usize,
    /// Points rejected for lying on a kink before a smooth one was found.
    pub resampled: usize,
    pub first_failure: Option<GradcheckReport>,
}

impl GradSummary {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            points: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            max_mixed_err: 0.0,
            failures: 0,
            resampled: 0,
            first_failure: None,
        }
    }

    fn add(&mut self, r: GradcheckReport) {
        self.points += 1;
        self.max_abs_err = self.max_abs_err.max(r.max_abs_err);
        self.max_rel_err = self.max_rel_err.max(r.max_rel_err);
        self.max_mixed_err = self.max_mixed_err.max(r.max_mixed_err);
        if !r.passed() {
            self.failures += 1;
            self.first_failure.get_or_insert(r);
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.points > 0
    }
}

impl std::fmt::Display for GradSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<34} {} points, {} failed, max abs {:.1e}, max rel {:.1e}, max mixed {:.1e}",
            self.name, self.points, self.failures, self.max_abs_err, self.max_rel_err, self.max_mixed_err
        )?;
        if let Some(r) = &self.first_failure {
            write!(f, "\n    first failure: {r}")?;
        }
        Ok(())
    }
}

fn random_geom_params<R: Rng>(op: &GeomOp, rng: &mut R) -> Vec<f64> {
    let sim = |rng: &mut R| vec![rng.random_range(0.5..2.0), rng.random_range(-3.0..3.0)];
    match op {
        GeomOp::Similarity | GeomOp::Offsets { kind: DeformKind::Similarity, .. } => sim(rng),
        GeomOp::Affine | GeomOp::Offsets { kind: DeformKind::Affine, .. } => {
            let mut p = sim(rng);
            p.extend((0..3).map(|_| rng.random_range(-0.6..0.6)));
            p
        }
        GeomOp::Dlt | GeomOp::Offsets { kind: DeformKind::Homography, .. } => {
            (0..8).map(|_| rng.random_range(-0.3..0.3)).collect()
        }
        GeomOp::Offsets { kind: DeformKind::FreeForm, k } => (0..2 * k * k).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

fn geom_summary(op: GeomOp, opts: &SelftestOptions, salt: u64) -> GradSummary {
    let mut rng = opts.rng(salt);
    let mut s = GradSummary::new(op.name());
    let cfg = GradcheckConfig::default();
    while s.points < opts.grad_points {
        let p = random_geom_params(&op, &mut rng);
        let mut jac = match jacobian_analytic(&op, &p) {
            Ok(j) => j,
            Err(_) => {
                s.resampled += 1;
                continue;
            }
        };
        if let (GeomOp::Dlt, Fault::DltJacobian(eps)) = (op, opts.fault) {
            jac[(0, 0)] += eps;
        }
        s.add(gradcheck_jacobian(op.name(), |x| op.eval(x), &p, &jac, &cfg));
    }
    s
}

fn summaries_outcome(list: Vec<GradSummary>) -> Outcome {
    let text = list.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("\n");
    if list.iter().all(GradSummary::passed) {
        Ok(text)
    } else {
        Err(text)
    }
}

/// Every gradient summary of the suite, grouped as the checks group them.
pub fn gradient_suite(opts: &SelftestOptions) -> Vec<GradSummary> {
    let mut out = geometry_summaries(opts);
    out.extend(offset_summaries(opts));
    out.push(peakiness_summary(opts));
    out.extend(loss_summaries(opts));
    out
}

fn geometry_summaries(opts: &SelftestOptions) -> Vec<GradSummary> {
    [GeomOp::Similarity, GeomOp::Affine, GeomOp::Dlt]
        .into_iter()
        .enumerate()
        .map(|(i, op)| geom_summary(op, opts, 10 + i as u64))
        .collect()
}

fn offset_summaries(opts: &SelftestOptions) -> Vec<GradSummary> {
    [DeformKind::FreeForm, DeformKind::Similarity, DeformKind::Affine, DeformKind::Homography]
        .into_iter()
        .enumerate()
        .map(|(i, kind)| geom_summary(GeomOp::Offsets { kind, k: 3 }, opts, 20 + i as u64))
        .collect()
}

fn gradcheck_geometry(opts: &SelftestOptions) -> Outcome {
    summaries_outcome(geometry_summaries(opts))
}

fn gradcheck_offsets(opts: &SelftestOptions) -> Outcome {
    summaries_outcome(offset_summaries(opts))
}

/// True when the best and runner-up channel products are too close for a
/// finite-difference step to leave the argmax alone.
fn peakiness_near_tie(y: &Tensor<f64>, dilation: usize) -> bool {
    let (a, b) = peakiness_scores(y, dilation);
    let c = y.channels();
    a.data().chunks_exact(c).zip(b.data().chunks_exact(c)).any(|(pa, pb)| {
        let mut prods: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        prods.sort_by(|x, y| y.total_cmp(x));
        prods.len() > 1 && prods[0] - prods[1] < 1e-3
    })
}

fn peakiness_summary(opts: &SelftestOptions) -> GradSummary {
    let mut rng = opts.rng(30);
    let mut s = GradSummary::new("peakiness score");
    let cfg = GradcheckConfig::default();
    while s.points < opts.grad_points {
        let dilation = rng.random_range(1..4);
        let y = random_tensor(&mut rng, 4, 5, 3).map(|v| 2.0 * v);
        let g = random_tensor(&mut rng, 4, 5, 1);
        if peakiness_near_tie(&y, dilation) {
            s.resampled += 1;
            continue;
        }
        let grad = peakiness_score_backward(&y, dilation, &g);
        let f = |p: &[f64]| -> Result<f64> {
            let t = Tensor::from_vec(4, 5, 3, p.to_vec())?;
            Ok(peakiness_score(&t, dilation).data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
        };
        s.add(gradcheck("peakiness", f, y.data(), grad.data(), &cfg));
    }
    s
}

fn gradcheck_peakiness(opts: &SelftestOptions) -> Outcome {
    summaries_outcome(vec![peakiness_summary(opts)])
}

struct LossInstance {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    cells: Vec<Point>,
    scores_a: Vec<f64>,
    scores_b: Vec<f64>,
}

const LOSS_PAIRS: usize = 6;
const LOSS_DIM: usize = DESCRIPTOR_DIM;

fn loss_instance<R: Rng>(rng: &mut R) -> LossInstance {
    let unit = |rng: &mut R| -> Vec<Vec<f64>> {
        random_descriptors(rng, LOSS_PAIRS, LOSS_DIM)
            .into_iter()
            .map(|v| v.into_iter().map(f64::from).collect())
            .collect()
    };
    let a = unit(rng);
    // positives correlated with their anchors so both hinges see varied values
    let noise = unit(rng);
    let b = a
        .iter()
        .zip(&noise)
        .map(|(x, n)| {
            let t = rng.random_range(0.2..1.0);
            let v: Vec<f64> = x.iter().zip(n).map(|(p, q)| p + t * q).collect();
            let norm = v.iter().map(|z| z * z).sum::<f64>().sqrt();
            v.into_iter().map(|z| z / norm).collect()
        })
        .collect();
    LossInstance {
        a,
        b,
        cells: (0..LOSS_PAIRS).map(|_| (rng.random_range(0.0..12.0), rng.random_range(0.0..12.0))).collect(),
        scores_a: (0..LOSS_PAIRS).map(|_| rng.random_range(0.1..2.0)).collect(),
        scores_b: (0..LOSS_PAIRS).map(|_| rng.random_range(0.1..2.0)).collect(),
    }
}

fn split_descriptors(p: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let rows: Vec<Vec<f64>> = p.chunks_exact(LOSS_DIM).map(<[f64]>::to_vec).collect();
    let (a, b) = rows.split_at(LOSS_PAIRS);
    (a.to_vec(), b.to_vec())
}

fn flatten(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    a.iter().chain(b).flatten().copied().collect()
}

fn loss_summaries(opts: &SelftestOptions) -> Vec<GradSummary> {
    let params = LossParams::default();
    let cfg = GradcheckConfig::default();
    let mut out = Vec::new();
    for (salt, name) in [(40u64, "hardest-contrastive"), (41, "circle loss")] {
        let mut rng = opts.rng(salt);
        let mut s = GradSummary::new(name);
        let eval = |pairs: &DescriptorPairs<'_>| {
            if salt == 40 {
                hardest_contrastive(pairs, &params)
            } else {
                circle_loss(pairs, &params)
            }
        };
        while s.points < opts.grad_points {
            let inst = loss_instance(&mut rng);
            let pairs = DescriptorPairs { a: &inst.a, b: &inst.b, cells_a: &inst.cells, cells_b: &inst.cells };
            let Ok(o) = eval(&pairs) else {
                s.resampled += 1;
                continue;
            };
            if o.non_smooth {
                s.resampled += 1;
                continue;
            }
            let f = |p: &[f64]| -> Result<f64> {
                let (a, b) = split_descriptors(p);
                eval(&DescriptorPairs { a: &a, b: &b, cells_a: &inst.cells, cells_b: &inst.cells }).map(|o| o.value)
            };
            s.add(gradcheck(name, f, &flatten(&inst.a, &inst.b), &flatten(&o.grad_a, &o.grad_b), &cfg));
        }
        out.push(s);
    }
    for (salt, kind, name) in [
        (42u64, DescriptorLoss::HardestContrastive, "detection-weighted contrastive"),
        (43, DescriptorLoss::Circle, "detection-weighted circle"),
    ] {
        let mut rng = opts.rng(salt);
        let mut s = GradSummary::new(name);
        while s.points < opts.grad_points {
            let inst = loss_instance(&mut rng);
            let pairs = DescriptorPairs { a: &inst.a, b: &inst.b, cells_a: &inst.cells, cells_b: &inst.cells };
            let Ok(j) = joint_loss(&inst.scores_a, &inst.scores_b, &pairs, &params, kind) else {
                s.resampled += 1;
                continue;
            };
            if j.non_smooth || j.degenerate {
                s.resampled += 1;
                continue;
            }
            let n = LOSS_PAIRS;
            let f = |p: &[f64]| -> Result<f64> {
                let (a, b) = split_descriptors(&p[2 * n..]);
                let pairs = DescriptorPairs { a: &a, b: &b, cells_a: &inst.cells, cells_b: &inst.cells };
                joint_loss(&p[..n], &p[n..2 * n], &pairs, &params, kind).map(|j| j.value)
            };
            let mut x = inst.scores_a.clone();
            x.extend(&inst.scores_b);
            x.extend(flatten(&inst.a, &inst.b));
            let mut grad = j.grad_scores_a.clone();
            grad.extend(&j.grad_scores_b);
            grad.extend(flatten(&j.grad_a, &j.grad_b));
            s.add(gradcheck(name, f, &x, &grad, &cfg));
        }
        out.push(s);
    }
    out
}

fn gradcheck_losses(opts: &SelftestOptions) -> Outcome {
    summaries_outcome(loss_summaries(opts))
}

fn softplus_naive(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn nb_taps(h: usize, w: usize, i: usize, j: usize, d: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for dy in [-1isize, 0, 1] {
        for dx in [-1isize, 0, 1] {
            let y = (i as isize + dy * d as isize).clamp(0, h as isize - 1) as usize;
            let x = (j as isize + dx * d as isize).clamp(0, w as isize - 1) as usize;
            out.push((y, x));
        }
    }
    out
}

fn scoring_oracles(opts: &SelftestOptions) -> Outcome {
    let mut rng = opts.rng(50);
    let mut worst = 0.0f64;
    let mut diff = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for _ in 0..20 {
        let y = random_tensor(&mut rng, 8, 8, 4).map(|v| 3.0 * v);
        for d in 1..=3 {
            let (alpha, beta) = peakiness_scores(&y, d);
            let s = combine_scores(&alpha, &beta).map_err(err_str)?;
            let local = d2_local_score(&y, d);
            let (ratio, _) = d2_channel_score(&y);
            let d2 = d2_score(&y, d);
            for i in 0..8 {
                for j in 0..8 {
                    let taps = nb_taps(8, 8, i, j, d);
                    let mut best_p = f64::NEG_INFINITY;
                    let mut best_d = f64::NEG_INFINITY;
                    let cmean: f64 = (0..4).map(|c| y.get(i, j, c)).sum::<f64>() / 4.0;
                    let cmax = (0..4).map(|c| y.get(i, j, c)).fold(f64::NEG_INFINITY, f64::max);
                    for c in 0..4 {
                        let v = y.get(i, j, c);
                        let nmean: f64 = taps.iter().map(|&(a, b)| y.get(a, b, c)).sum::<f64>() / 9.0;
                        let a_ref = softplus_naive(v - nmean);
                        let b_ref = softplus_naive(v - cmean);
                        diff(alpha.get(i, j, c), a_ref);
                        diff(beta.get(i, j, c), b_ref);
                        best_p = best_p.max(a_ref * b_ref);
                        let denom: f64 = taps.iter().map(|&(a, b)| y.get(a, b, c).exp()).sum();
                        let l_ref = v.exp() / denom;
                        let r_ref = if cmax > 0.0 { v / cmax } else { 0.0 };
                        diff(local.get(i, j, c), l_ref);
                        diff(ratio.get(i, j, c), r_ref);
                        best_d = best_d.max(l_ref * r_ref);
                    }
                    diff(s.get(i, j, 0), best_p);
                    diff(d2.get(i, j, 0), best_d);
                }
            }
        }
        let maps: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&mut rng, 8, 8, 1)).collect();
        let fused = muldet_fuse(&maps, &[1.0, 2.0, 3.0]).map_err(err_str)?;
        for p in 0..64 {
            let r = (maps[0].data()[p] + 2.0 * maps[1].data()[p] + 3.0 * maps[2].data()[p]) / 6.0;
            diff(fused.data()[p], r);
        }
    }
    ensure(worst < 1e-6, || format!("max oracle deviation {worst:e}"))?;
    let c = Tensor::<f64>::filled(8, 8, 4, 0.37);
    let (a, b) = peakiness_scores(&c, 1);
    let s = combine_scores(&a, &b).map_err(err_str)?;
    let fixed = a.data().iter().chain(b.data()).map(|v| (v - LN_2).abs()).fold(0.0, f64::max);
    let sq = s.data().iter().map(|v| (v - LN_2 * LN_2).abs()).fold(0.0, f64::max);
    ensure(fixed < 1e-6 && sq < 1e-6, || format!("constant input: α/β off by {fixed:e}, s off by {sq:e}"))?;
    let keep = DetectorConfig::default().score_min as f64;
    ensure(LN_2 * LN_2 < keep, || "uniform score reaches the keep threshold".into())?;
    Ok(format!("max oracle deviation {worst:.1e}; constant input gives ln 2 and {:.4}", LN_2 * LN_2))
}

fn backbone_shift(opts: &SelftestOptions) -> Outcome {
    let net = Backbone::seeded(BackboneConfig::new(DcnVariant::Deform(DeformKind::FreeForm)), opts.seed).map_err(err_str)?;
    let base = standardize_tensor(&textured_image(opts.seed, 96, 100));
    let a = base.crop(0, 4, 96, 96);
    let b = base.crop(0, 0, 96, 96);
    let (fa, fb) = (net.forward(&a).map_err(err_str)?, net.forward(&b).map_err(err_str)?);
    let (ta, tb) = (fa.conv8(), fb.conv8());
    let mut worst = 0.0f32;
    for y in 8..ta.height() - 8 {
        for x in 8..ta.width() - 8 {
            for c in 0..ta.channels() {
                worst = worst.max((ta.get(y, x, c) - tb.get(y, x + 1, c)).abs());
            }
        }
    }
    ensure(worst < 1e-4, || format!("interior deviation {worst:e}"))?;
    Ok(format!("interior deviation {worst:.1e}"))
}

fn default_extractor(seed: u64, detector: DetectorConfig) -> Result<Extractor> {
    let net = Backbone::seeded(BackboneConfig::new(DcnVariant::Deform(DeformKind::FreeForm)), seed)?;
    Ok(Extractor::new(net, detector))
}

fn detection_covariance(opts: &SelftestOptions) -> Outcome {
    let (size, shift, margin) = (160usize, 8usize, 32.0f32);
    let ex = default_extractor(opts.seed, DetectorConfig { top_k: None, ..DetectorConfig::default() }).map_err(err_str)?;
    // one standardization for both crops, so they see identical values
    let base = standardize_tensor(&textured_image(opts.seed.wrapping_add(1), size + shift, size + shift));
    let a = base.crop(shift, shift, size, size);
    let b = base.crop(0, 0, size, size);
    let fa = ex.extract_standardized(&a).map_err(err_str)?;
    let fb = ex.extract_standardized(&b).map_err(err_str)?;
    let hi = size as f32 - margin - shift as f32;
    let interior: Vec<&Keypoint> = fa
        .keypoints
        .iter()
        .filter(|k| k.x >= margin && k.y >= margin && k.x <= hi && k.y <= hi)
        .collect();
    ensure(interior.len() >= 10, || format!("only {} interior keypoints", interior.len()))?;
    let moved = interior
        .iter()
        .filter(|k| {
            fb.keypoints
                .iter()
                .any(|q| (q.x - k.x - shift as f32).abs() <= 0.25 && (q.y - k.y - shift as f32).abs() <= 0.25)
        })
        .count();
    let share = moved as f64 / interior.len() as f64;
    ensure(share >= 0.95, || format!("{moved}/{} interior keypoints moved by (8, 8)", interior.len()))?;
    Ok(format!("{moved}/{} interior keypoints moved by (8, 8) ± 0.25", interior.len()))
}

fn edge_rule(_: &SelftestOptions) -> Outcome {
    let r = DetectorConfig::default().edge_threshold;
    ensure(r == 10.0, || format!("default edge threshold {r}"))?;
    ensure(edge_keep(-2.0, -2.0, 0.0, r), || "diag(-2, -2) rejected".into())?;
    ensure(!edge_keep(-10.0, -0.1, 0.0, r), || "diag(-10, -0.1) kept".into())?;
    Ok(format!("bound (r+1)^2/r = {:.1}", (r + 1.0) * (r + 1.0) / r))
}

fn keypoints<R: Rng>(rng: &mut R, n: usize, w: f64, h: f64) -> Vec<Keypoint> {
    (0..n)
        .map(|_| Keypoint {
            x: rng.random_range(0.0..w) as f32,
            y: rng.random_range(0.0..h) as f32,
            score: 1.0,
            level_hint: 0,
            pyramid_scale: 1.0,
        })
        .collect()
}

fn features(kps: Vec<Keypoint>, desc: &[Vec<f32>]) -> Result<FeatureSet> {
    let mut fs = FeatureSet::new(desc.first().map_or(1, Vec::len));
    for (k, d) in kps.into_iter().zip(desc) {
        fs.push(k, d)?;
    }
    Ok(fs)
}

fn metrics_closed_loop(opts: &SelftestOptions) -> Outcome {
    let seq = synthetic_sequence(opts.seed, (240, 180), 150, 64).map_err(err_str)?;
    for (k, h) in seq.homographies.iter().enumerate() {
        let gt = HomographyGt::new(*h, (240, 180), (240, 180)).map_err(err_str)?;
        let r = evaluate_homography_pair("synthetic", k + 2, &seq.features[0], &seq.features[k + 1], &gt, &MatchParams::default())
            .map_err(err_str)?;
        ensure(
            r.repeatability == Some(100.0) && r.matching_score == Some(100.0) && r.mma[2] == Some(100.0),
            || format!("pair 1-{}: rep {:?}, ms {:?}, mma@3 {:?}", k + 2, r.repeatability, r.matching_score, r.mma[2]),
        )?;
    }
    let mut rng = opts.rng(60);
    let (w, h) = (120.0, 100.0);
    for trial in 0..20 {
        let na = rng.random_range(1..200);
        let nb: usize = rng.random_range(1..200);
        let gt = HomographyGt::new(random_homography(opts.seed + trial, (120, 100), 12.0), (120, 100), (120, 100))
            .map_err(err_str)?;
        let ka = keypoints(&mut rng, na, w, h);
        // B holds noisy warps of some A keypoints plus clutter
        let mut kb = Vec::new();
        for k in &ka {
            let Some(p) = warp_homography(&gt.h, k.x as f64, k.y as f64) else { continue };
            if inside(p, (120, 100)) && rng.random_bool(0.7) {
                kb.push(Keypoint {
                    x: (p.0 + rng.random_range(-4.0..4.0)) as f32,
                    y: (p.1 + rng.random_range(-4.0..4.0)) as f32,
                    score: 1.0,
                    level_hint: 0,
                    pyramid_scale: 1.0,
                });
            }
        }
        kb.extend(keypoints(&mut rng, nb.saturating_sub(kb.len()), w, h));
        kb.truncate(200);
        let da = random_descriptors(&mut rng, ka.len(), 16);
        let db = random_descriptors(&mut rng, kb.len(), 16);
        let fa = features(ka.clone(), &da).map_err(err_str)?;
        let fb = features(kb.clone(), &db).map_err(err_str)?;
        let ratio = rng.random_range(0.7..1.0f32);
        let m = match_descriptors(&fa, &fb, ratio, true).map_err(err_str)?;
        let oracle = brute_force_matches(&da, &db, ratio);
        let got: Vec<(usize, usize)> = m.matches.iter().map(|x| (x.a, x.b)).collect();
        ensure(got == oracle, || format!("trial {trial}: matches differ from brute force"))?;

        let (rep, ms, curve) = brute_force_metrics(&ka, &kb, &got, &gt);
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs() < 1e-9,
            (None, None) => true,
            _ => false,
        };
        ensure(close(repeatability(&ka, &kb, &gt, 3.0), rep), || format!("trial {trial}: repeatability"))?;
        ensure(close(matching_score(&m, &ka, &kb, &gt, 3.0), ms), || format!("trial {trial}: matching score"))?;
        let c = mma_curve(&m, &ka, &kb, &gt, &MMA_THRESHOLDS);
        for (t, (a, b)) in c.iter().zip(&curve).enumerate() {
            ensure(close(*a, *b), || format!("trial {trial}: MMA@{}", t + 1))?;
        }
        let vals: Vec<f64> = c.iter().flatten().copied().collect();
        ensure(vals.windows(2).all(|p| p[0] <= p[1]), || format!("trial {trial}: MMA curve not monotone"))?;
        ensure(
            mma(&m, &ka, &kb, &gt, 3.0) == c[2] && correct_matches(&m, &ka, &kb, &gt, 10.0) <= m.len(),
            || format!("trial {trial}: curve disagrees with MMA"),
        )?;
        let _ = overlap(&ka, &kb, &gt, 3.0);
    }
    Ok("closed loop at 100%; 20 random instances equal brute force; curves monotone".into())
}

fn brute_force_matches(da: &[Vec<f32>], db: &[Vec<f32>], ratio: f32) -> Vec<(usize, usize)> {
    let dist = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f32>().sqrt();
    let nn = |q: &[f32], set: &[Vec<f32>]| -> Option<(usize, f32, Option<f32>)> {
        let mut ds: Vec<(f32, usize)> = set.iter().enumerate().map(|(i, v)| (dist(q, v), i)).collect();
        ds.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ds.first().map(|f| (f.1, f.0, ds.get(1).map(|s| s.0)))
    };
    let mut out = Vec::new();
    for (i, q) in da.iter().enumerate() {
        let Some((j, d1, d2)) = nn(q, db) else { continue };
        if d2.is_some_and(|d2| d1 >= ratio * d2) {
            continue;
        }
        if nn(&db[j], da).map(|x| x.0) == Some(i) {
            out.push((i, j));
        }
    }
    out
}

fn brute_force_metrics(
    ka: &[Keypoint],
    kb: &[Keypoint],
    matches: &[(usize, usize)],
    gt: &HomographyGt,
) -> (Option<f64>, Option<f64>, Vec<Option<f64>>) {
    let warp = |h: &Matrix3<f64>, k: &Keypoint| warp_homography(h, k.x as f64, k.y as f64);
    let d = |p: (f64, f64), k: &Keypoint| ((p.0 - k.x as f64).powi(2) + (p.1 - k.y as f64).powi(2)).sqrt();
    let (mut shared_a, mut shared_b, mut cov_a, mut cov_b) = (0, 0, 0, 0);
    for k in ka {
        if let Some(p) = warp(&gt.h, k).filter(|p| inside(*p, gt.size_b)) {
            shared_a += 1;
            if kb.iter().any(|q| d(p, q) <= 3.0) {
                cov_a += 1;
            }
        }
    }
    for k in kb {
        if let Some(p) = warp(&gt.h_inv, k).filter(|p| inside(*p, gt.size_a)) {
            shared_b += 1;
            if ka.iter().any(|q| d(p, q) <= 3.0) {
                cov_b += 1;
            }
        }
    }
    let den = shared_a.min(shared_b);
    let pct = |n: usize, d: usize| (d > 0).then(|| 100.0 * n as f64 / d as f64);
    let correct = |t: f64| {
        matches
            .iter()
            .filter(|(i, j)| warp(&gt.h, &ka[*i]).is_some_and(|p| d(p, &kb[*j]) < t))
            .count()
    };
    let curve = MMA_THRESHOLDS.iter().map(|t| pct(correct(*t), matches.len())).collect();
    (pct(cov_a.min(cov_b), den), pct(correct(3.0), den), curve)
}

fn epipolar_loop(opts: &SelftestOptions) -> Outcome {
    let scene = opts.scene;
    scene.validate().map_err(err_str)?;
    let mut worst_sed = 0.0f64;
    let mut errors = Vec::new();
    for k in 0..5u64 {
        let pair = random_pose_pair_with(opts.seed.wrapping_add(k), 200, &scene);
        let sed = mean_normalized_sed(&pair.f, &pair.points, pair.size_a, pair.size_b)
            .ok_or("degenerate epipolar lines")?;
        worst_sed = worst_sed.max(sed);
        let (a, b): (Vec<Point>, Vec<Point>) = pair.points.iter().copied().unzip();
        let cfg = RansacConfig { seed: opts.seed, ..RansacConfig::default() };
        let est = estimate_fundamental_ransac(&a, &b, pair.size_a, pair.size_b, &cfg).map_err(err_str)?;
        let virt = virtual_from_fundamental(&pair.f, pair.size_a, pair.size_b, 300, opts.seed);
        errors.push(mean_normalized_sed(&est.f, &virt, pair.size_a, pair.size_b));
    }
    ensure(worst_sed < 1e-10, || format!("mean SED under GT {worst_sed:e}"))?;
    let recall = pose_recall(&errors, 0.05);
    ensure(recall == 100.0, || format!("pose recall {recall}%"))?;

    let pair = random_pose_pair_with(opts.seed.wrapping_add(100), 100, &scene);
    let mut rng = opts.rng(70);
    let (mut a, mut b): (Vec<Point>, Vec<Point>) = pair.points.iter().copied().unzip();
    for _ in 0..150 {
        a.push((rng.random_range(0.0..639.0), rng.random_range(0.0..479.0)));
        b.push((rng.random_range(0.0..639.0), rng.random_range(0.0..479.0)));
    }
    let cfg = RansacConfig { seed: opts.seed, ..RansacConfig::default() };
    let est = estimate_fundamental_ransac(&a, &b, pair.size_a, pair.size_b, &cfg).map_err(err_str)?;
    let recovered = est.inliers[..100].iter().filter(|v| **v).count();
    ensure(recovered >= 95, || format!("RANSAC recovered {recovered}/100 true inliers"))?;
    Ok(format!("mean SED {worst_sed:.1e}; recall {recall}%; RANSAC recovered {recovered}/100 at 60% outliers"))
}

fn loss_fixed_points(_: &SelftestOptions) -> Outcome {
    let p = LossParams::default();
    ensure(
        p.pos_margin == 0.2 && p.neg_margin == 1.0 && p.circle_margin == 0.1 && p.circle_gamma == 512.0 && p.safe_radius == 3.0,
        || format!("defaults {p:?}"),
    )?;
    ensure(contrastive_term(0.1, Some(1.2), &p) == 0.0, || "inactive hinges give nonzero loss".into())?;
    let v = contrastive_term(0.5, Some(0.4), &p);
    ensure((v - 0.9).abs() < 1e-12, || format!("0.5/0.4 case gives {v}"))?;
    let (c, _, _) = circle_term(1.0 - p.circle_margin, &[p.circle_margin], &p);
    ensure((c - LN_2).abs() < 1e-9, || format!("circle boundary gives {c}"))?;
    Ok(format!("0.5/0.4 → {v}; circle boundary → {c:.12}"))
}

fn pyramid_bookkeeping(_: &SelftestOptions) -> Outcome {
    let cfg = PyramidConfig::default();
    let dims = pyramid_dims(512, 512, &cfg);
    ensure(dims.len() == 5, || format!("{} levels", dims.len()))?;
    let mut worst = 0.0f64;
    for (k, &(_, _, scale)) in dims.iter().enumerate() {
        let closed = SQRT_2.powi(-(k as i32));
        worst = worst.max((scale - closed).abs());
        for p in [(0.0, 0.0), (17.25, 3.5), (127.0, 90.75)] {
            let (x, y) = level_to_image(p, scale);
            worst = worst.max((x - p.0 * SQRT_2.powi(k as i32)).abs()).max((y - p.1 * SQRT_2.powi(k as i32)).abs());
        }
    }
    // through the detection path, where keypoints are stored in f32
    let img = Tensor::<f32>::zeros(512, 512, 1);
    let det = DetectorConfig::default();
    let found = pyramid_detect(&img, &det, &cfg, |_, k| {
        Ok(vec![(
            Keypoint { x: 20.0 + 10.0 * k as f32, y: 30.5, score: 0.9, level_hint: 0, pyramid_scale: 1.0 },
            k,
        )])
    })
    .map_err(err_str)?;
    for (kp, k) in &found {
        let closed = ((20.0 + 10.0 * *k as f64) * SQRT_2.powi(*k as i32), 30.5 * SQRT_2.powi(*k as i32));
        let rel = ((kp.x as f64 - closed.0).abs() / closed.0).max((kp.y as f64 - closed.1).abs() / closed.1);
        ensure(rel < 1e-6, || format!("level {k}: keypoint off by relative {rel:e}"))?;
    }
    ensure(worst < 1e-6, || format!("mapping error {worst:e}"))?;
    Ok(format!("5 levels {:?}; mapping error {worst:.1e}", dims.iter().map(|d| d.0).collect::<Vec<_>>()))
}

fn extraction_time(opts: &SelftestOptions) -> Outcome {
    let detector = DetectorConfig { fusion: Fusion::Single, top_k: Some(500), ..DetectorConfig::default() };
    let ex = default_extractor(opts.seed, detector).map_err(err_str)?;
    let img = textured_image(opts.seed, 480, 480);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let set = pool.install(|| ex.extract_gray(&img)).map_err(err_str)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(set.len() <= 500, || format!("{} keypoints", set.len()))?;
    ensure(secs < 10.0, || format!("took {secs:.2} s"))?;
    Ok(format!("{} keypoints in {secs:.2} s on one thread", set.len()))
}

/// Jacobian of the DLT op at a point, with the configured fault applied.
pub fn dlt_jacobian_with_fault(params: &[f64], fault: Fault) -> Result<DMatrix<f64>> {
    let mut j = jacobian_analytic(&GeomOp::Dlt, params)?;
    if let Fault::DltJacobian(eps) = fault {
        j[(0, 0)] += eps;
    }
    Ok(j)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_selects_by_module() {
        let dcn: Vec<&str> = registry().iter().filter(|c| c.matches("dcn")).map(|c| c.id).collect();
        assert_eq!(dcn, ["dcn-reduction", "dcn-field-gradient", "gradcheck-offsets"]);
        let covered: std::collections::BTreeSet<u8> = registry().iter().filter_map(|c| c.criterion).collect();
        assert_eq!(covered.into_iter().collect::<Vec<_>>(), (1..=11).collect::<Vec<_>>());
    }

    #[test]
    fn dlt_fault_is_caught() {
        let opts = SelftestOptions { fault: Fault::DltJacobian(1e-2), grad_points: 5, ..SelftestOptions::new(0) };
        let out = gradcheck_geometry(&opts);
        assert!(out.is_err());
        let clean = SelftestOptions { grad_points: 5, ..SelftestOptions::new(0) };
        assert!(gradcheck_geometry(&clean).is_ok());
    }

    #[test]
    fn loss_gradients_pass_across_seeds() {
        for seed in 1..4 {
            let opts = SelftestOptions { grad_points: 30, ..SelftestOptions::new(seed) };
            for s in loss_summaries(&opts) {
                assert!(s.passed(), "seed {seed}: {s}");
            }
        }
    }
}
