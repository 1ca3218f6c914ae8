//! `dcnfeat` command-line tool: extraction, matching, evaluation and self-tests.
//!
//! Exit codes: 0 success, 1 failed checks, 2 bad arguments, 3 I/O,
//! 4 malformed or inconsistent data, 5 numeric failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dcnfeat::backbone::{Backbone, BackboneConfig, DcnVariant};
use dcnfeat::detector::{DetectorConfig, Fusion, Scoring};
use dcnfeat::eval::{
    evaluate_hpatches, evaluate_pair_list, match_descriptors, sidecar_features, EpipolarParams, MatchParams,
    RansacConfig,
};
use dcnfeat::features::FeatureSet;
use dcnfeat::image::load_image;
use dcnfeat::pipeline::Extractor;
use dcnfeat::selftest::{gradient_suite, run_checks, Fault, SelftestOptions};
use dcnfeat::synth::SceneConfig;
use dcnfeat::weights::{read_weights, seeded_random_weights, write_weights};
use dcnfeat::Error;

#[derive(Parser, Debug)]
#[command(name = "dcnfeat", version, about = "Deformable-convolution local features")]
struct Cli {
    /// Worker threads for pair-level parallelism (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Log more (-v, -vv) to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Detect and describe keypoints in one image.
    Extract(ExtractArgs),
    /// Match two feature files and print the matches as TSV.
    Match(MatchArgs),
    /// Homography benchmark over sequence directories.
    EvalHpatches(EvalHpatchesArgs),
    /// Relative-pose benchmark over a pair list.
    EvalEpipolar(EvalEpipolarArgs),
    /// Finite-difference checks of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Run the invariant and oracle checks of every module.
    Selftest(SelftestArgs),
    /// Write a seeded random weight file.
    InitWeights(InitWeightsArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Weight file; seeded random weights when absent.
    #[arg(long)]
    weights: Option<PathBuf>,

    /// Seed of the random weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// free | similarity | affine | homography | none
    #[arg(long, default_value = "free")]
    dcn: DcnVariant,
}

#[derive(Args, Debug, Clone)]
struct DetectArgs {
    /// peakiness | d2net
    #[arg(long, default_value = "peakiness")]
    scoring: Scoring,

    /// multilevel | pyramid | in-network | single
    #[arg(long, default_value = "multilevel")]
    fusion: Fusion,

    /// NMS window side.
    #[arg(long, default_value_t = 3)]
    nms: usize,

    #[arg(long, default_value_t = 10.0)]
    edge_threshold: f64,

    #[arg(long, default_value_t = 0.5)]
    score_min: f32,

    /// Keep at most this many keypoints, highest score first.
    #[arg(long)]
    top_k: Option<usize>,

    /// Border (px) in which no keypoint is selected.
    #[arg(long, default_value_t = 8)]
    border: usize,
}

#[derive(Args, Debug, Clone)]
struct MatchFlags {
    #[arg(long, default_value_t = 0.8)]
    ratio: f32,

    /// Drop the mutual nearest-neighbor check.
    #[arg(long)]
    no_mutual: bool,
}

#[derive(Args, Debug, Clone)]
struct FeatureSource {
    /// Read features stored next to each image as `<image>.<EXT>` instead of extracting.
    #[arg(long, value_name = "EXT")]
    features_ext: Option<String>,

    #[command(flatten)]
    model: ModelArgs,

    #[command(flatten)]
    detect: DetectArgs,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    image: PathBuf,

    /// Output path; `<image>.aslf` by default.
    #[arg(long, short)]
    output: Option<PathBuf>,

    /// Write the binary format.
    #[arg(long)]
    binary: bool,

    #[command(flatten)]
    model: ModelArgs,

    #[command(flatten)]
    detect: DetectArgs,
}

#[derive(Args, Debug)]
struct MatchArgs {
    a: PathBuf,
    b: PathBuf,

    #[command(flatten)]
    flags: MatchFlags,
}

#[derive(Args, Debug)]
struct EvalHpatchesArgs {
    /// Directory of sequences, each holding images 1..6 and H_1_k files.
    #[arg(long)]
    root: PathBuf,

    /// Per-pair TSV output.
    #[arg(long)]
    tsv: Option<PathBuf>,

    #[command(flatten)]
    source: FeatureSource,

    #[command(flatten)]
    matching: MatchFlags,
}

#[derive(Args, Debug)]
struct EvalEpipolarArgs {
    /// Pair list: `image_a image_b F_file` per line.
    #[arg(long)]
    pairs: PathBuf,

    #[arg(long)]
    tsv: Option<PathBuf>,

    #[command(flatten)]
    source: FeatureSource,

    #[command(flatten)]
    matching: MatchFlags,

    #[arg(long, default_value_t = 2000)]
    ransac_iters: usize,

    /// Inlier threshold on the normalized symmetric epipolar distance.
    #[arg(long, default_value_t = 1e-4)]
    ransac_threshold: f64,

    #[arg(long, default_value_t = 0)]
    ransac_seed: u64,

    #[arg(long, default_value_t = 0.05)]
    recall_threshold: f64,
}

#[derive(Args, Debug, Clone)]
struct SceneArgs {
    /// Seed of every random draw in the checks.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Largest rotation-vector component of synthetic poses, radians.
    #[arg(long, default_value_t = 0.1)]
    max_rotation: f64,

    #[arg(long, default_value_t = 1.0)]
    baseline: f64,

    #[arg(long, default_value_t = 4.0)]
    depth_min: f64,

    #[arg(long, default_value_t = 12.0)]
    depth_max: f64,

    /// Random points per gradient-checked operation.
    #[arg(long, default_value_t = 100)]
    points: usize,

    /// Test hook: add this value to one analytic DLT Jacobian entry.
    #[arg(long, hide = true)]
    inject_fault: Option<f64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Run only checks whose module or id contains this string.
    #[arg(long)]
    filter: Option<String>,

    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args, Debug)]
struct InitWeightsArgs {
    #[arg(long, short)]
    output: PathBuf,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long, default_value = "free")]
    dcn: DcnVariant,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn checks(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) => 3,
            Error::Format(_) | Error::Validation(_) | Error::Shape(_) => 4,
            Error::Singular(_) | Error::Numeric(_) => 5,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let outcome = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::usage(e.to_string()))
        .and_then(|()| run(cli.command));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Extract(a) => cmd_extract(a),
        Command::Match(a) => cmd_match(a),
        Command::EvalHpatches(a) => cmd_eval_hpatches(a),
        Command::EvalEpipolar(a) => cmd_eval_epipolar(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Selftest(a) => cmd_selftest(a),
        Command::InitWeights(a) => cmd_init_weights(a),
    }
}

/// Flag validation errors are usage errors, not data errors.
fn usage_check(r: dcnfeat::Result<()>) -> CliResult {
    r.map_err(|e| Failure::usage(e.to_string()))
}

fn detector_config(d: &DetectArgs) -> CliResult<DetectorConfig> {
    let cfg = DetectorConfig {
        scoring: d.scoring,
        fusion: d.fusion,
        nms_size: d.nms,
        edge_threshold: d.edge_threshold,
        score_min: d.score_min,
        top_k: d.top_k,
        border: d.border,
        ..DetectorConfig::default()
    };
    usage_check(cfg.validate())?;
    Ok(cfg)
}

fn build_extractor(model: &ModelArgs, detect: &DetectArgs) -> CliResult<Extractor> {
    let detector = detector_config(detect)?;
    let cfg = BackboneConfig::new(model.dcn);
    let backbone = match &model.weights {
        Some(path) => Backbone::from_weights(cfg, &read_weights(path)?)?,
        None => Backbone::seeded(cfg, model.seed)?,
    };
    Ok(Extractor::new(backbone, detector))
}

fn extract_file(ex: &Extractor, path: &Path) -> dcnfeat::Result<FeatureSet> {
    ex.extract(&load_image(path)?)
}

fn cmd_extract(a: ExtractArgs) -> CliResult {
    let ex = build_extractor(&a.model, &a.detect)?;
    let start = Instant::now();
    let set = extract_file(&ex, &a.image)?;
    log::info!("{} keypoints in {:.2} s", set.len(), start.elapsed().as_secs_f64());
    let out = a.output.unwrap_or_else(|| {
        let mut name = a.image.into_os_string();
        name.push(".aslf");
        PathBuf::from(name)
    });
    set.save(&out, a.binary)?;
    println!("{}\t{}", out.display(), set.len());
    Ok(())
}

fn match_params(m: &MatchFlags) -> CliResult<MatchParams> {
    if !(m.ratio > 0.0 && m.ratio <= 1.0) {
        return Err(Failure::usage(format!("ratio must lie in (0, 1], got {}", m.ratio)));
    }
    Ok(MatchParams { ratio: m.ratio, mutual: !m.no_mutual })
}

fn cmd_match(a: MatchArgs) -> CliResult {
    let params = match_params(&a.flags)?;
    let fa = FeatureSet::load(&a.a)?;
    let fb = FeatureSet::load(&a.b)?;
    let m = match_descriptors(&fa, &fb, params.ratio, params.mutual)?;
    let mut out = String::from("a\tb\tdistance\n");
    for x in &m.matches {
        let _ = writeln!(out, "{}\t{}\t{:.6}", x.a, x.b, x.distance);
    }
    print!("{out}");
    eprintln!(
        "candidates {}, after ratio {}, after mutual {}, matches {}",
        m.candidates,
        m.after_ratio,
        m.after_mutual,
        m.len()
    );
    Ok(())
}

/// Either loads sidecar files or extracts on the fly.
fn with_features<T>(
    src: &FeatureSource,
    f: impl FnOnce(&(dyn Fn(&Path) -> dcnfeat::Result<FeatureSet> + Sync)) -> dcnfeat::Result<T>,
) -> CliResult<T> {
    match &src.features_ext {
        Some(ext) => Ok(f(&sidecar_features(ext))?),
        None => {
            let ex = build_extractor(&src.model, &src.detect)?;
            Ok(f(&|p: &Path| extract_file(&ex, p))?)
        }
    }
}

fn emit(table: String, tsv: String, path: Option<&Path>) -> CliResult {
    if let Some(p) = path {
        std::fs::write(p, tsv).map_err(Error::from)?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_eval_hpatches(a: EvalHpatchesArgs) -> CliResult {
    let params = match_params(&a.matching)?;
    let report = with_features(&a.source, |f| evaluate_hpatches(&a.root, f, &params))?;
    emit(report.to_table(), report.to_tsv(), a.tsv.as_deref())
}

fn cmd_eval_epipolar(a: EvalEpipolarArgs) -> CliResult {
    let matching = match_params(&a.matching)?;
    if a.ransac_iters == 0 || !(a.ransac_threshold > 0.0) || !(a.recall_threshold > 0.0) {
        return Err(Failure::usage("RANSAC iterations and thresholds must be positive"));
    }
    let params = EpipolarParams {
        ransac: RansacConfig { iterations: a.ransac_iters, threshold: a.ransac_threshold, seed: a.ransac_seed },
        recall_threshold: a.recall_threshold,
        ..EpipolarParams::default()
    };
    let report = with_features(&a.source, |f| evaluate_pair_list(&a.pairs, f, &matching, &params))?;
    emit(report.to_table(), report.to_tsv(), a.tsv.as_deref())
}

fn selftest_options(s: &SceneArgs) -> CliResult<SelftestOptions> {
    let scene = SceneConfig {
        max_rotation: s.max_rotation,
        baseline: s.baseline,
        depth_min: s.depth_min,
        depth_max: s.depth_max,
    };
    usage_check(scene.validate())?;
    if s.points == 0 {
        return Err(Failure::usage("need at least one point per gradient check"));
    }
    Ok(SelftestOptions {
        seed: s.seed,
        scene,
        fault: s.inject_fault.map_or(Fault::None, Fault::DltJacobian),
        grad_points: s.points,
    })
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    let opts = selftest_options(&a.scene)?;
    let start = Instant::now();
    let suite = gradient_suite(&opts);
    let mut failed = 0;
    for s in &suite {
        println!("{} {s}", if s.passed() { "PASS" } else { "FAIL" });
        failed += usize::from(!s.passed());
    }
    eprintln!("{} operations, {failed} failed, {:.2} s", suite.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure::checks(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> CliResult {
    let opts = selftest_options(&a.scene)?;
    let results = run_checks(a.filter.as_deref(), &opts);
    if results.is_empty() {
        return Err(Failure::usage(format!("no check matches {:?}", a.filter.unwrap_or_default())));
    }
    let mut failed = 0;
    for r in &results {
        let crit = r.criterion.map_or_else(|| "-".to_string(), |c| c.to_string());
        println!(
            "{} {:<22} {:<16} criterion {:<2} {:>7.2} s",
            if r.passed { "PASS" } else { "FAIL" },
            r.id,
            r.module,
            crit,
            r.elapsed.as_secs_f64()
        );
        for line in r.detail.lines() {
            println!("    {line}");
        }
        failed += usize::from(!r.passed);
    }
    eprintln!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        return Err(Failure::checks(format!("{failed} checks failed")));
    }
    Ok(())
}

fn cmd_init_weights(a: InitWeightsArgs) -> CliResult {
    let cfg = BackboneConfig::new(a.dcn);
    usage_check(cfg.validate())?;
    let store = seeded_random_weights(a.seed, &cfg.tensor_specs());
    write_weights(&store, &a.output)?;
    println!("{}\t{} tensors", a.output.display(), store.entries().len());
    Ok(())
}
