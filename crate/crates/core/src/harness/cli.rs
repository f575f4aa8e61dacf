//! `wakeda` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 malformed or inconsistent input,
//! 3 internal invariant violation.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::formats;
use crate::geom::{iou, Detection};
use crate::membank::{calibrate, global_threshold, prescreen, CalibTrace, MemoryBank, REPLACE_IOU};
use crate::mixer::{dynamic_alpha, merge_labels, mix_images, quadrant_confidences, select_region, MixRecord};
use crate::simfilter::{fit_gmm, fit_kmeans, fit_prototype, select_similar, Scorer};
use crate::spectral::{cscl, cycle_l1, polar_profiles, spl, SpectralProfile};

use super::config::{PipelineConfig, ScorerKind};
use super::eval::{coco_thresholds, eval_detections};
use super::simulate::simulate_threshold;
use super::synth::synth_scene;

#[derive(Debug, Parser)]
#[command(name = "wakeda", version, about = "Cross-domain wake detection pipeline tools")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config with flat dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rank source embeddings by similarity to the target distribution.
    Filter(FilterArgs),
    /// Calibrate pseudo-labels against the memory bank.
    Calibrate(CalibrateArgs),
    /// Paste the most confident target quadrant into a source image.
    Mix(MixArgs),
    /// Evaluate detections against ground truth.
    Eval(EvalArgs),
    /// Spectral profiles and losses for an image pair.
    Spectral(SpectralArgs),
    /// Write seeded synthetic scenes.
    Synth(SynthArgs),
    /// Global threshold trajectory for a score stream.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct FilterArgs {
    /// Target-domain embeddings (EMB1).
    #[arg(long)]
    target: PathBuf,
    /// Source-domain embeddings (EMB1).
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    eta: Option<f64>,
    /// l2, kmeans or gmm.
    #[arg(long)]
    scorer: Option<ScorerKind>,
    /// Selection JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Candidate detections (JSONL) on the supplied image.
    #[arg(long)]
    dets: PathBuf,
    /// Feature map [C, Hf, Wf] (TEN1).
    #[arg(long)]
    featmap: PathBuf,
    /// Image [H, W] or [C, H, W] (TEN1).
    #[arg(long)]
    image: PathBuf,
    /// Existing bank (MBK1); an empty bank when omitted.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    bank_out: Option<PathBuf>,
    /// Current global threshold; defaults to tau0.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0)]
    epoch: u32,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    tau0: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta_adj: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Per-detection trace JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Accepted detections (JSONL); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MixArgs {
    #[arg(long)]
    source_image: PathBuf,
    #[arg(long)]
    target_image: PathBuf,
    /// Source-domain predictions (JSONL).
    #[arg(long)]
    source_labels: PathBuf,
    /// Target-domain pseudo-labels (JSONL).
    #[arg(long)]
    target_labels: PathBuf,
    /// Mixed image (TEN1).
    #[arg(long)]
    out_image: Option<PathBuf>,
    /// Manifest (JSONL); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    gts: PathBuf,
    /// Comma-separated IoU thresholds; 0.50:0.05:0.95 by default.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SpectralArgs {
    /// Source-style image (TEN1).
    #[arg(long)]
    x: PathBuf,
    /// Target-style image (TEN1).
    #[arg(long)]
    y: PathBuf,
    /// Cycle reconstruction of x.
    #[arg(long, requires = "y_cyc")]
    x_cyc: Option<PathBuf>,
    /// Cycle reconstruction of y.
    #[arg(long, requires = "x_cyc")]
    y_cyc: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 1)]
    wakes: usize,
    /// Directory for `scene_NNNN.ten` files and `gts.jsonl`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// JSON array of per-step batch maxima, e.g. `[[0.4, 0.6], [0.5]]`.
    #[arg(long, conflicts_with_all = ["steps", "value", "noise", "batch"])]
    stream: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Mean batch maximum of the generated stream.
    #[arg(long, default_value_t = 0.5)]
    value: f64,
    /// Gaussian jitter on generated maxima (clamped to [0, 1]).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long)]
    tau0: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::Shape(_) | Error::Malformed { .. } | Error::Io(_) => 2,
        Error::Invariant(_) => 3,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => PipelineConfig::from_json(&read_text(p)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Filter(a) => cmd_filter(a, cfg),
        Command::Calibrate(a) => cmd_calibrate(a, cfg),
        Command::Mix(a) => cmd_mix(a, &cfg),
        Command::Eval(a) => cmd_eval(a),
        Command::Spectral(a) => cmd_spectral(a, &cfg),
        Command::Synth(a) => cmd_synth(a, &cfg),
        Command::Simulate(a) => cmd_simulate(a, &cfg),
    }
}

fn with_path<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    with_path(path, fs::read(path))
}

fn read_text(path: &Path) -> Result<String> {
    with_path(path, fs::read_to_string(path))
}

/// Prefixes malformed-input errors with the file they came from.
fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Malformed { offset, reason } => Error::Malformed {
            offset,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

fn read_tensor(path: &Path) -> Result<crate::Tensor> {
    in_file(path, formats::decode_tensor(&read_bytes(path)?))
}

fn read_dets(path: &Path) -> Result<Vec<Detection>> {
    in_file(path, formats::parse_detections(&read_text(path)?))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => with_path(p, fs::write(p, bytes)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("report types serialize");
    s.push(b'\n');
    s
}

#[derive(Serialize)]
struct Selection {
    indices: Vec<usize>,
    distances: Vec<f64>,
}

fn cmd_filter(a: FilterArgs, mut cfg: PipelineConfig) -> Result<()> {
    if let Some(eta) = a.eta {
        cfg.filter.eta = eta;
    }
    if let Some(s) = a.scorer {
        cfg.filter.scorer = s;
    }
    cfg.validate()?;
    let target = in_file(&a.target, formats::decode_embeddings(&read_bytes(&a.target)?))?;
    let source = in_file(&a.source, formats::decode_embeddings(&read_bytes(&a.source)?))?;
    let f = &cfg.filter;
    let scorer = match f.scorer {
        ScorerKind::L2 => Scorer::Prototype(fit_prototype(&target)?),
        ScorerKind::Kmeans => Scorer::KMeans(fit_kmeans(&target, f.k, f.kmeans_iters, cfg.seed)?),
        ScorerKind::Gmm => Scorer::Gmm(fit_gmm(&target, f.gmm_m, f.gmm_iters, f.eps_floor, cfg.seed)?.model),
    };
    let scored = scorer.score_all(&source)?;
    let indices = select_similar(&scored, f.eta)?;
    let distances = indices.iter().map(|&i| scored[i].distance).collect();
    emit(a.out.as_deref(), &to_json(&Selection { indices, distances }))
}

#[derive(Serialize)]
struct CalibReport {
    tau_k: f64,
    tau_next: f64,
    prescreened: usize,
    accepted: usize,
    rejected: usize,
    bank_size: usize,
    traces: Vec<CalibTrace>,
}

fn cmd_calibrate(a: CalibrateArgs, mut cfg: PipelineConfig) -> Result<()> {
    let c = &mut cfg.calib;
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    if let Some(k) = a.k {
        c.k = k;
    }
    set(&mut c.gamma, a.gamma);
    set(&mut c.delta, a.delta);
    set(&mut c.mu, a.mu);
    set(&mut c.tau0, a.tau0);
    set(&mut c.lambda, a.lambda);
    set(&mut c.eta_adj, a.eta_adj);
    set(&mut c.momentum, a.momentum);
    cfg.validate()?;
    let c = &cfg.calib;
    let tau_k = a.tau.unwrap_or(c.tau0);
    if !(0.0..=1.0).contains(&tau_k) {
        return Err(Error::invalid(format!("--tau must lie in [0, 1], got {tau_k}")));
    }

    let dets = read_dets(&a.dets)?;
    let featmap = read_tensor(&a.featmap)?;
    let image = read_tensor(&a.image)?;
    let bank = match &a.bank {
        Some(p) => in_file(p, formats::decode_bank(&read_bytes(p)?, c.capacity))?,
        None => MemoryBank::new(c.capacity)?,
    };

    let candidates = prescreen(&dets, tau_k);
    let outcome = calibrate(&candidates, &featmap, &image, &bank, tau_k, c, a.epoch)?;
    check_bank(&outcome.bank)?;
    let batch_max: Vec<f64> = dets.iter().map(Detection::score).reduce(f64::max).into_iter().collect();
    let tau_next = global_threshold(tau_k, &batch_max, c.lambda)?;

    emit(a.out.as_deref(), formats::format_detections(&outcome.accepted).as_bytes())?;
    if let Some(p) = &a.bank_out {
        with_path(p, fs::write(p, formats::encode_bank(&outcome.bank)?))?;
    }
    if let Some(p) = &a.report {
        let report = CalibReport {
            tau_k,
            tau_next,
            prescreened: candidates.len(),
            accepted: outcome.accepted.len(),
            rejected: outcome.rejected_count,
            bank_size: outcome.bank.len(),
            traces: outcome.traces,
        };
        with_path(p, fs::write(p, to_json(&report)))?;
    }
    Ok(())
}

fn check_bank(bank: &MemoryBank) -> Result<()> {
    if bank.len() > bank.capacity() {
        return Err(Error::Invariant("bank exceeds its capacity".into()));
    }
    let es = bank.entries();
    for (i, a) in es.iter().enumerate() {
        for b in &es[i + 1..] {
            if a.image_id == b.image_id && iou(&a.bbox, &b.bbox) > REPLACE_IOU {
                return Err(Error::Invariant(format!("overlapping bank entries on {}", a.image_id)));
            }
        }
    }
    Ok(())
}

fn cmd_mix(a: MixArgs, cfg: &PipelineConfig) -> Result<()> {
    let xs = read_tensor(&a.source_image)?;
    let xt = read_tensor(&a.target_image)?;
    let source_labels = read_dets(&a.source_labels)?;
    let target_labels = read_dets(&a.target_labels)?;
    let dims = xt.dims();
    if dims.len() < 2 {
        return Err(Error::shape("images must be [H, W] or [C, H, W]"));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let scores = quadrant_confidences(&target_labels, (w, h))?;
    let rm = select_region(&scores, (w, h))?;
    let mixed = mix_images(&xs, &xt, &rm)?;
    let confs: Vec<f64> = target_labels.iter().map(Detection::score).collect();
    let record = MixRecord {
        source_image: a.source_image.display().to_string(),
        target_image: a.target_image.display().to_string(),
        region_id: rm.region_id(),
        alpha: dynamic_alpha(&confs, cfg.mix.c_th, cfg.mix.kappa),
        merged_labels: merge_labels(&target_labels, &source_labels, &rm),
    };
    if let Some(p) = &a.out_image {
        with_path(p, fs::write(p, formats::encode_tensor(&mixed)?))?;
    }
    let mut line = serde_json::to_vec(&record).expect("manifest serializes");
    line.push(b'\n');
    emit(a.out.as_deref(), &line)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let preds = read_dets(&a.preds)?;
    let gts = read_dets(&a.gts)?;
    let thresholds = a.thresholds.unwrap_or_else(coco_thresholds);
    let report = eval_detections(&preds, &gts, &thresholds)?;
    let in_unit = |v: f64| (0.0..=1.0).contains(&v);
    let ok = report.ap_per_threshold.iter().all(|t| in_unit(t.ap))
        && report.map50.is_none_or(in_unit)
        && report.map5095.is_none_or(in_unit);
    if !ok {
        return Err(Error::Invariant("AP outside [0, 1]".into()));
    }
    emit(a.out.as_deref(), &to_json(&report))
}

#[derive(Serialize)]
struct SpectralReport {
    spl: f64,
    profile_x: SpectralProfile,
    profile_y: SpectralProfile,
    #[serde(skip_serializing_if = "Option::is_none")]
    cscl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cycle: Option<f64>,
}

fn cmd_spectral(a: SpectralArgs, cfg: &PipelineConfig) -> Result<()> {
    let s = &cfg.spectral;
    let x = read_tensor(&a.x)?.to_plane()?;
    let y = read_tensor(&a.y)?.to_plane()?;
    let (cscl_v, cycle) = match (&a.x_cyc, &a.y_cyc) {
        (Some(px), Some(py)) => {
            let xc = read_tensor(px)?.to_plane()?;
            let yc = read_tensor(py)?.to_plane()?;
            let v = cscl(&x, &xc, &y, &yc, s.lambda_h, &s.profile)?;
            (Some(v), Some(cycle_l1(&x, &xc)? + cycle_l1(&y, &yc)?))
        }
        _ => (None, None),
    };
    let report = SpectralReport {
        spl: spl(&x, &y, s.lambda_h, &s.profile)?,
        profile_x: polar_profiles(&x, &s.profile)?,
        profile_y: polar_profiles(&y, &s.profile)?,
        cscl: cscl_v,
        cycle,
    };
    emit(a.out.as_deref(), &to_json(&report))
}

fn cmd_synth(a: SynthArgs, cfg: &PipelineConfig) -> Result<()> {
    with_path(&a.out_dir, fs::create_dir_all(&a.out_dir))?;
    let mut gts = Vec::new();
    for i in 0..a.count {
        let seed = cfg.seed.wrapping_add(i as u64);
        let scene = synth_scene(seed, (a.width, a.height), a.wakes, &cfg.synth)?;
        let path = a.out_dir.join(format!("scene_{i:04}.ten"));
        with_path(&path, fs::write(&path, formats::encode_tensor(&scene.image)?))?;
        gts.extend(scene.gts);
    }
    let path = a.out_dir.join("gts.jsonl");
    with_path(&path, fs::write(&path, formats::format_detections(&gts)))
}

#[derive(Serialize)]
struct Trajectory {
    lambda: f64,
    tau0: f64,
    trajectory: Vec<f64>,
}

fn cmd_simulate(a: SimulateArgs, cfg: &PipelineConfig) -> Result<()> {
    let lambda = a.lambda.unwrap_or(cfg.calib.lambda);
    let tau0 = a.tau0.unwrap_or(cfg.calib.tau0);
    let stream: Vec<Vec<f64>> = match &a.stream {
        Some(p) => {
            let text = read_text(p)?;
            serde_json::from_str(&text).map_err(|e| {
                Error::malformed(0, format!("{}: expected an array of number arrays: {e}", p.display()))
            })?
        }
        None => {
            if a.batch == 0 {
                return Err(Error::invalid("--batch must be at least 1"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (0..a.steps)
                .map(|_| {
                    (0..a.batch)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            (a.value + a.noise * z).clamp(0.0, 1.0)
                        })
                        .collect()
                })
                .collect()
        }
    };
    let trajectory = simulate_threshold(&stream, lambda, tau0)?;
    emit(a.out.as_deref(), &to_json(&Trajectory { lambda, tau0, trajectory }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["wakeda"]), 1);
        assert_eq!(run(["wakeda", "bogus"]), 1);
        assert_eq!(run(["wakeda", "eval", "--preds"]), 1);
        assert_eq!(run(["wakeda", "--help"]), 0);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::invalid("x")), 1);
        assert_eq!(exit_code(&Error::malformed(3, "x")), 2);
        assert_eq!(exit_code(&Error::shape("x")), 2);
        assert_eq!(exit_code(&Error::Invariant("x".into())), 3);
    }
}
