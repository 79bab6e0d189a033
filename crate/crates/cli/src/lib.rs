//! Command-line driver: dataset synthesis, multi-round experiments,
//! evaluation, alignment with trained checkpoints and gradient self-tests.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 training divergence, 4 failed self-test.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use polyalign::dataset::{load_annotations, load_dataset, load_truth, save_annotations, synthesize};
use polyalign::geometry::InverseOptions;
use polyalign::metrics::{emit_report, mean_distance, vertex_distances, DistanceRecord, RoundCurve};
use polyalign::net::gradcheck::{gradcheck_suite, GATE};
use polyalign::pipeline::{align_multiresolution, run_multiround, AlignmentModel, Evaluator, Mode, NetworkTrainer, RoundState};
use polyalign::raster::load_image_patch;
use polyalign::AnnotationSet;

pub use config::{ExperimentConfig, ExplicitSeeds};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] polyalign::Error),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(polyalign::Error::Config(_)) => 1,
            CliError::Core(polyalign::Error::Divergence { .. }) => 3,
            CliError::Core(_) => 2,
            CliError::CheckFailed(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "polyalign", version, about = "Align polygon annotations to images with multi-round self-supervision")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Pipeline mode: standard, AS1, AS2 or noisier.
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    #[arg(long, global = true, value_name = "N")]
    pub rounds: Option<usize>,
    /// Scene seed for `synth`, pipeline seed otherwise.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Require explicit seeds. Outputs are then byte-reproducible.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes and a manifest.
    Synth,
    /// Multi-round training and alignment with per-round reports.
    Run,
    /// Compare annotation files (or directories of them) with ground truth.
    Eval {
        #[arg(long, value_name = "PATH")]
        pred: PathBuf,
        #[arg(long, value_name = "PATH")]
        gt: PathBuf,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        /// Scale every analytic gradient by 1.01 to exercise the failure path.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Align one image's annotations with trained checkpoints.
    Align {
        /// Directory holding s8.ckpt, s4.ckpt, s2.ckpt and s1.ckpt.
        #[arg(long, value_name = "DIR")]
        checkpoints: PathBuf,
        #[arg(long, value_name = "PNG")]
        image: PathBuf,
        #[arg(long, value_name = "JSON")]
        annotations: PathBuf,
        /// Where to write the aligned annotations.
        #[arg(long, value_name = "JSON")]
        output: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Messages go to stdout, errors to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout();
    match execute(&cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn execute(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let g = &cli.global;
    let (mut cfg, seeds) = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => (ExperimentConfig::default(), ExplicitSeeds::default()),
    };
    apply_overrides(&mut cfg, g, &cli.command);
    if g.deterministic {
        check_explicit_seeds(&cli.command, g, seeds)?;
    }
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // A pool may already exist when commands run in-process repeatedly;
        // results do not depend on the thread count, so that is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut text = String::new();
    let result = match &cli.command {
        Command::Synth => cmd_synth(&cfg, &mut text),
        Command::Run => cmd_run(&cfg, &mut text).map(|_| ()),
        Command::Eval { pred, gt } => cmd_eval(&cfg, pred, gt, &mut text),
        Command::Gradcheck { epsilon, corrupt } => cmd_gradcheck(*epsilon, *corrupt, &mut text),
        Command::Align { checkpoints, image, annotations, output } => {
            cmd_align(&cfg, checkpoints, image, annotations, output, &mut text)
        }
    };
    let _ = out.write_all(text.as_bytes());
    result
}

fn apply_overrides(cfg: &mut ExperimentConfig, g: &GlobalArgs, cmd: &Command) {
    if let Some(m) = g.mode {
        cfg.pipeline.mode = m;
    }
    if let Some(r) = g.rounds {
        cfg.pipeline.rounds = r;
    }
    if let Some(s) = g.seed {
        match cmd {
            Command::Synth => cfg.dataset.scene.seed = s,
            _ => cfg.pipeline.seed = s,
        }
    }
    if let Some(o) = &g.out {
        cfg.output.dir = o.clone();
    }
}

fn check_explicit_seeds(cmd: &Command, g: &GlobalArgs, seeds: ExplicitSeeds) -> Result<(), CliError> {
    let missing = match cmd {
        Command::Synth => !seeds.scene && g.seed.is_none(),
        Command::Run => !seeds.pipeline && g.seed.is_none(),
        _ => false,
    };
    if missing {
        let key = if matches!(cmd, Command::Synth) { "dataset.scene.seed" } else { "pipeline.seed" };
        return Err(CliError::Usage(format!("--deterministic needs an explicit seed: set {key} or pass --seed")));
    }
    Ok(())
}

/// Writes the synthetic dataset next to the configured manifest path.
pub fn cmd_synth(cfg: &ExperimentConfig, text: &mut String) -> Result<(), CliError> {
    cfg.dataset.scene.validate()?;
    let manifest = cfg.manifest_path();
    if manifest.file_name().and_then(|n| n.to_str()) != Some("manifest.json") {
        return Err(CliError::Usage(format!(
            "synthetic datasets are written as manifest.json; got {}",
            manifest.display()
        )));
    }
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let path = synthesize(&cfg.dataset.scene, cfg.dataset.scenes, dir)?;
    let _ = writeln!(text, "wrote {} scenes to {}", cfg.dataset.scenes, path.display());
    Ok(())
}

/// Scores against ground truth loaded up front; images without truth are
/// not scored.
pub struct TruthEvaluator {
    truth: BTreeMap<String, AnnotationSet>,
}

impl TruthEvaluator {
    pub fn new(truth: BTreeMap<String, AnnotationSet>) -> Self {
        TruthEvaluator { truth }
    }
}

impl Evaluator for TruthEvaluator {
    fn distances(&self, image_id: &str, annotations: &AnnotationSet) -> polyalign::Result<Option<Vec<DistanceRecord>>> {
        self.truth.get(image_id).map(|t| vertex_distances(annotations, t)).transpose()
    }
}

/// Per-round curves over all scored vertices; rounds without scores are skipped.
pub fn round_curves(states: &[RoundState], mode: Mode, thresholds: &[f64]) -> Result<Vec<RoundCurve>, CliError> {
    let mut curves = Vec::new();
    for s in states {
        let records: Vec<DistanceRecord> = s.distances.iter().flatten().flatten().cloned().collect();
        if !records.is_empty() {
            curves.push(RoundCurve::from_records(s.round, mode.name(), &records, thresholds)?);
        }
    }
    Ok(curves)
}

/// Multi-round experiment; returns the round states for callers that want
/// to inspect them.
pub fn cmd_run(cfg: &ExperimentConfig, text: &mut String) -> Result<Vec<RoundState>, CliError> {
    cfg.validate()?;
    let manifest = cfg.manifest_path();
    if !manifest.exists() {
        return Err(CliError::Core(polyalign::Error::Data {
            path: manifest,
            message: "dataset not found; run `polyalign synth` first".into(),
        }));
    }
    let dataset = load_dataset(&manifest)?;
    let mut truth = BTreeMap::new();
    for img in &dataset.images {
        if let Some(t) = load_truth(img)? {
            truth.insert(img.image_id.clone(), t);
        }
    }
    let out = &cfg.output.dir;
    fs::create_dir_all(out).map_err(|e| polyalign::Error::Io { path: out.clone(), source: e })?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| polyalign::Error::Io { path: cfg_path, source: e })?;

    log::info!(
        "running {} rounds in {} mode on {} images",
        cfg.pipeline.rounds,
        cfg.pipeline.mode,
        dataset.images.len()
    );
    let mut trainer = NetworkTrainer::new(cfg.training.clone(), cfg.pipeline.warm_start);
    let evaluator = TruthEvaluator::new(truth);
    let states = run_multiround(&dataset.images, &cfg.pipeline, &mut trainer, &evaluator, out)?;

    let curves = round_curves(&states, cfg.pipeline.mode, &cfg.metrics.grid()?)?;
    if curves.is_empty() {
        let _ = writeln!(text, "no ground truth available; skipped reports");
    } else {
        emit_report(&curves, &out.join("report"), cfg.metrics.svg)?;
        text.push_str(&quantile_table(&states, &curves));
    }
    Ok(states)
}

fn quantile_table(states: &[RoundState], curves: &[RoundCurve]) -> String {
    let mut t = format!("{:>5}  {:<8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}\n", "round", "mode", "q50", "q90", "q95", "mean", "vertices");
    for c in curves {
        let records: Vec<DistanceRecord> = states
            .iter()
            .find(|s| s.round == c.round)
            .map(|s| s.distances.iter().flatten().flatten().cloned().collect())
            .unwrap_or_default();
        let mean = mean_distance(&records).unwrap_or(f64::NAN);
        let _ = writeln!(
            t,
            "{:>5}  {:<8}  {:>8.3}  {:>8.3}  {:>8.3}  {:>8.3}  {:>8}",
            c.round,
            c.mode,
            c.quantiles.q50,
            c.quantiles.q90,
            c.quantiles.q95,
            mean,
            records.len()
        );
    }
    t
}

fn json_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| polyalign::Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut out = BTreeMap::new();
    for e in entries.flatten() {
        let p = e.path();
        if p.extension().is_some_and(|x| x == "json") {
            if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), p);
            }
        }
    }
    Ok(out)
}

/// Pairs of (prediction, ground truth) files. Directories are matched by
/// file name; a prediction without a counterpart is an error.
fn eval_pairs(pred: &Path, gt: &Path) -> Result<Vec<(PathBuf, PathBuf)>, CliError> {
    match (pred.is_dir(), gt.is_dir()) {
        (false, false) => Ok(vec![(pred.to_path_buf(), gt.to_path_buf())]),
        (true, true) => {
            let p = json_files(pred)?;
            let g = json_files(gt)?;
            if p.is_empty() {
                return Err(CliError::Core(polyalign::Error::Data {
                    path: pred.to_path_buf(),
                    message: "no .json annotation files".into(),
                }));
            }
            p.into_iter()
                .map(|(name, path)| match g.get(&name) {
                    Some(q) => Ok((path, q.clone())),
                    None => Err(CliError::Core(polyalign::Error::Data {
                        path: gt.join(&name),
                        message: "missing ground truth for this prediction".into(),
                    })),
                })
                .collect()
        }
        _ => Err(CliError::Usage("--pred and --gt must both be files or both be directories".into())),
    }
}

pub fn cmd_eval(cfg: &ExperimentConfig, pred: &Path, gt: &Path, text: &mut String) -> Result<(), CliError> {
    let thresholds = cfg.metrics.grid()?;
    let mut records = Vec::new();
    let mut rows = String::from("file,polygon,vertex,distance_px\n");
    for (p, g) in eval_pairs(pred, gt)? {
        let a = load_annotations(&p)?;
        let b = load_annotations(&g)?;
        let d = vertex_distances(&a, &b).map_err(|e| match e {
            polyalign::Error::Domain(m) => polyalign::Error::Data { path: p.clone(), message: m },
            other => other,
        })?;
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        for r in &d {
            let _ = writeln!(rows, "{name},{},{},{}", r.polygon, r.vertex, r.distance);
        }
        records.extend(d);
    }
    if records.is_empty() {
        return Err(CliError::Core(polyalign::Error::Data {
            path: pred.to_path_buf(),
            message: "no vertices to evaluate".into(),
        }));
    }
    let curve = RoundCurve::from_records(0, "eval", &records, &thresholds)?;
    let dir = &cfg.output.dir;
    emit_report(std::slice::from_ref(&curve), dir, cfg.metrics.svg)?;
    let path = dir.join("distances.csv");
    fs::write(&path, rows).map_err(|e| polyalign::Error::Io { path, source: e })?;
    let q = curve.quantiles;
    let _ = writeln!(
        text,
        "vertices {}  mean {:.3}  q50 {:.3}  q90 {:.3}  q95 {:.3}",
        records.len(),
        mean_distance(&records)?,
        q.q50,
        q.q90,
        q.q95
    );
    Ok(())
}

pub fn cmd_gradcheck(epsilon: f64, corrupt: bool, text: &mut String) -> Result<(), CliError> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(CliError::Usage(format!("--epsilon must be in [1e-7, 1e-3], got {epsilon}")));
    }
    let checks = gradcheck_suite(epsilon, corrupt)?;
    let mut worst = 0.0f64;
    for c in &checks {
        let _ = writeln!(text, "{:<20} {:.3e}  {}", c.name, c.max_rel_error, if c.passed() { "ok" } else { "FAIL" });
        worst = worst.max(c.max_rel_error);
    }
    let passed = checks.iter().all(|c| c.passed());
    let _ = writeln!(text, "max relative error {worst:.3e} (gate {GATE:e}): {}", if passed { "PASS" } else { "FAIL" });
    if passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient check failed: max relative error {worst:.3e} exceeds {GATE:e}")))
    }
}

pub fn cmd_align(
    cfg: &ExperimentConfig,
    checkpoints: &Path,
    image: &Path,
    annotations: &Path,
    output: &Path,
    text: &mut String,
) -> Result<(), CliError> {
    let model = AlignmentModel::from_checkpoints(0, checkpoints)?;
    let img = load_image_patch(image)?;
    let extent = img.extent;
    let a = load_annotations(annotations)?;
    if a.extent != extent {
        return Err(CliError::Core(polyalign::Error::Data {
            path: annotations.to_path_buf(),
            message: format!("annotation extent {} differs from image extent {extent}", a.extent),
        }));
    }
    let padded = img.pad_reflect(8)?;
    let a = a.with_extent(padded.extent);
    let opts: InverseOptions = cfg.pipeline.inverse_options();
    let (aligned, reports) = align_multiresolution(&model, &a.image_id, &padded, &a, &opts)?;
    let aligned = aligned.with_extent(extent);
    save_annotations(&aligned, output)?;
    let moved: Vec<f64> = a.vertices().zip(aligned.vertices()).map(|(p, q)| (q - p).norm()).collect();
    let mean = if moved.is_empty() { 0.0 } else { moved.iter().sum::<f64>() / moved.len() as f64 };
    let unconverged: usize = reports.iter().map(|r| r.unconverged.len()).sum();
    let _ = writeln!(
        text,
        "aligned {} vertices (mean shift {mean:.3} px, {unconverged} unconverged) -> {}",
        moved.len(),
        output.display()
    );
    Ok(())
}
