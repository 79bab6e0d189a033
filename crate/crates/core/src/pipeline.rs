//! Coarse-to-fine alignment and the multi-round procedure.
//!
//! One alignment pass runs the 1/8, 1/4, 1/2 and full-resolution models in
//! turn; each predicts a field at its own resolution, which is upsampled to
//! full resolution and inverted onto the annotation vertices.
//!
//! A round trains a fresh set of models on the current annotations and then
//! re-aligns. In the standard mode the input of every re-alignment is the
//! original annotation set `A_0`; the ablation modes differ only in what is
//! trained and what is aligned.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{annotations_to_json, DatasetImage, Split};
use crate::deform::{corrupt_annotations, derive_seed, FieldSpec, NOISIER_AMPLITUDE_CAP};
use crate::error::{Error, Result};
use crate::geometry::{
    align_annotations_inverse, save_field, upsample_field, AnnotationSet, ConvergenceReport, DisplacementField, Extent, InverseMethod,
    InverseOptions, Point,
};
use crate::metrics::{mean_distance, quantile_sorted, DistanceRecord};
use crate::net::{forward, load_checkpoint, save_checkpoint, ModelParams, Real, DISP_RANGE};
use crate::raster::{rasterize_triple, Downsample, ImagePatch, RasterTriple, Scale};
use crate::training::{train_scale_model, train_scale_model_from, LogRow, Precision, TrainConfig, TrainScene, LOG_HEADER};

/// What a per-scale predictor sees: the image and the rasterized current
/// annotations, both at `scale`.
pub struct ScaleContext<'a> {
    pub image_id: &'a str,
    pub scale: Scale,
    pub image: &'a ImagePatch,
    pub raster: &'a RasterTriple,
}

/// Anything that predicts a displacement field at one scale. Fields are in
/// pixels of that scale and must match the context's extent.
pub trait ScalePredictor: Send + Sync {
    fn scale(&self) -> Scale;
    fn predict(&self, ctx: &ScaleContext<'_>) -> Result<DisplacementField>;
}

impl<T: Real> ScalePredictor for ModelParams<T> {
    fn scale(&self) -> Scale {
        self.scale
    }

    /// Pads the inputs up to the network's divisor and crops the output back.
    fn predict(&self, ctx: &ScaleContext<'_>) -> Result<DisplacementField> {
        let d = self.arch.required_divisor();
        let e = ctx.image.extent;
        if e.is_divisible_by(d) {
            return Ok(forward::<T>(self, ctx.image, ctx.raster)?.0);
        }
        let image = ctx.image.pad_reflect(d)?;
        let padded = image.extent;
        let mut raster = RasterTriple::zeros(padded);
        for (dst, src) in [
            (&mut raster.interior, &ctx.raster.interior),
            (&mut raster.edge, &ctx.raster.edge),
            (&mut raster.vertices, &ctx.raster.vertices),
        ] {
            for i in 0..e.height {
                dst[i * padded.width..i * padded.width + e.width].copy_from_slice(&src[i * e.width..(i + 1) * e.width]);
            }
        }
        let full = forward::<T>(self, &image, &raster)?.0;
        Ok(DisplacementField::from_fn(e, |x, y| full.get(y as usize, x as usize)))
    }
}

/// Predicts zero everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPredictor(pub Scale);

impl ScalePredictor for ZeroPredictor {
    fn scale(&self) -> Scale {
        self.0
    }

    fn predict(&self, ctx: &ScaleContext<'_>) -> Result<DisplacementField> {
        Ok(DisplacementField::zeros(ctx.image.extent))
    }
}

/// Returns stored per-image fields, clamped to the range a network head can
/// produce. Images without a stored field get zeros.
#[derive(Debug, Clone)]
pub struct FieldPredictor {
    pub scale: Scale,
    pub fields: std::collections::BTreeMap<String, DisplacementField>,
}

impl ScalePredictor for FieldPredictor {
    fn scale(&self) -> Scale {
        self.scale
    }

    fn predict(&self, ctx: &ScaleContext<'_>) -> Result<DisplacementField> {
        match self.fields.get(ctx.image_id) {
            None => Ok(DisplacementField::zeros(ctx.image.extent)),
            Some(f) if f.extent() == ctx.image.extent => Ok(f.map(|v| {
                Point::new(v.x.clamp(-DISP_RANGE, DISP_RANGE), v.y.clamp(-DISP_RANGE, DISP_RANGE))
            })),
            Some(f) => Err(Error::domain(format!(
                "stored field for {} has extent {}, expected {}",
                ctx.image_id,
                f.extent(),
                ctx.image.extent
            ))),
        }
    }
}

/// One predictor per scale, coarse to fine.
#[derive(Clone)]
pub struct AlignmentModel {
    pub round: usize,
    predictors: [Arc<dyn ScalePredictor>; 4],
}

impl std::fmt::Debug for AlignmentModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AlignmentModel").field("round", &self.round).finish_non_exhaustive()
    }
}

impl AlignmentModel {
    pub fn new(round: usize, predictors: [Arc<dyn ScalePredictor>; 4]) -> Result<Self> {
        for (p, s) in predictors.iter().zip(Scale::ALL) {
            if p.scale() != s {
                return Err(Error::config(format!("predictor for {s} is tagged {}", p.scale())));
            }
        }
        Ok(AlignmentModel { round, predictors })
    }

    pub fn zeros(round: usize) -> Self {
        AlignmentModel {
            round,
            predictors: Scale::ALL.map(|s| Arc::new(ZeroPredictor(s)) as Arc<dyn ScalePredictor>),
        }
    }

    pub fn from_params<T: Real>(round: usize, models: [ModelParams<T>; 4]) -> Result<Self> {
        Self::new(round, models.map(|m| Arc::new(m) as Arc<dyn ScalePredictor>))
    }

    /// Loads `s8.ckpt` ... `s1.ckpt` from `dir`.
    pub fn from_checkpoints(round: usize, dir: &Path) -> Result<Self> {
        let models = Scale::ALL
            .iter()
            .map(|s| load_checkpoint(&dir.join(checkpoint_name(*s))))
            .collect::<Result<Vec<_>>>()?;
        let models: [ModelParams<f32>; 4] = models.try_into().unwrap_or_else(|_| unreachable!("four scales"));
        Self::from_params(round, models)
    }

    pub fn predictor(&self, scale: Scale) -> &dyn ScalePredictor {
        self.predictors[scale.index()].as_ref()
    }
}

pub fn checkpoint_name(scale: Scale) -> String {
    format!("{}.ckpt", scale.tag())
}

/// One step of the base method at `scale`. `image` is the full-resolution
/// padded image; annotations are full-resolution coordinates.
pub fn align_step_at_scale(
    predictor: &dyn ScalePredictor,
    image_id: &str,
    image: &ImagePatch,
    annotations: &AnnotationSet,
    opts: &InverseOptions,
) -> Result<(AnnotationSet, ConvergenceReport)> {
    if !image.extent.is_divisible_by(8) {
        return Err(Error::domain(format!("image {image_id} extent {} is not padded to a multiple of 8", image.extent)));
    }
    if annotations.extent != image.extent {
        return Err(Error::domain(format!(
            "annotations extent {} does not match image extent {}",
            annotations.extent, image.extent
        )));
    }
    let scale = predictor.scale();
    let k = scale.factor();
    let small = image.downsample(k)?;
    let a_small = annotations.scaled(scale.value(), small.extent)?;
    let raster = rasterize_triple(&a_small, small.extent);
    let f = predictor.predict(&ScaleContext { image_id, scale, image: &small, raster: &raster })?;
    if f.extent() != small.extent {
        return Err(Error::domain(format!("{scale} predictor returned extent {}, expected {}", f.extent(), small.extent)));
    }
    let up = upsample_field(&f, k)?;
    align_annotations_inverse(annotations, &up, opts)
}

/// Largest per-component vertex movement one multi-resolution pass can make.
pub fn max_pass_correction() -> f64 {
    Scale::ALL.iter().map(|s| DISP_RANGE * s.factor() as f64).sum()
}

/// Applies the four scales coarse to fine.
pub fn align_multiresolution(
    m: &AlignmentModel,
    image_id: &str,
    image: &ImagePatch,
    annotations: &AnnotationSet,
    opts: &InverseOptions,
) -> Result<(AnnotationSet, Vec<ConvergenceReport>)> {
    let mut current = annotations.clone();
    let mut reports = Vec::with_capacity(4);
    for scale in Scale::ALL {
        let (next, report) = align_step_at_scale(m.predictor(scale), image_id, image, &current, opts)?;
        current = next;
        reports.push(report);
    }
    let bound = max_pass_correction() + 1e-6;
    for (p, q) in annotations.vertices().zip(current.vertices()) {
        if (q - p).max_abs() > bound {
            return Err(Error::State(format!("{image_id}: vertex moved more than {bound} px in one pass")));
        }
    }
    Ok((current, reports))
}

/// Residual misalignment after correcting with `applied`: for every aligned
/// pixel `v` whose misaligned position is `v + f(v)`, returns
/// `(Id + applied)^-1 (v + f(v)) - v`.
pub fn residual_field(f: &DisplacementField, applied: &DisplacementField, tol: f64) -> Result<DisplacementField> {
    if f.extent() != applied.extent() {
        return Err(Error::domain("residual needs fields of equal extent"));
    }
    let opts = InverseOptions { tol, max_iter: 200, method: InverseMethod::FixedPoint };
    let e = f.extent();
    let mut out = DisplacementField::zeros(e);
    for i in 0..e.height {
        for j in 0..e.width {
            let v = Point::new(j as f64, i as f64);
            let target = v + f.get(i, j);
            let x = crate::geometry::invert_point(applied, target, opts.tol, opts.max_iter).0;
            out.set(i, j, x - v);
        }
    }
    Ok(out)
}

/// Per-scale fields an ideal model would predict for an image whose
/// annotations are misaligned by the full-resolution field `f` (aligned
/// position `v` maps to `v + f(v)`). Each is at its scale's resolution and
/// already clamped to the head's range.
pub fn oracle_fields(f: &DisplacementField) -> Result<[DisplacementField; 4]> {
    let e = f.extent();
    if !e.is_divisible_by(8) {
        return Err(Error::domain(format!("oracle needs an extent divisible by 8, got {e}")));
    }
    let mut residual = f.clone();
    let mut out = Vec::with_capacity(4);
    for scale in Scale::ALL {
        let k = scale.factor();
        let small = Extent::new(e.height / k, e.width / k);
        let kf = k as f64;
        let coarse = DisplacementField::from_fn(small, |x, y| {
            let v = residual.get(y as usize * k, x as usize * k) * (1.0 / kf);
            Point::new(v.x.clamp(-DISP_RANGE, DISP_RANGE), v.y.clamp(-DISP_RANGE, DISP_RANGE))
        });
        let applied = upsample_field(&coarse, k)?;
        residual = residual_field(&residual, &applied, 1e-6)?;
        out.push(coarse);
    }
    Ok(out.try_into().unwrap_or_else(|_| unreachable!("four scales")))
}

/// Builds oracle predictors for a set of images from their true
/// misalignment fields.
pub fn oracle_model(round: usize, fields: &[(String, DisplacementField)]) -> Result<AlignmentModel> {
    let mut per_scale: Vec<FieldPredictor> =
        Scale::ALL.iter().map(|&scale| FieldPredictor { scale, fields: Default::default() }).collect();
    for (id, f) in fields {
        for (p, field) in per_scale.iter_mut().zip(oracle_fields(f)?) {
            p.fields.insert(id.clone(), field);
        }
    }
    let predictors: Vec<Arc<dyn ScalePredictor>> = per_scale.into_iter().map(|p| Arc::new(p) as Arc<dyn ScalePredictor>).collect();
    AlignmentModel::new(round, predictors.try_into().unwrap_or_else(|_| unreachable!("four scales")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Mode {
    /// Train on `A_{r-1}`, align `A_0`.
    #[default]
    #[serde(rename = "standard")]
    Standard,
    /// Train on `A_{r-1}`, align `A_{r-1}`.
    #[serde(rename = "AS1")]
    As1,
    /// Train once; align `A_{r-1}` with the first model.
    #[serde(rename = "AS2")]
    As2,
    /// Standard mode after adding extra smooth misalignment to `A_0`.
    #[serde(rename = "noisier")]
    Noisier,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::As1 => "AS1",
            Mode::As2 => "AS2",
            Mode::Noisier => "noisier",
        }
    }

    fn aligns_original(self) -> bool {
        matches!(self, Mode::Standard | Mode::Noisier)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Mode::Standard),
            "AS1" | "as1" => Ok(Mode::As1),
            "AS2" | "as2" => Ok(Mode::As2),
            "noisier" => Ok(Mode::Noisier),
            _ => Err(Error::config(format!("unknown mode {s:?}; expected standard, AS1, AS2 or noisier"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub rounds: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Amplitude cap of the extra misalignment in noisier mode.
    pub noisier_cap: f64,
    pub inverse_tol: f64,
    pub inverse_max_iter: usize,
    /// Use the single-step inverse instead of fixed-point iteration.
    pub first_order_inverse: bool,
    /// Start each round's training from the previous round's weights.
    pub warm_start: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let inv = InverseOptions::default();
        PipelineConfig {
            rounds: 3,
            mode: Mode::Standard,
            seed: 0,
            noisier_cap: NOISIER_AMPLITUDE_CAP,
            inverse_tol: inv.tol,
            inverse_max_iter: inv.max_iter,
            first_order_inverse: false,
            warm_start: false,
        }
    }
}

impl PipelineConfig {
    pub fn inverse_options(&self) -> InverseOptions {
        InverseOptions {
            tol: self.inverse_tol,
            max_iter: self.inverse_max_iter,
            method: if self.first_order_inverse { InverseMethod::FirstOrder } else { InverseMethod::FixedPoint },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if !(self.inverse_tol > 0.0) || self.inverse_max_iter == 0 {
            return Err(Error::config("inverse_tol must be positive and inverse_max_iter at least 1"));
        }
        if !(self.noisier_cap > 0.0) {
            return Err(Error::config("noisier_cap must be positive"));
        }
        Ok(())
    }
}

/// Produces the models of a round from that round's training annotations.
pub trait RoundTrainer {
    /// `checkpoint_dir` exists and is empty; trainers that produce weights
    /// write them there.
    fn train(&mut self, round: usize, seed: u64, scenes: &[TrainScene], checkpoint_dir: &Path) -> Result<AlignmentModel>;
}

/// Trains the four networks from scratch (or warm-started) every round and
/// writes checkpoints plus per-scale training logs.
pub struct NetworkTrainer {
    pub config: TrainConfig,
    pub warm_start: bool,
    previous: Option<[ModelParams<f32>; 4]>,
}

impl NetworkTrainer {
    pub fn new(config: TrainConfig, warm_start: bool) -> Self {
        NetworkTrainer { config, warm_start, previous: None }
    }

    fn train_typed<T: Real>(&self, seed: u64, scenes: &[TrainScene], dir: &Path) -> Result<[ModelParams<T>; 4]> {
        let config = TrainConfig { master_seed: seed, ..self.config.clone() };
        let log_dir = dir.parent().unwrap_or(dir).join("train_log");
        fs::create_dir_all(&log_dir).map_err(|e| Error::io(&log_dir, e))?;
        let mut models = Vec::with_capacity(4);
        for scale in Scale::ALL {
            let mut log = format!("{LOG_HEADER}\n");
            let mut sink = |row: LogRow| {
                log.push_str(&row.csv());
                log.push('\n');
            };
            let result = match (&self.previous, self.warm_start) {
                (Some(prev), true) => train_scale_model_from(prev[scale.index()].cast::<T>(), scenes, &config, &mut sink),
                _ => train_scale_model::<T>(scenes, &config, scale, &mut sink),
            };
            let log_path = log_dir.join(format!("{}.csv", scale.tag()));
            fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
            let model = match result {
                Err(Error::Divergence { scale, step, message, last_good }) => {
                    save_checkpoint(&last_good, &dir.join(format!("{scale}.diverged.ckpt")))?;
                    return Err(Error::Divergence { scale, step, message, last_good });
                }
                r => r?,
            };
            save_checkpoint(&model.cast::<f32>(), &dir.join(checkpoint_name(scale)))?;
            models.push(model);
        }
        Ok(models.try_into().unwrap_or_else(|_| unreachable!("four scales")))
    }
}

impl RoundTrainer for NetworkTrainer {
    fn train(&mut self, round: usize, seed: u64, scenes: &[TrainScene], checkpoint_dir: &Path) -> Result<AlignmentModel> {
        match self.config.precision {
            Precision::F32 => {
                let models = self.train_typed::<f32>(seed, scenes, checkpoint_dir)?;
                self.previous = Some(models.clone());
                AlignmentModel::from_params(round, models)
            }
            Precision::F64 => {
                let models = self.train_typed::<f64>(seed, scenes, checkpoint_dir)?;
                self.previous = Some(models.clone().map(|m| m.cast::<f32>()));
                AlignmentModel::from_params(round, models)
            }
        }
    }
}

/// Scores aligned annotations of an image, typically against hidden ground
/// truth that the pipeline itself never sees.
pub trait Evaluator: Sync {
    fn distances(&self, image_id: &str, annotations: &AnnotationSet) -> Result<Option<Vec<DistanceRecord>>>;
}

/// Scores nothing.
pub struct NoEvaluator;

impl Evaluator for NoEvaluator {
    fn distances(&self, _: &str, _: &AnnotationSet) -> Result<Option<Vec<DistanceRecord>>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub image_id: String,
    pub vertices: usize,
    /// Movement relative to the original annotations.
    pub mean_shift: f64,
    pub max_shift: f64,
    pub unconverged: usize,
    pub mean_error: Option<f64>,
    pub median_error: Option<f64>,
}

pub const METRICS_HEADER: &str = "image_id,vertices,mean_shift_px,max_shift_px,unconverged,mean_error_px,median_error_px";

impl ImageMetrics {
    fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.image_id,
            self.vertices,
            self.mean_shift,
            self.max_shift,
            self.unconverged,
            opt(self.mean_error),
            opt(self.median_error)
        )
    }
}

#[derive(Debug, Clone)]
pub struct RoundState {
    pub round: usize,
    /// Annotations per image, in dataset order, with the padded extent.
    pub annotations: Vec<AnnotationSet>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<ImageMetrics>,
    /// Distance records per image when an evaluator provided them.
    pub distances: Vec<Option<Vec<DistanceRecord>>>,
}

pub fn round_dir(out: &Path, round: usize) -> PathBuf {
    out.join("rounds").join(format!("r{round}"))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn image_metrics(
    image_id: &str,
    original: &AnnotationSet,
    current: &AnnotationSet,
    unconverged: usize,
    distances: Option<&[DistanceRecord]>,
) -> Result<ImageMetrics> {
    let shifts: Vec<f64> = original.vertices().zip(current.vertices()).map(|(p, q)| (q - p).norm()).collect();
    let n = shifts.len();
    let (mean_error, median_error) = match distances {
        Some(d) if !d.is_empty() => {
            let mut v: Vec<f64> = d.iter().map(|r| r.distance).collect();
            v.sort_by(f64::total_cmp);
            (Some(mean_distance(d)?), Some(quantile_sorted(&v, 0.5)))
        }
        _ => (None, None),
    };
    Ok(ImageMetrics {
        image_id: image_id.to_string(),
        vertices: n,
        mean_shift: if n == 0 { 0.0 } else { shifts.iter().sum::<f64>() / n as f64 },
        max_shift: shifts.iter().copied().fold(0.0, f64::max),
        unconverged,
        mean_error,
        median_error,
    })
}

fn persist_round(
    dir: &Path,
    images: &[DatasetImage],
    annotations: &[AnnotationSet],
    metrics: &[ImageMetrics],
) -> Result<()> {
    let ann_dir = dir.join("annotations");
    create_dir(&ann_dir)?;
    for (img, a) in images.iter().zip(annotations) {
        let path = ann_dir.join(format!("{}.json", img.image_id));
        let out = a.clone().with_extent(img.original_extent);
        fs::write(&path, annotations_to_json(&out)).map_err(|e| Error::io(&path, e))?;
    }
    let mut csv = format!("{METRICS_HEADER}\n");
    for m in metrics {
        csv.push_str(&m.csv());
        csv.push('\n');
    }
    let path = dir.join("metrics.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

fn append_audit(dir: &Path, lines: &str) -> Result<()> {
    let path = dir.join("audit.log");
    let mut text = fs::read_to_string(&path).unwrap_or_default();
    text.push_str(lines);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn evaluate_all(
    evaluator: &dyn Evaluator,
    images: &[DatasetImage],
    original: &[AnnotationSet],
    current: &[AnnotationSet],
    unconverged: &[usize],
) -> Result<(Vec<ImageMetrics>, Vec<Option<Vec<DistanceRecord>>>)> {
    let mut metrics = Vec::with_capacity(images.len());
    let mut distances = Vec::with_capacity(images.len());
    for (k, img) in images.iter().enumerate() {
        let d = evaluator.distances(&img.image_id, &current[k])?;
        metrics.push(image_metrics(&img.image_id, &original[k], &current[k], unconverged[k], d.as_deref())?);
        distances.push(d);
    }
    Ok((metrics, distances))
}

/// Runs `config.rounds` rounds and persists every round under
/// `out/rounds/r{N}`. Round 0 holds the starting annotations. Rounds finished
/// before an error stay on disk.
pub fn run_multiround(
    images: &[DatasetImage],
    config: &PipelineConfig,
    trainer: &mut dyn RoundTrainer,
    evaluator: &dyn Evaluator,
    out: &Path,
) -> Result<Vec<RoundState>> {
    config.validate()?;
    let opts = config.inverse_options();
    let mut ids = std::collections::BTreeSet::new();
    for img in images {
        if !ids.insert(img.image_id.as_str()) {
            return Err(Error::config(format!("duplicate image id {}", img.image_id)));
        }
    }

    let r0 = round_dir(out, 0);
    create_dir(&r0)?;
    let mut a0: Vec<AnnotationSet> = images.iter().map(|i| i.annotations.clone()).collect();
    if config.mode == Mode::Noisier {
        let noise_dir = r0.join("noise");
        create_dir(&noise_dir)?;
        for (k, img) in images.iter().enumerate() {
            let spec = FieldSpec::noisier(img.image.extent, derive_seed(config.seed, 5000 + k as u64)).with_cap(config.noisier_cap);
            let (noisy, field) = corrupt_annotations(&a0[k], &spec)?;
            save_field(&field, &noise_dir.join(format!("{}.dfld", img.image_id)))?;
            a0[k] = noisy;
        }
    }
    let zeros = vec![0; images.len()];
    let (metrics, distances) = evaluate_all(evaluator, images, &a0, &a0, &zeros)?;
    persist_round(&r0, images, &a0, &metrics)?;
    let mut states = vec![RoundState { round: 0, annotations: a0.clone(), checkpoints: Vec::new(), metrics, distances }];

    let mut first_model: Option<AlignmentModel> = None;
    for r in 1..=config.rounds {
        let dir = round_dir(out, r);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let ckpt_dir = dir.join("checkpoints");
        create_dir(&ckpt_dir)?;
        let previous = &states[r - 1].annotations;
        let mut audit = String::new();

        let model = match (&first_model, config.mode) {
            (Some(m), Mode::As2) => {
                let _ = writeln!(audit, "reuse round={r} model=r1");
                AlignmentModel { round: r, ..m.clone() }
            }
            _ => {
                let scenes: Vec<TrainScene> = images
                    .iter()
                    .zip(previous)
                    .filter(|(img, _)| img.split == Split::Train)
                    .map(|(img, a)| TrainScene { image: img.image.clone(), annotations: a.clone() })
                    .collect();
                let _ = writeln!(audit, "train round={r} scenes={} input=A{}", scenes.len(), r - 1);
                append_audit(&dir, &audit)?;
                audit.clear();
                let m = trainer.train(r, derive_seed(config.seed, r as u64), &scenes, &ckpt_dir)?;
                if first_model.is_none() {
                    first_model = Some(m.clone());
                }
                m
            }
        };

        let (input, input_tag) = if config.mode.aligns_original() { (&a0, "A0".to_string()) } else { (previous, format!("A{}", r - 1)) };
        for img in images {
            let _ = writeln!(audit, "infer round={r} image={} input={input_tag}", img.image_id);
        }
        append_audit(&dir, &audit)?;
        let aligned: Vec<(AnnotationSet, usize)> = images
            .par_iter()
            .zip(input.par_iter())
            .map(|(img, a)| {
                let (out, reports) = align_multiresolution(&model, &img.image_id, &img.image, a, &opts)?;
                Ok((out, reports.iter().map(|r| r.unconverged.len()).sum()))
            })
            .collect::<Result<_>>()?;
        let (current, unconverged): (Vec<AnnotationSet>, Vec<usize>) = aligned.into_iter().unzip();
        let (metrics, distances) = evaluate_all(evaluator, images, &a0, &current, &unconverged)?;
        persist_round(&dir, images, &current, &metrics)?;
        let mut checkpoints: Vec<PathBuf> = fs::read_dir(&ckpt_dir)
            .map_err(|e| Error::io(&ckpt_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        checkpoints.sort();
        states.push(RoundState { round: r, annotations: current, checkpoints, metrics, distances });
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::sample_gaussian_field;
    use crate::geometry::{warp_annotations_forward, Polygon};
    use crate::metrics::vertex_distances;

    fn truth(extent: Extent) -> AnnotationSet {
        let mut polys = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                let (x, y) = (20.0 + 70.0 * j as f64 + 0.3, 18.0 + 72.0 * i as f64 + 0.6);
                polys.push(
                    Polygon::new(vec![Point::new(x, y), Point::new(x + 30.0, y + 2.0), Point::new(x + 28.0, y + 25.0), Point::new(x - 1.0, y + 22.0)])
                        .unwrap(),
                );
            }
        }
        AnnotationSet::new("img", extent, polys)
    }

    fn mean_err(a: &AnnotationSet, b: &AnnotationSet) -> f64 {
        mean_distance(&vertex_distances(a, b).unwrap()).unwrap()
    }

    #[test]
    fn zero_model_is_identity() {
        let e = Extent::new(64, 72);
        let img = ImagePatch::constant(e, [0.0, 0.0, 0.0]);
        let a = truth(Extent::new(256, 256)).with_extent(e);
        let (out, _) = align_multiresolution(&AlignmentModel::zeros(1), "img", &img, &a, &InverseOptions::default()).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn unpadded_image_rejected() {
        let e = Extent::new(60, 64);
        let img = ImagePatch::constant(e, [0.0; 3]);
        let a = AnnotationSet::empty("x", e);
        assert!(align_step_at_scale(&ZeroPredictor(Scale::Full), "x", &img, &a, &InverseOptions::default()).is_err());
    }

    #[test]
    fn mistagged_predictors_rejected() {
        let p: [Arc<dyn ScalePredictor>; 4] = [
            Arc::new(ZeroPredictor(Scale::Full)),
            Arc::new(ZeroPredictor(Scale::Quarter)),
            Arc::new(ZeroPredictor(Scale::Half)),
            Arc::new(ZeroPredictor(Scale::Full)),
        ];
        assert!(AlignmentModel::new(0, p).is_err());
    }

    #[test]
    fn saturated_coarse_step_moves_at_most_32() {
        let e = Extent::new(64, 64);
        let img = ImagePatch::constant(e, [0.0; 3]);
        let a = truth(Extent::new(256, 256)).with_extent(e);
        let mut fields = std::collections::BTreeMap::new();
        fields.insert("img".to_string(), DisplacementField::constant(Extent::new(8, 8), Point::new(100.0, -100.0)));
        let p = FieldPredictor { scale: Scale::Eighth, fields };
        let (out, _) = align_step_at_scale(&p, "img", &img, &a, &InverseOptions::default()).unwrap();
        for (v, w) in a.vertices().zip(out.vertices()) {
            assert!(((w - v) - Point::new(-32.0, 32.0)).max_abs() < 1e-9);
        }
    }

    #[test]
    fn exact_field_step_reduces_error_at_every_scale() {
        let e = Extent::new(256, 256);
        let t = truth(e);
        let img = ImagePatch::constant(e, [0.0; 3]);
        for scale in Scale::ALL {
            let k = scale.factor();
            for seed in 0..5 {
                let spec = FieldSpec::new(e, seed).with_cap(3.9 * k as f64).with_correlation_length(64.0);
                let f = sample_gaussian_field(&spec).unwrap();
                let a0 = warp_annotations_forward(&t, &f).unwrap();
                let small = Extent::new(256 / k, 256 / k);
                let coarse = DisplacementField::from_fn(small, |x, y| f.get(y as usize * k, x as usize * k) * (1.0 / k as f64));
                let mut fields = std::collections::BTreeMap::new();
                fields.insert("img".to_string(), coarse);
                let p = FieldPredictor { scale, fields };
                let (a1, _) = align_step_at_scale(&p, "img", &img, &a0, &InverseOptions::default()).unwrap();
                assert!(mean_err(&a1, &t) < mean_err(&a0, &t), "{scale} seed {seed}");
            }
        }
    }

    #[test]
    fn oracle_composition_removes_large_misalignment() {
        let e = Extent::new(256, 256);
        let t = truth(e);
        let img = ImagePatch::constant(e, [0.0; 3]);
        let f = sample_gaussian_field(&FieldSpec::new(e, 11).with_cap(30.0).with_correlation_length(64.0)).unwrap();
        let a0 = warp_annotations_forward(&t, &f).unwrap();
        let oracle = oracle_model(1, &[("img".into(), f)]).unwrap();
        let opts = InverseOptions { tol: 1e-4, max_iter: 50, ..Default::default() };
        let (out, _) = align_multiresolution(&oracle, "img", &img, &a0, &opts).unwrap();
        assert!(mean_err(&a0, &t) > 5.0);
        assert!(mean_err(&out, &t) < 0.05, "{}", mean_err(&out, &t));
        assert_eq!(out.vertex_count(), a0.vertex_count());
    }

    #[test]
    fn modes_parse() {
        for m in [Mode::Standard, Mode::As1, Mode::As2, Mode::Noisier] {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("AS3".parse::<Mode>().is_err());
    }

    #[test]
    fn network_predictor_pads_odd_extents() {
        let arch = crate::net::ArchDescriptor::new(vec![2, 2, 2]);
        let m = crate::net::init_model::<f32>(&arch, Scale::Eighth, 0).unwrap();
        let e = Extent::new(9, 10);
        let img = ImagePatch::constant(e, [0.1; 3]);
        let r = RasterTriple::zeros(e);
        let f = m.predict(&ScaleContext { image_id: "x", scale: Scale::Eighth, image: &img, raster: &r }).unwrap();
        assert_eq!(f.extent(), e);
    }
}
