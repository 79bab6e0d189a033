//! Self-supervised triplets and per-scale training.
//!
//! Annotations are assumed aligned with their image. Each triplet perturbs
//! them with a known smooth field `f`, rasterizes the result and asks the
//! network to recover `f` from (image, misaligned raster).

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{derive_seed, rng_from_seed, sample_gaussian_field, FieldSpec, MIN_CORRELATION_LENGTH};
use crate::error::{Error, Result};
use crate::geometry::{warp_annotations_forward, AnnotationSet, DisplacementField, Extent, Point, FRAME_OVERHANG};
use crate::net::{assemble_input, init_model, ArchDescriptor, Grads, ModelParams, OutputGrad, Real, Tape, Tensor, DISP_RANGE};
use crate::raster::{rasterize_triple, Downsample, ImagePatch, RasterTriple, Scale};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriplet {
    pub image: ImagePatch,
    pub misaligned_raster: RasterTriple,
    /// Displacement taking aligned positions to the rasterized (misaligned) ones,
    /// in pixels of this triplet's scale.
    pub target_field: DisplacementField,
    pub scale: Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps per scale.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the segmentation cross-entropy in the total loss.
    pub seg_loss_weight: f64,
    /// Training patch side at each scale's own resolution.
    pub patch_size: usize,
    pub master_seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub widths: Vec<usize>,
    /// Group-norm groups per hidden layer (0 disables normalization).
    pub norm_groups: usize,
    pub precision: Precision,
    /// Amplitude cap of triplet fields, in pixels at the triplet's scale.
    pub triplet_cap: f64,
    /// Correlation length of triplet fields in full-resolution pixels; each
    /// scale divides it by its factor and clamps it to the patch side.
    pub triplet_correlation: f64,
    /// Probability that a patch is centred on a polygon.
    pub polygon_bias: f64,
    /// Apply a random flip or transpose to each triplet.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 8,
            learning_rate: 3e-3,
            seg_loss_weight: 0.1,
            patch_size: 32,
            master_seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            widths: vec![8, 16, 32],
            norm_groups: crate::net::DEFAULT_NORM_GROUPS,
            precision: Precision::F32,
            triplet_cap: DISP_RANGE,
            triplet_correlation: 64.0,
            polygon_bias: 0.9,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn arch(&self) -> ArchDescriptor {
        ArchDescriptor { norm_groups: self.norm_groups, ..ArchDescriptor::new(self.widths.clone()) }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        let depth_div = 1usize << self.widths.len();
        if self.patch_size == 0 || self.patch_size % depth_div != 0 || self.patch_size % 8 != 0 {
            return Err(Error::config(format!(
                "patch_size {} must be a positive multiple of 8 and of 2^depth = {depth_div}",
                self.patch_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.seg_loss_weight >= 0.0) {
            return Err(Error::config("learning_rate must be positive and seg_loss_weight non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::config("optimizer needs beta1, beta2 in [0, 1) and epsilon > 0"));
        }
        if !(self.triplet_cap > 0.0 && self.triplet_cap <= DISP_RANGE) {
            return Err(Error::config(format!("triplet_cap must be in (0, {DISP_RANGE}]")));
        }
        if !(self.triplet_correlation >= MIN_CORRELATION_LENGTH) {
            return Err(Error::config(format!("triplet_correlation must be at least {MIN_CORRELATION_LENGTH} px")));
        }
        if !(0.0..=1.0).contains(&self.polygon_bias) {
            return Err(Error::config("polygon_bias must be a probability"));
        }
        Ok(())
    }
}

/// Perturbs aligned annotations with a field drawn from `spec` and rasterizes
/// them at the patch's resolution. `image` and `annotations` are already at
/// `scale`.
pub fn build_triplet(image: &ImagePatch, annotations: &AnnotationSet, spec: &FieldSpec, scale: Scale) -> Result<TrainingTriplet> {
    if spec.amplitude_cap > DISP_RANGE {
        return Err(Error::config(format!(
            "triplet cap {} exceeds the {DISP_RANGE} px the displacement head can express",
            spec.amplitude_cap
        )));
    }
    if image.extent != annotations.extent || spec.extent != image.extent {
        return Err(Error::domain("image, annotations and field spec must share an extent"));
    }
    let target_field = sample_gaussian_field(spec)?;
    let misaligned = warp_annotations_forward(annotations, &target_field)?;
    Ok(TrainingTriplet {
        image: image.clone(),
        misaligned_raster: rasterize_triple(&misaligned, image.extent),
        target_field,
        scale,
    })
}

/// Sum over pixels of the squared vector difference.
pub fn loss_displacement(pred: &DisplacementField, target: &DisplacementField) -> Result<f64> {
    if pred.extent() != target.extent() {
        return Err(Error::domain(format!(
            "prediction extent {} does not match target extent {}",
            pred.extent(),
            target.extent()
        )));
    }
    Ok(pred
        .vectors()
        .iter()
        .zip(target.vectors())
        .map(|(&p, &t)| {
            let d = p - t;
            d.x * d.x + d.y * d.y
        })
        .sum())
}

/// `norm * sum (pred - target)^2` and its gradient with respect to `pred`.
pub fn disp_loss_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, norm: f64) -> (f64, Tensor<T>) {
    assert_eq!(pred.shape, target.shape, "displacement loss shapes");
    let two_norm = T::of(2.0 * norm);
    let mut value = 0.0;
    let data = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| {
            let d = p - t;
            value += d.f64() * d.f64();
            two_norm * d
        })
        .collect();
    (norm * value, Tensor::from_vec(pred.shape, data))
}

/// Binary cross-entropy from a logit, `max(z, 0) - z t + ln(1 + e^-|z|)`.
fn bce_with_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean BCE over samples, channels and pixels, and its gradient with respect
/// to the logits. `targets[n]` is sample `n`'s raster.
pub fn seg_loss_grad<T: Real>(logits: &Tensor<T>, targets: &[&RasterTriple]) -> (f64, Tensor<T>) {
    let [n, c, h, w] = logits.shape;
    assert_eq!(c, 3, "segmentation logits need 3 channels");
    assert_eq!(targets.len(), n, "one target raster per sample");
    let count = (n * c * h * w) as f64;
    let mut grad = Tensor::zeros(logits.shape);
    let mut total = 0.0;
    for (s, target) in targets.iter().enumerate() {
        assert_eq!((target.extent.height, target.extent.width), (h, w), "segmentation target extent");
        for (ch, plane) in target.channels().into_iter().enumerate() {
            let off = (s * c + ch) * h * w;
            for (k, &t) in plane.iter().enumerate() {
                let z = logits.data[off + k].f64();
                let t = t as f64;
                total += bce_with_logit(z, t);
                grad.data[off + k] = T::of((sigmoid(z) - t) / count);
            }
        }
    }
    (total / count, grad)
}

/// Mean binary cross-entropy between logits and the boolean raster.
pub fn loss_segmentation<T: Real>(logits: &Tensor<T>, target: &RasterTriple) -> Result<f64> {
    let [n, c, h, w] = logits.shape;
    if n != 1 || c != 3 || h != target.extent.height || w != target.extent.width {
        return Err(Error::domain(format!(
            "logits shape {:?} does not match a 3-channel {} raster",
            logits.shape, target.extent
        )));
    }
    Ok(seg_loss_grad(logits, &[target]).0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig { learning_rate: c.learning_rate, beta1: c.beta1, beta2: c.beta2, epsilon: c.epsilon }
    }
}

/// First and second moment accumulators, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState { m: vec![0.0; param_count], v: vec![0.0; param_count] }
    }
}

/// Bias-corrected adaptive-moment update. `step_index` starts at 1. A
/// non-finite gradient leaves `m` untouched and returns a divergence error.
pub fn optimizer_step<T: Real>(
    m: &mut ModelParams<T>,
    grads: &Grads<T>,
    state: &mut AdamState,
    config: &AdamConfig,
    step_index: usize,
) -> Result<()> {
    if step_index == 0 {
        return Err(Error::config("optimizer step index starts at 1"));
    }
    if state.m.len() != m.param_count() || grads.iter().count() != m.param_count() {
        return Err(Error::domain("gradient layout does not match the model"));
    }
    if !grads.is_finite() {
        return Err(Error::Divergence {
            scale: m.scale.tag().into(),
            step: step_index,
            message: "non-finite gradient".into(),
            last_good: Box::new(m.cast()),
        });
    }
    let t = step_index as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (k, (p, g)) in m.params_mut().zip(grads.iter()).enumerate() {
        let g = g.f64();
        let mk = config.beta1 * state.m[k] + (1.0 - config.beta1) * g;
        let vk = config.beta2 * state.v[k] + (1.0 - config.beta2) * g * g;
        state.m[k] = mk;
        state.v[k] = vk;
        let update = config.learning_rate * (mk / c1) / ((vk / c2).sqrt() + config.epsilon);
        *p -= T::of(update);
    }
    Ok(())
}

/// One image with the annotations treated as aligned for this training run.
/// Extents must be multiples of 8.
#[derive(Debug, Clone)]
pub struct TrainScene {
    pub image: ImagePatch,
    pub annotations: AnnotationSet,
}

/// A row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub scale: Scale,
    pub step: usize,
    pub disp_loss: f64,
    pub seg_loss: f64,
    pub total: f64,
    pub wall_ms: u128,
}

pub const LOG_HEADER: &str = "step,disp_loss,seg_loss,total,wall_ms";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.disp_loss, self.seg_loss, self.total, self.wall_ms)
    }
}

struct ScaleLevel {
    image: ImagePatch,
    annotations: AnnotationSet,
}

fn prepare_level(scenes: &[TrainScene], scale: Scale) -> Result<Vec<ScaleLevel>> {
    scenes
        .iter()
        .map(|s| {
            if !s.image.extent.is_divisible_by(8) || s.image.extent != s.annotations.extent {
                return Err(Error::domain(format!(
                    "training scene {} must have matching extents divisible by 8",
                    s.annotations.image_id
                )));
            }
            let image = s.image.downsample(scale.factor())?;
            let annotations = s.annotations.scaled(scale.value(), image.extent)?;
            Ok(ScaleLevel { image, annotations })
        })
        .collect()
}

/// Annotations visible in a window, translated into window coordinates.
fn crop_annotations(a: &AnnotationSet, row: usize, col: usize, extent: Extent, margin: f64) -> Result<AnnotationSet> {
    let origin = Point::new(col as f64, row as f64);
    let (w, h) = (extent.width as f64, extent.height as f64);
    let mut polygons = Vec::new();
    for poly in &a.polygons {
        let (lo, hi) = poly.bounds();
        let lo = lo - origin;
        let hi = hi - origin;
        let touches = hi.x >= -margin && hi.y >= -margin && lo.x <= w + margin && lo.y <= h + margin;
        let fits = lo.x >= -FRAME_OVERHANG && lo.y >= -FRAME_OVERHANG && hi.x <= w + FRAME_OVERHANG && hi.y <= h + FRAME_OVERHANG;
        if touches && fits {
            polygons.push(poly.map_vertices(|p| p - origin)?);
        }
    }
    Ok(AnnotationSet::new(a.image_id.clone(), extent, polygons))
}

fn pick_origin(rng: &mut impl Rng, level: &ScaleLevel, patch: Extent, bias: f64) -> (usize, usize) {
    let max_row = level.image.extent.height - patch.height;
    let max_col = level.image.extent.width - patch.width;
    let polys = &level.annotations.polygons;
    if !polys.is_empty() && rng.random::<f64>() < bias {
        let c = polys[rng.random_range(0..polys.len())].centroid();
        let pick = |rng: &mut dyn rand::RngCore, centre: f64, span: usize, max: usize| -> usize {
            let lo = (centre - span as f64 + 1.0).ceil().max(0.0) as usize;
            let hi = (centre.floor().max(0.0) as usize).min(max);
            if lo >= hi {
                hi.min(lo).min(max)
            } else {
                rng.random_range(lo..=hi)
            }
        };
        let row = pick(rng, c.y, patch.height, max_row);
        let col = pick(rng, c.x, patch.width, max_col);
        (row, col)
    } else {
        (rng.random_range(0..=max_row), rng.random_range(0..=max_col))
    }
}

fn patch_extent(config: &TrainConfig, level_extent: Extent) -> Extent {
    Extent::new(config.patch_size.min(level_extent.height), config.patch_size.min(level_extent.width))
}

/// Triplet `index` of the stream for `scale`, fully determined by
/// `(config.master_seed, scale, index)`.
fn sample_triplet(levels: &[ScaleLevel], config: &TrainConfig, scale: Scale, index: u64) -> Result<TrainingTriplet> {
    let seed = derive_seed(derive_seed(config.master_seed, scale.index() as u64), index);
    let mut rng = rng_from_seed(seed);
    let level = &levels[rng.random_range(0..levels.len())];
    let patch = patch_extent(config, level.image.extent);
    let (row, col) = pick_origin(&mut rng, level, patch, config.polygon_bias);
    let image = level.image.crop(row, col, patch)?;
    let annotations = crop_annotations(&level.annotations, row, col, patch, config.triplet_cap + 1.0)?;
    let corr = (config.triplet_correlation / scale.factor() as f64)
        .max(MIN_CORRELATION_LENGTH)
        .min(patch.height.min(patch.width) as f64);
    let spec = FieldSpec {
        extent: patch,
        amplitude_cap: config.triplet_cap,
        correlation_length: corr,
        seed: rng.random(),
    };
    let t = build_triplet(&image, &annotations, &spec, scale)?;
    let code = if config.augment { rng.random_range(0..8u8) } else { 0 };
    Ok(orient_triplet(t, code))
}

/// Applies one of the eight flips/transposes of the square: bit 0 flips x,
/// bit 1 flips y, bit 2 transposes (first). Displacements rotate with the
/// pixels. Transposition is skipped on non-square patches.
pub fn orient_triplet(t: TrainingTriplet, code: u8) -> TrainingTriplet {
    let e = t.image.extent;
    let transpose = code & 4 != 0 && e.height == e.width;
    let (flip_x, flip_y) = (code & 1 != 0, code & 2 != 0);
    if !transpose && !flip_x && !flip_y {
        return t;
    }
    // Output pixel (r, c) reads input pixel src(r, c).
    let src = |r: usize, c: usize| {
        let (r, c) = (if flip_y { e.height - 1 - r } else { r }, if flip_x { e.width - 1 - c } else { c });
        if transpose { (c, r) } else { (r, c) }
    };
    let remap = |plane: &[u8]| -> Vec<u8> {
        let mut out = vec![0; plane.len()];
        for r in 0..e.height {
            for c in 0..e.width {
                let (sr, sc) = src(r, c);
                out[r * e.width + c] = plane[sr * e.width + sc];
            }
        }
        out
    };
    let mut data = Vec::with_capacity(t.image.data.len());
    for ch in 0..3 {
        let plane = t.image.channel(ch);
        for r in 0..e.height {
            for c in 0..e.width {
                let (sr, sc) = src(r, c);
                data.push(plane[sr * e.width + sc]);
            }
        }
    }
    let orient = |raster: &RasterTriple| RasterTriple {
        extent: e,
        interior: remap(&raster.interior),
        edge: remap(&raster.edge),
        vertices: remap(&raster.vertices),
    };
    let misaligned_raster = orient(&t.misaligned_raster);
    let target_field = DisplacementField::from_fn(e, |x, y| {
        let (sr, sc) = src(y as usize, x as usize);
        let v = t.target_field.get(sr, sc);
        let v = if transpose { Point::new(v.y, v.x) } else { v };
        Point::new(if flip_x { -v.x } else { v.x }, if flip_y { -v.y } else { v.y })
    });
    TrainingTriplet { image: ImagePatch { extent: e, data }, misaligned_raster, target_field, scale: t.scale }
}

/// Public handle on the triplet stream, mainly for reproducibility checks.
pub fn triplet_at(scenes: &[TrainScene], config: &TrainConfig, scale: Scale, index: u64) -> Result<TrainingTriplet> {
    let levels = prepare_level(scenes, scale)?;
    if levels.is_empty() {
        return Err(Error::domain("no training scenes"));
    }
    sample_triplet(&levels, config, scale, index)
}

fn field_tensor<T: Real>(f: &DisplacementField) -> Tensor<T> {
    let e = f.extent();
    let mut data = Vec::with_capacity(2 * e.area());
    data.extend(f.vectors().iter().map(|v| T::of(v.x)));
    data.extend(f.vectors().iter().map(|v| T::of(v.y)));
    Tensor::from_vec([1, 2, e.height, e.width], data)
}

struct SampleResult<T> {
    disp: f64,
    seg: f64,
    grads: Grads<T>,
}

fn sample_gradient<T: Real>(m: &ModelParams<T>, t: &TrainingTriplet, seg_weight: f64) -> Result<SampleResult<T>> {
    let x = assemble_input::<T>(&t.image, &t.misaligned_raster)?;
    let mut tape = Tape::new();
    let out = tape.forward(m, &x)?;
    let target = field_tensor::<T>(&t.target_field);
    let norm = 1.0 / t.image.extent.area() as f64;
    let (disp, g_disp) = disp_loss_grad(&out.disp, &target, norm);
    let (seg, mut g_seg) = seg_loss_grad(&out.seg_logits, &[&t.misaligned_raster]);
    let w = T::of(seg_weight);
    g_seg.data.iter_mut().for_each(|v| *v *= w);
    let grads = tape.backward(m, &OutputGrad { disp: g_disp, seg_logits: g_seg })?;
    Ok(SampleResult { disp, seg, grads })
}

/// Trains the model for one scale from a fresh initialization.
pub fn train_scale_model<T: Real>(
    scenes: &[TrainScene],
    config: &TrainConfig,
    scale: Scale,
    log: &mut dyn FnMut(LogRow),
) -> Result<ModelParams<T>> {
    config.validate()?;
    let init_seed = derive_seed(config.master_seed ^ 0xA5A5_0000, scale.index() as u64);
    let model = init_model::<T>(&config.arch(), scale, init_seed)?;
    train_scale_model_from(model, scenes, config, log)
}

/// Continues training `model` (for its own scale) with `config`.
pub fn train_scale_model_from<T: Real>(
    mut model: ModelParams<T>,
    scenes: &[TrainScene],
    config: &TrainConfig,
    log: &mut dyn FnMut(LogRow),
) -> Result<ModelParams<T>> {
    config.validate()?;
    model.check_consistent()?;
    let scale = model.scale;
    if config.steps == 0 {
        return Ok(model);
    }
    let levels = prepare_level(scenes, scale)?;
    if levels.is_empty() {
        return Err(Error::domain("no training scenes"));
    }
    for l in &levels {
        if !patch_extent(config, l.image.extent).is_divisible_by(model.arch.required_divisor()) {
            return Err(Error::config(format!(
                "scale {scale} level {} cannot hold patches divisible by {}",
                l.image.extent,
                model.arch.required_divisor()
            )));
        }
    }
    let adam = AdamConfig::from(config);
    let mut state = AdamState::new(model.param_count());
    let start = Instant::now();
    let batch = config.batch_size as u64;
    for step in 1..=config.steps {
        let base = (step as u64 - 1) * batch;
        let results: Vec<Result<SampleResult<T>>> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let t = sample_triplet(&levels, config, scale, base + b)?;
                sample_gradient(&model, &t, config.seg_loss_weight)
            })
            .collect();
        let mut grads = Grads::zeros_like(&model);
        let (mut disp, mut seg) = (0.0, 0.0);
        for r in results {
            let r = r?;
            grads.add_assign(&r.grads);
            disp += r.disp;
            seg += r.seg;
        }
        let inv = 1.0 / batch as f64;
        grads.scale(T::of(inv));
        let (disp, seg) = (disp * inv, seg * inv);
        let total = disp + config.seg_loss_weight * seg;
        if !total.is_finite() {
            return Err(Error::Divergence {
                scale: scale.tag().into(),
                step,
                message: format!("non-finite loss {total}"),
                last_good: Box::new(model.cast()),
            });
        }
        optimizer_step(&mut model, &grads, &mut state, &adam, step)?;
        log(LogRow { scale, step, disp_loss: disp, seg_loss: seg, total, wall_ms: start.elapsed().as_millis() });
    }
    Ok(model)
}

/// Trains the four per-scale models independently, coarse to fine.
pub fn train_scale_models<T: Real>(
    scenes: &[TrainScene],
    config: &TrainConfig,
    log: &mut dyn FnMut(LogRow),
) -> Result<[ModelParams<T>; 4]> {
    let mut models = Vec::with_capacity(4);
    for scale in Scale::ALL {
        models.push(train_scale_model::<T>(scenes, config, scale, log)?);
    }
    Ok(models.try_into().unwrap_or_else(|_| unreachable!("four scales")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{align_annotations_inverse, field_stats, InverseOptions, Polygon};

    fn square(x: f64, y: f64, s: f64) -> Polygon {
        Polygon::new(vec![Point::new(x, y), Point::new(x + s, y), Point::new(x + s, y + s), Point::new(x, y + s)]).unwrap()
    }

    fn scene(extent: Extent) -> (ImagePatch, AnnotationSet) {
        let a = AnnotationSet::new("t", extent, vec![square(6.3, 7.4, 10.0), square(20.2, 18.6, 8.0)]);
        (ImagePatch::constant(extent, [0.1, 0.2, 0.3]), a)
    }

    #[test]
    fn disp_loss_examples() {
        let e = Extent::new(4, 4);
        let f = DisplacementField::from_fn(e, |x, y| Point::new(x, -y));
        assert_eq!(loss_displacement(&f, &f).unwrap(), 0.0);
        let one = Extent::new(1, 1);
        let a = DisplacementField::constant(one, Point::new(3.0, 4.0));
        assert_eq!(loss_displacement(&a, &DisplacementField::zeros(one)).unwrap(), 25.0);
        assert!(loss_displacement(&a, &DisplacementField::zeros(e)).is_err());
    }

    #[test]
    fn disp_loss_matches_double_loop() {
        let mut rng = rng_from_seed(4);
        let e = Extent::new(8, 8);
        let mut rand_field = || DisplacementField::from_fn(e, |_, _| Point::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)));
        let (p, t) = (rand_field(), rand_field());
        let mut oracle = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                let (a, b) = (p.get(i, j), t.get(i, j));
                oracle += (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
            }
        }
        let got = loss_displacement(&p, &t).unwrap();
        assert!((got - oracle).abs() <= 1e-9 * oracle);
        // permutation invariance: reverse both
        let rp = DisplacementField::from_vec(e, p.vectors().iter().rev().copied().collect()).unwrap();
        let rt = DisplacementField::from_vec(e, t.vectors().iter().rev().copied().collect()).unwrap();
        assert!((loss_displacement(&rp, &rt).unwrap() - got).abs() <= 1e-9 * got);
        let (v, _) = disp_loss_grad(&field_tensor::<f64>(&p), &field_tensor::<f64>(&t), 1.0);
        assert!((v - oracle).abs() <= 1e-9 * oracle);
    }

    #[test]
    fn seg_loss_examples() {
        let e = Extent::new(3, 4);
        let mut target = RasterTriple::zeros(e);
        target.interior[1] = 1;
        target.edge[5] = 1;
        target.vertices[11] = 1;
        let logits = Tensor::<f64>::from_vec(
            [1, 3, 3, 4],
            target.channels().iter().flat_map(|p| p.iter().map(|&t| if t == 1 { 100.0 } else { -100.0 })).collect(),
        );
        assert!(loss_segmentation(&logits, &target).unwrap() < 1e-40);
        let zeros = Tensor::<f64>::zeros([1, 3, 3, 4]);
        assert!((loss_segmentation(&zeros, &target).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(loss_segmentation(&Tensor::<f64>::zeros([1, 2, 3, 4]), &target).is_err());
    }

    #[test]
    fn seg_loss_matches_direct_formula() {
        let mut rng = rng_from_seed(8);
        let e = Extent::new(5, 6);
        let mut target = RasterTriple::zeros(e);
        for p in [&mut target.interior, &mut target.edge, &mut target.vertices] {
            p.iter_mut().for_each(|v| *v = rng.random_range(0..2));
        }
        let logits = Tensor::<f64>::from_vec([1, 3, 5, 6], (0..90).map(|_| rng.random_range(-6.0..6.0)).collect());
        let mut oracle = 0.0;
        for (c, plane) in target.channels().iter().enumerate() {
            for (k, &t) in plane.iter().enumerate() {
                let z = logits.data[c * 30 + k];
                let s = 1.0 / (1.0 + (-z).exp());
                let t = t as f64;
                oracle -= t * s.ln() + (1.0 - t) * (1.0 - s).ln();
            }
        }
        oracle /= 90.0;
        let got = loss_segmentation(&logits, &target).unwrap();
        assert!((got - oracle).abs() <= 1e-9 * oracle);
    }

    #[test]
    fn triplet_with_vanishing_cap() {
        let e = Extent::new(32, 32);
        let (img, a) = scene(e);
        let spec = FieldSpec::new(e, 3).with_cap(1e-9).with_correlation_length(8.0);
        let t = build_triplet(&img, &a, &spec, Scale::Full).unwrap();
        assert_eq!(t.misaligned_raster, rasterize_triple(&a, e));
        assert!(field_stats(&t.target_field).unwrap().max_abs <= 1e-9);
    }

    #[test]
    fn triplet_cap_and_round_trip() {
        let e = Extent::new(32, 32);
        let (img, a) = scene(e);
        for seed in 0..20 {
            let spec = FieldSpec::new(e, seed).with_cap(4.0).with_correlation_length(8.0);
            let t = build_triplet(&img, &a, &spec, Scale::Half).unwrap();
            assert!(field_stats(&t.target_field).unwrap().max_abs <= 4.0);
            let warped = warp_annotations_forward(&a, &t.target_field).unwrap();
            let opts = InverseOptions { tol: 0.005, max_iter: 20, ..Default::default() };
            let (back, _) = align_annotations_inverse(&warped, &t.target_field, &opts).unwrap();
            for (p, q) in a.vertices().zip(back.vertices()) {
                assert!((p - q).norm() <= 0.01);
            }
        }
        let too_big = FieldSpec::new(e, 0).with_cap(5.0).with_correlation_length(8.0);
        assert!(matches!(build_triplet(&img, &a, &too_big, Scale::Full), Err(Error::Config(_))));
    }

    #[test]
    fn triplet_stream_is_reproducible_and_capped() {
        let e = Extent::new(64, 64);
        let (img, a) = scene(e);
        let scenes = vec![TrainScene { image: img, annotations: a.scaled(2.0, e).unwrap() }];
        let config = TrainConfig { patch_size: 32, widths: vec![4, 4], ..TrainConfig::default() };
        for scale in Scale::ALL {
            for idx in 0..10 {
                let t1 = triplet_at(&scenes, &config, scale, idx).unwrap();
                let t2 = triplet_at(&scenes, &config, scale, idx).unwrap();
                assert_eq!(t1, t2);
                assert!(field_stats(&t1.target_field).unwrap().max_abs <= DISP_RANGE);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut m = init_model::<f64>(&ArchDescriptor::new(vec![2]), Scale::Full, 1).unwrap();
        let before = m.clone();
        let g = Grads::zeros_like(&m);
        let mut st = AdamState::new(m.param_count());
        optimizer_step(&mut m, &g, &mut st, &AdamConfig::from(&TrainConfig::default()), 1).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn adam_constant_gradient_recurrence() {
        let cfg = AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        let mut m = init_model::<f64>(&ArchDescriptor::new(vec![1]), Scale::Full, 1).unwrap();
        let mut g = Grads::zeros_like(&m);
        g.iter_mut().for_each(|v| *v = 0.5);
        let mut st = AdamState::new(m.param_count());
        // Oracle recurrence for one scalar.
        let (mut mo, mut vo, mut po) = (0.0f64, 0.0f64, m.layers[0].weight[0]);
        for t in 1..=200 {
            optimizer_step(&mut m, &g, &mut st, &cfg, t).unwrap();
            mo = 0.9 * mo + 0.1 * 0.5;
            vo = 0.999 * vo + 0.001 * 0.25;
            let step = 1e-3 * (mo / (1.0 - 0.9f64.powi(t as i32))) / ((vo / (1.0 - 0.999f64.powi(t as i32))).sqrt() + 1e-8);
            po -= step;
            assert!((step - 1e-3).abs() < 1e-9);
        }
        assert!((m.layers[0].weight[0] - po).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut m = init_model::<f32>(&ArchDescriptor::new(vec![1]), Scale::Full, 1).unwrap();
        let before = m.clone();
        let mut g = Grads::zeros_like(&m);
        g.layers[0].weight[0] = f32::NAN;
        let mut st = AdamState::new(m.param_count());
        let err = optimizer_step(&mut m, &g, &mut st, &AdamConfig::from(&TrainConfig::default()), 1).unwrap_err();
        match err {
            Error::Divergence { last_good, .. } => assert_eq!(*last_good, before),
            e => panic!("unexpected {e}"),
        }
        assert_eq!(m, before);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let e = Extent::new(32, 32);
        let (img, a) = scene(e);
        let config = TrainConfig { steps: 0, patch_size: 32, widths: vec![2, 2], ..TrainConfig::default() };
        let models = train_scale_models::<f32>(&[TrainScene { image: img, annotations: a }], &config, &mut |_| {}).unwrap();
        for (m, s) in models.iter().zip(Scale::ALL) {
            let init = init_model::<f32>(&config.arch(), s, derive_seed(config.master_seed ^ 0xA5A5_0000, s.index() as u64)).unwrap();
            assert_eq!(*m, init);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let e = Extent::new(32, 32);
        let (img, a) = scene(e);
        let scenes = [TrainScene { image: img, annotations: a }];
        let config = TrainConfig { steps: 3, batch_size: 2, patch_size: 16, widths: vec![2, 2], ..TrainConfig::default() };
        let a = train_scale_model::<f32>(&scenes, &config, Scale::Full, &mut |_| {}).unwrap();
        let b = train_scale_model::<f32>(&scenes, &config, Scale::Full, &mut |_| {}).unwrap();
        assert_eq!(a, b);
    }
}
