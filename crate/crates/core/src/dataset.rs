//! Synthetic scenes, annotation files and dataset manifests.
//!
//! A synthetic scene is an image of box-like buildings together with the
//! exact outlines (`truth`) and a smoothly misaligned copy (`original`) that
//! plays the role of crowd-sourced map data. Only the misaligned copy is
//! handed to training and alignment; the truth is kept for evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{
    default_correlation_length, derive_seed, offset_polygons, rng_from_seed, sample_gaussian_field, sample_gaussian_field_at_cap,
    FieldSpec,
};
use crate::error::{Error, Result};
use crate::geometry::{save_field, warp_annotations_forward, AnnotationSet, DisplacementField, Extent, Point, Polygon};
use crate::raster::{load_png_rgb, normalize_rgb, save_png_rgb, ImagePatch};

pub const MIN_SCENE_SIDE: usize = 64;
const PLACEMENT_TRIES: usize = 200;
const BUILDING_GAP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of buildings per scene.
    pub buildings: (usize, usize),
    /// Range of building side lengths in px.
    pub size: (f64, f64),
    /// Buildings are rotated uniformly within `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    /// Probability that a building is L-shaped rather than rectangular.
    pub l_shape_fraction: f64,
    /// Amplitude cap of the smooth misalignment applied to the truth.
    pub misalignment_cap: f64,
    /// Scale every scene's misalignment so its peak equals the cap, instead of
    /// drawing the peak uniformly below it.
    pub misalignment_at_cap: bool,
    /// Correlation length of the misalignment; a quarter of the height if unset.
    pub correlation_length: Option<f64>,
    /// Extra rigid per-building offset cap, applied after the smooth field.
    pub building_offset_cap: Option<f64>,
    /// Standard deviation of additive pixel noise on the [0, 1] intensity scale.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 256,
            width: 256,
            buildings: (8, 14),
            size: (14.0, 40.0),
            max_rotation_deg: 30.0,
            l_shape_fraction: 0.3,
            misalignment_cap: 16.0,
            misalignment_at_cap: true,
            correlation_length: None,
            building_offset_cap: None,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn extent(&self) -> Extent {
        Extent::new(self.height, self.width)
    }

    pub fn field_spec(&self) -> FieldSpec {
        let e = self.extent();
        FieldSpec {
            extent: e,
            amplitude_cap: self.misalignment_cap,
            correlation_length: self.correlation_length.unwrap_or_else(|| default_correlation_length(e)),
            seed: derive_seed(self.seed, 2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.extent();
        if e.height < MIN_SCENE_SIDE || e.width < MIN_SCENE_SIDE || !e.is_divisible_by(8) {
            return Err(Error::config(format!(
                "scene extent {e} must be at least {MIN_SCENE_SIDE} px per side and divisible by 8"
            )));
        }
        if self.buildings.0 > self.buildings.1 {
            return Err(Error::config("building count range is empty"));
        }
        if !(self.size.0 >= 4.0 && self.size.0 <= self.size.1 && self.size.1 < e.height.min(e.width) as f64 / 2.0) {
            return Err(Error::config(format!("building size range {:?} is not usable for {e}", self.size)));
        }
        if !(0.0..=90.0).contains(&self.max_rotation_deg) || !(0.0..=1.0).contains(&self.l_shape_fraction) {
            return Err(Error::config("rotation must be in [0, 90] degrees and l_shape_fraction in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        if let Some(c) = self.building_offset_cap {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::config("building_offset_cap must be non-negative"));
            }
        }
        self.field_spec().validate()
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    /// 8-bit RGB, row-major interleaved.
    pub rgb: Vec<u8>,
    pub image: ImagePatch,
    pub truth: AnnotationSet,
    pub original: AnnotationSet,
    /// Smooth field that produced `original` from `truth` (before any
    /// per-building offsets).
    pub field: DisplacementField,
}

struct Building {
    polygon: Polygon,
    center: Point,
    radius: f64,
}

fn building_outline(rng: &mut impl Rng, spec: &SceneSpec) -> (Vec<Point>, f64) {
    let w = rng.random_range(spec.size.0..=spec.size.1);
    let h = rng.random_range(spec.size.0..=spec.size.1);
    let (hw, hh) = (w / 2.0, h / 2.0);
    let local = if rng.random::<f64>() < spec.l_shape_fraction {
        // Notch out one corner, keeping at least 40% of each side.
        let nx = w * rng.random_range(0.3..0.6);
        let ny = h * rng.random_range(0.3..0.6);
        vec![
            Point::new(-hw, -hh),
            Point::new(hw - nx, -hh),
            Point::new(hw - nx, -hh + ny),
            Point::new(hw, -hh + ny),
            Point::new(hw, hh),
            Point::new(-hw, hh),
        ]
    } else {
        vec![Point::new(-hw, -hh), Point::new(hw, -hh), Point::new(hw, hh), Point::new(-hw, hh)]
    };
    (local, (hw * hw + hh * hh).sqrt())
}

fn place_buildings(spec: &SceneSpec, image_id: &str) -> Result<Vec<Building>> {
    let mut rng = rng_from_seed(derive_seed(spec.seed, 0));
    let target = rng.random_range(spec.buildings.0..=spec.buildings.1);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut out: Vec<Building> = Vec::with_capacity(target);
    for _ in 0..target {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let (local, radius) = building_outline(&mut rng, spec);
            let theta = rng.random_range(-spec.max_rotation_deg..=spec.max_rotation_deg).to_radians();
            let margin = radius + 2.0;
            if 2.0 * margin >= w.min(h) {
                continue;
            }
            let center = Point::new(rng.random_range(margin..w - margin), rng.random_range(margin..h - margin));
            if out.iter().any(|b| (b.center - center).norm() < b.radius + radius + BUILDING_GAP) {
                continue;
            }
            let (s, c) = theta.sin_cos();
            let verts = local
                .iter()
                .map(|p| Point::new(center.x + c * p.x - s * p.y, center.y + s * p.x + c * p.y))
                .collect();
            out.push(Building { polygon: Polygon::new(verts)?, center, radius });
            placed = true;
            break;
        }
        if !placed {
            log::warn!("{image_id}: placed {} of {target} buildings; scene is full", out.len());
            break;
        }
    }
    Ok(out)
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.x * ab.x + ab.y * ab.y;
    let t = if len2 > 0.0 { (((p - a).x * ab.x + (p - a).y * ab.y) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

fn render(spec: &SceneSpec, buildings: &[Building]) -> Result<Vec<u8>> {
    let e = spec.extent();
    let mut rng = rng_from_seed(derive_seed(spec.seed, 1));
    let base: [f64; 3] = [rng.random_range(0.35..0.5), rng.random_range(0.4..0.55), rng.random_range(0.3..0.45)];
    let texture = sample_gaussian_field(&FieldSpec {
        extent: e,
        amplitude_cap: 1.0,
        correlation_length: (e.height.min(e.width) as f64 / 8.0).max(4.0),
        seed: rng.random(),
    })?;
    let mut rgb = vec![0f64; 3 * e.area()];
    for (k, v) in texture.vectors().iter().enumerate() {
        let shade = 0.08 * v.x;
        let tint = 0.05 * v.y;
        rgb[3 * k] = base[0] + shade + tint;
        rgb[3 * k + 1] = base[1] + shade;
        rgb[3 * k + 2] = base[2] + shade - tint;
    }
    for b in buildings {
        let bright = rng.random::<f64>() < 0.5;
        let fill: [f64; 3] = if bright {
            [rng.random_range(0.7..0.9), rng.random_range(0.65..0.85), rng.random_range(0.6..0.8)]
        } else {
            [rng.random_range(0.1..0.25), rng.random_range(0.1..0.25), rng.random_range(0.15..0.3)]
        };
        let (lo, hi) = b.polygon.bounds();
        let r0 = (lo.y.floor() as i64 - 2).max(0) as usize;
        let r1 = ((hi.y.ceil() as i64 + 2).max(0) as usize).min(e.height - 1);
        let c0 = (lo.x.floor() as i64 - 2).max(0) as usize;
        let c1 = ((hi.x.ceil() as i64 + 2).max(0) as usize).min(e.width - 1);
        for i in r0..=r1 {
            for j in c0..=c1 {
                let p = Point::new(j as f64, i as f64);
                let d = b.polygon.edges().map(|(a, q)| segment_distance(p, a, q)).fold(f64::INFINITY, f64::min);
                let k = 3 * (i * e.width + j);
                if b.polygon.contains(p) {
                    let dark = if d < 1.5 { 0.55 + 0.45 * d / 1.5 } else { 1.0 };
                    for c in 0..3 {
                        rgb[k + c] = fill[c] * dark;
                    }
                } else if d < 1.0 {
                    for c in 0..3 {
                        rgb[k + c] *= 0.6 + 0.4 * d;
                    }
                }
            }
        }
    }
    Ok(rgb
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            ((v + spec.noise_sigma * n).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect())
}

/// Generates one scene. Fully determined by `spec` (including its seed).
pub fn generate_scene(spec: &SceneSpec, image_id: &str) -> Result<Scene> {
    spec.validate()?;
    let e = spec.extent();
    let buildings = place_buildings(spec, image_id)?;
    let rgb = render(spec, &buildings)?;
    let image = normalize_rgb(&rgb, e)?;
    let truth = AnnotationSet::new(image_id, e, buildings.into_iter().map(|b| b.polygon).collect());
    let fs = spec.field_spec();
    let field = if spec.misalignment_at_cap { sample_gaussian_field_at_cap(&fs)? } else { sample_gaussian_field(&fs)? };
    let mut original = warp_annotations_forward(&truth, &field)?;
    if let Some(cap) = spec.building_offset_cap {
        original = offset_polygons(&original, cap, derive_seed(spec.seed, 3))?;
    }
    original.validate()?;
    Ok(Scene { rgb, image, truth, original, field })
}

fn fmt_coord(s: &mut String, v: f64) {
    // Avoid "-0.000000" so files are stable under tiny sign flips.
    let r = format!("{v:.6}");
    if r == "-0.000000" {
        s.push_str("0.000000");
    } else {
        s.push_str(&r);
    }
}

/// Serializes annotations as JSON with six decimals per coordinate.
pub fn annotations_to_json(a: &AnnotationSet) -> String {
    let mut s = String::new();
    let id = serde_json::to_string(&a.image_id).expect("string serializes");
    let _ = write!(s, "{{\"image_id\":{id},\"extent\":[{},{}],\"polygons\":[", a.extent.height, a.extent.width);
    for (k, poly) in a.polygons.iter().enumerate() {
        if k > 0 {
            s.push(',');
        }
        s.push_str("\n[");
        for (m, p) in poly.vertices().iter().enumerate() {
            if m > 0 {
                s.push(',');
            }
            s.push('[');
            fmt_coord(&mut s, p.x);
            s.push(',');
            fmt_coord(&mut s, p.y);
            s.push(']');
        }
        s.push(']');
    }
    s.push_str("]}\n");
    s
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    #[serde(default)]
    image_id: Option<String>,
    #[serde(default)]
    extent: Option<[usize; 2]>,
    polygons: Vec<Vec<[f64; 2]>>,
}

/// Byte offset of a `serde_json` error position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    line_start + column.saturating_sub(1)
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        Error::data(
            path,
            format!("invalid JSON at byte {}: {e}", byte_offset(text, e.line(), e.column())),
        )
    })
}

/// Parses annotation JSON. A missing `image_id` falls back to the file stem;
/// a missing extent to `fallback_extent`.
pub fn annotations_from_json(text: &str, path: &Path, fallback_extent: Option<Extent>) -> Result<AnnotationSet> {
    let file: AnnotationFile = parse_json(text, path)?;
    let extent = match (file.extent, fallback_extent) {
        (Some([h, w]), _) => Extent::new(h, w),
        (None, Some(e)) => e,
        (None, None) => return Err(Error::data(path, "annotation file has no extent")),
    };
    let id = file
        .image_id
        .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let polygons = file
        .polygons
        .into_iter()
        .enumerate()
        .map(|(k, ring)| {
            Polygon::new(ring.into_iter().map(|[x, y]| Point::new(x, y)).collect())
                .map_err(|e| Error::data(path, format!("polygon {k}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let a = AnnotationSet::new(id, extent, polygons);
    a.validate().map_err(|e| Error::data(path, e.to_string()))?;
    Ok(a)
}

pub fn save_annotations(a: &AnnotationSet, path: &Path) -> Result<()> {
    fs::write(path, annotations_to_json(a)).map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    annotations_from_json(&text, path, None)
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

/// One image of a dataset. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub annotations: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<PathBuf>,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest { version: MANIFEST_VERSION, entries: Vec::new() }
    }
}

pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: DatasetManifest = parse_json(&text, path)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::data(path, format!("unsupported manifest version {} (expected {MANIFEST_VERSION})", m.version)));
    }
    Ok(m)
}

/// A loaded image with its working annotations. The image is reflect-padded
/// on the right and bottom to a multiple of 8; coordinates are unchanged.
#[derive(Debug, Clone)]
pub struct DatasetImage {
    pub image_id: String,
    pub image: ImagePatch,
    pub original_extent: Extent,
    /// Annotations to align, with `extent` set to the padded extent.
    pub annotations: AnnotationSet,
    pub split: Split,
    /// Ground-truth location, for evaluation code only.
    pub truth_path: Option<PathBuf>,
    pub field_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub root: PathBuf,
    pub images: Vec<DatasetImage>,
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = load_manifest(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut images = Vec::with_capacity(manifest.entries.len());
    for (k, entry) in manifest.entries.iter().enumerate() {
        let wrap = |e: Error| match e {
            Error::Data { path, message } => Error::data(path, format!("manifest entry {k}: {message}")),
            Error::Io { path, source } => Error::data(path, format!("manifest entry {k}: {source}")),
            other => Error::data(manifest_path, format!("manifest entry {k}: {other}")),
        };
        let image_path = resolve(&root, &entry.image);
        let (extent, raw) = load_png_rgb(&image_path).map_err(wrap)?;
        let image = normalize_rgb(&raw, extent).map_err(wrap)?;
        let ann_path = resolve(&root, &entry.annotations);
        let text = fs::read_to_string(&ann_path).map_err(|e| wrap(Error::io(&ann_path, e)))?;
        let a = annotations_from_json(&text, &ann_path, Some(extent)).map_err(wrap)?;
        if a.extent != extent {
            return Err(wrap(Error::data(&ann_path, format!("annotation extent {} differs from image extent {extent}", a.extent))));
        }
        let padded = image.pad_reflect(8).map_err(wrap)?;
        images.push(DatasetImage {
            image_id: a.image_id.clone(),
            annotations: a.with_extent(padded.extent),
            image: padded,
            original_extent: extent,
            split: entry.split,
            truth_path: entry.truth.as_ref().map(|p| resolve(&root, p)),
            field_path: entry.field.as_ref().map(|p| resolve(&root, p)),
        });
    }
    Ok(Dataset { root, images })
}

/// Loads the hidden ground truth of an image, if the dataset has one.
pub fn load_truth(image: &DatasetImage) -> Result<Option<AnnotationSet>> {
    match &image.truth_path {
        None => Ok(None),
        Some(p) => {
            let a = load_annotations(p)?;
            Ok(Some(a.with_extent(image.annotations.extent)))
        }
    }
}

/// Writes a scene's image, annotations, truth and field under `dir`, named
/// after the image id, and returns the manifest entry.
pub fn save_scene(scene: &Scene, dir: &Path, split: Split) -> Result<ManifestEntry> {
    let id = &scene.truth.image_id;
    for sub in ["images", "annotations", "truth", "fields"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let entry = ManifestEntry {
        image: PathBuf::from(format!("images/{id}.png")),
        annotations: PathBuf::from(format!("annotations/{id}.json")),
        truth: Some(PathBuf::from(format!("truth/{id}.json"))),
        field: Some(PathBuf::from(format!("fields/{id}.dfld"))),
        split,
    };
    save_png_rgb(&dir.join(&entry.image), scene.image.extent, &scene.rgb)?;
    save_annotations(&scene.original, &dir.join(&entry.annotations))?;
    save_annotations(&scene.truth, &dir.join(entry.truth.as_ref().expect("set above")))?;
    save_field(&scene.field, &dir.join(entry.field.as_ref().expect("set above")))?;
    Ok(entry)
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:03}")
}

/// Generates `count` scenes with seeds derived from `spec.seed` and writes
/// them plus `manifest.json` to `dir`. Returns the manifest path.
pub fn synthesize(spec: &SceneSpec, count: usize, dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scenes: Vec<Scene> = (0..count)
        .into_par_iter()
        .map(|k| generate_scene(&SceneSpec { seed: derive_seed(spec.seed, 1000 + k as u64), ..spec.clone() }, &scene_id(k)))
        .collect::<Result<_>>()?;
    let mut manifest = DatasetManifest::default();
    for s in &scenes {
        manifest.entries.push(save_scene(s, dir, Split::Train)?);
    }
    let path = dir.join("manifest.json");
    save_manifest(&manifest, &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::vertex_distances;

    fn small() -> SceneSpec {
        SceneSpec { height: 128, width: 96, buildings: (4, 6), size: (10.0, 24.0), seed: 5, ..SceneSpec::default() }
    }

    #[test]
    fn zero_buildings_gives_empty_scene() {
        let s = generate_scene(&SceneSpec { buildings: (0, 0), ..small() }, "e").unwrap();
        assert!(s.truth.polygons.is_empty() && s.original.polygons.is_empty());
        assert_eq!(s.image.extent, Extent::new(128, 96));
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&small(), "x").unwrap();
        let b = generate_scene(&small(), "x").unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.original, b.original);
        let c = generate_scene(&SceneSpec { seed: 6, ..small() }, "x").unwrap();
        assert_ne!(a.rgb, c.rgb);
    }

    #[test]
    fn misalignment_within_cap() {
        for seed in 0..10 {
            let spec = SceneSpec { seed, ..small() };
            let s = generate_scene(&spec, "x").unwrap();
            assert!(!s.truth.polygons.is_empty());
            for r in vertex_distances(&s.original, &s.truth).unwrap() {
                assert!(r.distance <= spec.misalignment_cap * 2f64.sqrt() + 1e-9);
            }
            for (p, q) in s.truth.vertices().zip(s.original.vertices()) {
                assert!((q - p).max_abs() <= spec.misalignment_cap + 1e-9);
            }
        }
    }

    #[test]
    fn buildings_are_separated_and_inside() {
        let s = generate_scene(&SceneSpec { buildings: (20, 20), ..small() }, "x").unwrap();
        let e = s.truth.extent;
        for p in s.truth.vertices() {
            assert!(p.x > 0.0 && p.y > 0.0 && p.x < e.width as f64 && p.y < e.height as f64);
        }
        for (i, a) in s.truth.polygons.iter().enumerate() {
            for b in &s.truth.polygons[i + 1..] {
                assert!(a.vertices().iter().all(|&v| !b.contains(v)));
                assert!(b.vertices().iter().all(|&v| !a.contains(v)));
            }
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(SceneSpec { height: 60, ..small() }.validate().is_err());
        assert!(SceneSpec { width: 100, ..small() }.validate().is_err());
        assert!(SceneSpec { buildings: (3, 2), ..small() }.validate().is_err());
        assert!(SceneSpec { misalignment_cap: 100.0, ..small() }.validate().is_err());
    }

    #[test]
    fn annotation_json_round_trip() {
        let s = generate_scene(&small(), "scene \"q\"").unwrap();
        let text = annotations_to_json(&s.original);
        let back = annotations_from_json(&text, Path::new("a.json"), None).unwrap();
        assert_eq!(back.image_id, s.original.image_id);
        assert_eq!(back.extent, s.original.extent);
        for (p, q) in s.original.vertices().zip(back.vertices()) {
            assert!((p - q).max_abs() <= 5e-7);
        }
        assert_eq!(annotations_to_json(&back), text);
    }

    #[test]
    fn empty_and_large_annotation_files() {
        let e = AnnotationSet::empty("tile_5000", Extent::new(5000, 5000));
        let text = annotations_to_json(&e);
        assert!(text.contains("\"polygons\":[]"));
        let back = annotations_from_json(&text, Path::new("e.json"), None).unwrap();
        assert_eq!(back, e);
        let bare = annotations_from_json("{\"polygons\": []}", Path::new("dir/bare.json"), Some(Extent::new(8, 8))).unwrap();
        assert_eq!(bare.image_id, "bare");
        let p = Polygon::new(vec![Point::new(4999.123456, 0.5), Point::new(4000.0, 4999.999999), Point::new(1.0, 2.0)]).unwrap();
        let big = AnnotationSet::new("tile_5000", Extent::new(5000, 5000), vec![p]);
        let back = annotations_from_json(&annotations_to_json(&big), Path::new("b.json"), None).unwrap();
        assert_eq!(back, big);
    }

    #[test]
    fn corrupt_json_reports_byte_offset() {
        let text = "{\"image_id\":\"a\",\n\"extent\":[8,8],\n\"polygons\":[[[1,2],[3,4],[5 6]]]}";
        let err = annotations_from_json(text, Path::new("bad.json"), None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.json"), "{msg}");
        let at = text.find("6]").unwrap();
        assert!(msg.contains(&format!("byte {at}")), "{msg}");
    }

    #[test]
    fn invalid_polygons_rejected() {
        let text = "{\"image_id\":\"a\",\"extent\":[8,8],\"polygons\":[[[1,2],[3,4]]]}";
        assert!(matches!(annotations_from_json(text, Path::new("p.json"), None), Err(Error::Data { .. })));
        let far = "{\"image_id\":\"a\",\"extent\":[8,8],\"polygons\":[[[1,2],[3,4],[500,1]]]}";
        assert!(annotations_from_json(far, Path::new("p.json"), None).is_err());
    }

    #[test]
    fn synthesize_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { height: 96, width: 64, buildings: (2, 3), size: (8.0, 16.0), ..small() };
        let manifest = synthesize(&spec, 2, dir.path()).unwrap();
        let ds = load_dataset(&manifest).unwrap();
        assert_eq!(ds.images.len(), 2);
        let img = &ds.images[0];
        assert_eq!(img.original_extent, Extent::new(96, 64));
        assert!(img.image.extent.is_divisible_by(8));
        let direct = generate_scene(&SceneSpec { seed: derive_seed(spec.seed, 1000), ..spec.clone() }, &scene_id(0)).unwrap();
        assert_eq!(img.image, direct.image);
        let truth = load_truth(img).unwrap().unwrap();
        for (p, q) in truth.vertices().zip(direct.truth.vertices()) {
            assert!((p - q).max_abs() <= 5e-7);
        }
        // Saved annotations re-save to identical bytes.
        let a_path = dir.path().join("annotations/scene_000.json");
        let before = fs::read(&a_path).unwrap();
        save_annotations(&load_annotations(&a_path).unwrap(), &a_path).unwrap();
        assert_eq!(before, fs::read(&a_path).unwrap());
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_manifest(&DatasetManifest::default(), &path).unwrap();
        assert!(load_dataset(&path).unwrap().images.is_empty());
        fs::write(&path, "{\"version\": 7, \"entries\": []}").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Data { .. })));
        let m = DatasetManifest {
            version: 1,
            entries: vec![ManifestEntry {
                image: "missing.png".into(),
                annotations: "missing.json".into(),
                truth: None,
                field: None,
                split: Split::Eval,
            }],
        };
        save_manifest(&m, &path).unwrap();
        let msg = load_dataset(&path).unwrap_err().to_string();
        assert!(msg.contains("missing.png") && msg.contains("entry 0"), "{msg}");
    }
}
