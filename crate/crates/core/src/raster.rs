//! Network input tensors: the boolean polygon raster (interior, edge,
//! vertices) and the normalized RGB patch, plus the four-level pyramid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnnotationSet, Extent, Point};

/// One level of the coarse-to-fine pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scale {
    Eighth,
    Quarter,
    Half,
    Full,
}

impl Scale {
    /// Coarse to fine.
    pub const ALL: [Scale; 4] = [Scale::Eighth, Scale::Quarter, Scale::Half, Scale::Full];

    /// Downscaling factor relative to full resolution.
    pub fn factor(self) -> usize {
        match self {
            Scale::Eighth => 8,
            Scale::Quarter => 4,
            Scale::Half => 2,
            Scale::Full => 1,
        }
    }

    pub fn value(self) -> f64 {
        1.0 / self.factor() as f64
    }

    pub fn index(self) -> usize {
        match self {
            Scale::Eighth => 0,
            Scale::Quarter => 1,
            Scale::Half => 2,
            Scale::Full => 3,
        }
    }

    /// Short tag used in file names and logs.
    pub fn tag(self) -> &'static str {
        match self {
            Scale::Eighth => "s8",
            Scale::Quarter => "s4",
            Scale::Half => "s2",
            Scale::Full => "s1",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Scale> {
        Scale::ALL.into_iter().find(|s| s.tag() == tag)
    }

    pub fn from_factor(factor: usize) -> Option<Scale> {
        Scale::ALL.into_iter().find(|s| s.factor() == factor)
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "1/{}", self.factor())
    }
}

/// Single-channel boolean plane stored as 0/1 bytes, row-major.
pub type Mask = Vec<u8>;

/// Three boolean planes describing polygons: interior, edge, vertices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterTriple {
    pub extent: Extent,
    pub interior: Mask,
    pub edge: Mask,
    pub vertices: Mask,
}

impl RasterTriple {
    pub fn zeros(extent: Extent) -> Self {
        let n = extent.area();
        RasterTriple {
            extent,
            interior: vec![0; n],
            edge: vec![0; n],
            vertices: vec![0; n],
        }
    }

    pub fn channels(&self) -> [&Mask; 3] {
        [&self.interior, &self.edge, &self.vertices]
    }

    pub fn is_all_zero(&self) -> bool {
        self.channels().iter().all(|c| c.iter().all(|&v| v == 0))
    }

    /// Sub-window starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, extent: Extent) -> Result<RasterTriple> {
        check_window(self.extent, row, col, extent)?;
        let cut = |m: &Mask| crop_plane(m, self.extent.width, row, col, extent);
        Ok(RasterTriple {
            extent,
            interior: cut(&self.interior),
            edge: cut(&self.edge),
            vertices: cut(&self.vertices),
        })
    }
}

/// Three-channel RGB patch with values in `[-1, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub extent: Extent,
    /// `3 * H * W` values, one full plane per channel.
    pub data: Vec<f32>,
}

impl ImagePatch {
    pub fn new(extent: Extent, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * extent.area() {
            return Err(Error::domain(format!(
                "image patch {extent} needs {} values, got {}",
                3 * extent.area(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < -1.0 || *v > 1.0) {
            return Err(Error::domain("image patch values must be finite and within [-1, 1]"));
        }
        Ok(ImagePatch { extent, data })
    }

    pub fn constant(extent: Extent, rgb: [f32; 3]) -> Self {
        let n = extent.area();
        let mut data = Vec::with_capacity(3 * n);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, n));
        }
        ImagePatch { extent, data }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.extent.area();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn crop(&self, row: usize, col: usize, extent: Extent) -> Result<ImagePatch> {
        check_window(self.extent, row, col, extent)?;
        let mut data = Vec::with_capacity(3 * extent.area());
        for c in 0..3 {
            data.extend(crop_plane(self.channel(c), self.extent.width, row, col, extent));
        }
        Ok(ImagePatch { extent, data })
    }

    /// Pads right and bottom by mirror reflection (edge pixel not repeated)
    /// so both sides become multiples of `k`.
    pub fn pad_reflect(&self, k: usize) -> Result<ImagePatch> {
        let out = self.extent.padded_to(k);
        if out == self.extent {
            return Ok(self.clone());
        }
        let (h, w) = (self.extent.height, self.extent.width);
        if h < 2 || w < 2 || out.height - h >= h || out.width - w >= w {
            return Err(Error::domain(format!("image {} too small to reflect-pad to {out}", self.extent)));
        }
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        let mut data = Vec::with_capacity(3 * out.area());
        for c in 0..3 {
            let plane = self.channel(c);
            for i in 0..out.height {
                let si = reflect(i, h);
                for j in 0..out.width {
                    data.push(plane[si * w + reflect(j, w)]);
                }
            }
        }
        Ok(ImagePatch { extent: out, data })
    }
}

fn check_window(outer: Extent, row: usize, col: usize, win: Extent) -> Result<()> {
    if row + win.height > outer.height || col + win.width > outer.width {
        return Err(Error::domain(format!(
            "window {win} at ({row}, {col}) exceeds extent {outer}"
        )));
    }
    Ok(())
}

fn crop_plane<T: Copy>(plane: &[T], width: usize, row: usize, col: usize, win: Extent) -> Vec<T> {
    let mut out = Vec::with_capacity(win.area());
    for i in row..row + win.height {
        out.extend_from_slice(&plane[i * width + col..i * width + col + win.width]);
    }
    out
}

fn round_to_pixel(p: Point) -> (i64, i64) {
    ((p.x + 0.5).floor() as i64, (p.y + 0.5).floor() as i64)
}

fn set_if_inside(mask: &mut Mask, extent: Extent, x: i64, y: i64) {
    if x >= 0 && y >= 0 && (x as usize) < extent.width && (y as usize) < extent.height {
        mask[y as usize * extent.width + x as usize] = 1;
    }
}

/// Rasterizes polygons into interior, edge and vertex channels.
///
/// * interior: pixel centers inside any polygon under the even-odd rule;
/// * edge: pixels hit by a DDA walk along each ring segment (1 px wide);
/// * vertices: the rounded position of each vertex.
///
/// Geometry outside the frame contributes nothing.
pub fn rasterize_triple(a: &AnnotationSet, extent: Extent) -> RasterTriple {
    let mut out = RasterTriple::zeros(extent);
    if extent.is_empty() {
        return out;
    }
    let mut crossings = Vec::new();
    for poly in &a.polygons {
        let (lo, hi) = poly.bounds();
        let row_start = lo.y.ceil().max(0.0) as usize;
        let row_end = (hi.y.floor().min(extent.height as f64 - 1.0)).max(-1.0);
        if row_end >= 0.0 {
            for i in row_start..=row_end as usize {
                let y = i as f64;
                crossings.clear();
                for (p, q) in poly.edges() {
                    if (p.y > y) != (q.y > y) {
                        crossings.push(p.x + (y - p.y) * (q.x - p.x) / (q.y - p.y));
                    }
                }
                crossings.sort_by(|a, b| a.total_cmp(b));
                // Pixel x is inside iff an odd number of crossings lie strictly
                // to its right, i.e. x in [c_2k, c_2k+1).
                for pair in crossings.chunks_exact(2) {
                    let j0 = pair[0].ceil().max(0.0);
                    let j1 = pair[1].ceil().min(extent.width as f64);
                    if j1 > j0 {
                        let row = &mut out.interior[i * extent.width..(i + 1) * extent.width];
                        row[j0 as usize..j1 as usize].fill(1);
                    }
                }
            }
        }
        for (p, q) in poly.edges() {
            let d = q - p;
            let steps = d.max_abs().ceil().max(1.0) as usize;
            for t in 0..=steps {
                let (x, y) = round_to_pixel(p + d * (t as f64 / steps as f64));
                set_if_inside(&mut out.edge, extent, x, y);
            }
        }
        for &v in poly.vertices() {
            let (x, y) = round_to_pixel(v);
            set_if_inside(&mut out.vertices, extent, x, y);
        }
    }
    out
}

/// Downsampling applies per type: block mean for images, block max for masks.
pub trait Downsample: Sized {
    fn downsample(&self, factor: usize) -> Result<Self>;
}

fn check_factor(extent: Extent, factor: usize) -> Result<Extent> {
    if !matches!(factor, 1 | 2 | 4 | 8) {
        return Err(Error::config(format!("downsample factor must be 1, 2, 4 or 8, got {factor}")));
    }
    if !extent.is_divisible_by(factor) {
        return Err(Error::domain(format!("extent {extent} is not divisible by {factor}")));
    }
    Ok(Extent::new(extent.height / factor, extent.width / factor))
}

fn pool_plane<T: Copy>(
    plane: &[T],
    extent: Extent,
    factor: usize,
    init: T,
    mut fold: impl FnMut(T, T) -> T,
) -> Vec<T> {
    let out = Extent::new(extent.height / factor, extent.width / factor);
    let mut res = vec![init; out.area()];
    for i in 0..extent.height {
        let oi = i / factor;
        for j in 0..extent.width {
            let cell = &mut res[oi * out.width + j / factor];
            *cell = fold(*cell, plane[i * extent.width + j]);
        }
    }
    res
}

impl Downsample for ImagePatch {
    fn downsample(&self, factor: usize) -> Result<Self> {
        let out = check_factor(self.extent, factor)?;
        if factor == 1 {
            return Ok(self.clone());
        }
        let norm = 1.0 / (factor * factor) as f32;
        let mut data = Vec::with_capacity(3 * out.area());
        for c in 0..3 {
            let sums = pool_plane(self.channel(c), self.extent, factor, 0.0f32, |a, b| a + b);
            data.extend(sums.into_iter().map(|s| (s * norm).clamp(-1.0, 1.0)));
        }
        Ok(ImagePatch { extent: out, data })
    }
}

impl Downsample for RasterTriple {
    fn downsample(&self, factor: usize) -> Result<Self> {
        let out = check_factor(self.extent, factor)?;
        let pool = |m: &Mask| pool_plane(m, self.extent, factor, 0u8, u8::max);
        Ok(RasterTriple {
            extent: out,
            interior: pool(&self.interior),
            edge: pool(&self.edge),
            vertices: pool(&self.vertices),
        })
    }
}

/// Generic entry point mirroring the trait.
pub fn downsample_raster<T: Downsample>(r: &T, factor: usize) -> Result<T> {
    r.downsample(factor)
}

/// Maps 8-bit interleaved RGB to `[-1, 1]` with `v / 127.5 - 1`.
pub fn normalize_rgb(raw: &[u8], extent: Extent) -> Result<ImagePatch> {
    if raw.len() != 3 * extent.area() {
        return Err(Error::domain(format!(
            "RGB buffer for {extent} needs {} bytes, got {}",
            3 * extent.area(),
            raw.len()
        )));
    }
    let n = extent.area();
    let mut data = vec![0.0f32; 3 * n];
    for (k, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + k] = (px[c] as f64 / 127.5 - 1.0) as f32;
        }
    }
    Ok(ImagePatch { extent, data })
}

/// Inverse of [`normalize_rgb`], rounding to the nearest byte.
pub fn denormalize_rgb(img: &ImagePatch) -> Vec<u8> {
    let n = img.extent.area();
    let mut raw = vec![0u8; 3 * n];
    for k in 0..n {
        for c in 0..3 {
            let v = (img.data[c * n + k] as f64 + 1.0) * 127.5;
            raw[3 * k + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    raw
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub scale: Scale,
    pub image: ImagePatch,
    pub annotations: AnnotationSet,
}

/// Builds the four pyramid levels, coarse to fine. Annotations are scaled by
/// multiplying coordinates by the level's scale; images by block mean.
pub fn build_pyramid(image: &ImagePatch, a: &AnnotationSet) -> Result<Vec<PyramidLevel>> {
    if !image.extent.is_divisible_by(8) {
        return Err(Error::domain(format!(
            "pyramid needs an extent divisible by 8, got {} (pad first)",
            image.extent
        )));
    }
    Scale::ALL
        .iter()
        .map(|&scale| {
            let img = image.downsample(scale.factor())?;
            let ann = a.scaled(scale.value(), img.extent)?;
            Ok(PyramidLevel { scale, image: img, annotations: ann })
        })
        .collect()
}

/// Reads a PNG (any color type) as an RGB byte buffer.
pub fn load_png_rgb(path: &Path) -> Result<(Extent, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::data(path, format!("cannot decode image: {e}")))?
        .to_rgb8();
    let extent = Extent::new(img.height() as usize, img.width() as usize);
    Ok((extent, img.into_raw()))
}

pub fn save_png_rgb(path: &Path, extent: Extent, raw: &[u8]) -> Result<()> {
    image::save_buffer(
        path,
        raw,
        extent.width as u32,
        extent.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::data(path, format!("cannot encode PNG: {e}")))
}

pub fn load_image_patch(path: &Path) -> Result<ImagePatch> {
    let (extent, raw) = load_png_rgb(path)?;
    normalize_rgb(&raw, extent)
}

/// Writes `<stem>_interior.png`, `<stem>_edge.png`, `<stem>_vertices.png`
/// into `dir` as 0/255 grayscale images.
pub fn export_raster_debug(r: &RasterTriple, dir: &Path, stem: &str) -> Result<()> {
    for (name, plane) in ["interior", "edge", "vertices"].iter().zip(r.channels()) {
        let path = dir.join(format!("{stem}_{name}.png"));
        let gray: Vec<u8> = plane.iter().map(|&v| v * 255).collect();
        image::save_buffer(
            &path,
            &gray,
            r.extent.width as u32,
            r.extent.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| Error::data(&path, format!("cannot encode PNG: {e}")))?;
    }
    Ok(())
}
