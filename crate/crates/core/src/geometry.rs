//! Polygons, displacement fields and the warping operators between them.
//!
//! Coordinate convention used throughout the crate: `x` grows rightward
//! (column), `y` grows downward (row), and grid node `(i, j)` of any raster or
//! field sits at the pixel center `(x, y) = (j, i)`.
//!
//! A displacement field `f` is indexed by *aligned* positions: an aligned
//! vertex `v` is misaligned to `v' = v + f(v)`. Correcting a misaligned vertex
//! therefore means solving that relation for `v`.

use std::io::{Read, Write};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum distance a vertex may lie outside the image frame.
pub const FRAME_OVERHANG: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ZERO: Point = Point { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Largest absolute component.
    pub fn max_abs(self) -> f64 {
        self.x.abs().max(self.y.abs())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Point {
    fn add_assign(&mut self, o: Point) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

impl Neg for Point {
    type Output = Point;
    fn neg(self) -> Point {
        Point::new(-self.x, -self.y)
    }
}

/// Image size in pixels, `height` rows by `width` columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Extent {
    pub height: usize,
    pub width: usize,
}

impl Extent {
    pub const fn new(height: usize, width: usize) -> Self {
        Extent { height, width }
    }

    pub fn area(self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(self) -> bool {
        self.height == 0 || self.width == 0
    }

    pub fn is_divisible_by(self, k: usize) -> bool {
        self.height % k == 0 && self.width % k == 0
    }

    /// Smallest extent at least as large as `self` whose sides are multiples of `k`.
    pub fn padded_to(self, k: usize) -> Extent {
        Extent::new(self.height.div_ceil(k) * k, self.width.div_ceil(k) * k)
    }
}

impl std::fmt::Display for Extent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// A closed ring of vertices outlining one object; the last vertex connects
/// back to the first.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::domain(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if let Some(p) = vertices.iter().find(|p| !p.is_finite()) {
            return Err(Error::domain(format!("non-finite vertex {p:?}")));
        }
        Ok(Polygon { vertices })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Ring segments `(v[k], v[k+1])`, closing back to `v[0]`.
    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |k| (self.vertices[k], self.vertices[(k + 1) % n]))
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.vertices {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    pub fn centroid(&self) -> Point {
        let n = self.vertices.len() as f64;
        let s = self.vertices.iter().fold(Point::ZERO, |acc, &p| acc + p);
        s * (1.0 / n)
    }

    /// Even-odd point containment (crossing number).
    pub fn contains(&self, p: Point) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y > p.y) != (b.y > p.y) {
                let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Applies `op` to every vertex. Fails if the result is not finite.
    pub fn map_vertices(&self, mut op: impl FnMut(Point) -> Point) -> Result<Polygon> {
        Polygon::new(self.vertices.iter().map(|&p| op(p)).collect())
    }
}

/// All polygon annotations of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub image_id: String,
    pub extent: Extent,
    pub polygons: Vec<Polygon>,
}

impl AnnotationSet {
    pub fn new(image_id: impl Into<String>, extent: Extent, polygons: Vec<Polygon>) -> Self {
        AnnotationSet {
            image_id: image_id.into(),
            extent,
            polygons,
        }
    }

    pub fn empty(image_id: impl Into<String>, extent: Extent) -> Self {
        Self::new(image_id, extent, Vec::new())
    }

    pub fn vertex_count(&self) -> usize {
        self.polygons.iter().map(Polygon::len).sum()
    }

    pub fn vertices(&self) -> impl Iterator<Item = Point> + '_ {
        self.polygons.iter().flat_map(|p| p.vertices().iter().copied())
    }

    /// Checks the frame-overhang invariant.
    pub fn validate(&self) -> Result<()> {
        let w = self.extent.width as f64;
        let h = self.extent.height as f64;
        for (k, poly) in self.polygons.iter().enumerate() {
            for p in poly.vertices() {
                let ok = p.x >= -FRAME_OVERHANG
                    && p.x <= w + FRAME_OVERHANG
                    && p.y >= -FRAME_OVERHANG
                    && p.y <= h + FRAME_OVERHANG;
                if !ok {
                    return Err(Error::domain(format!(
                        "polygon {k} of {}: vertex ({}, {}) outside frame {} by more than {FRAME_OVERHANG} px",
                        self.image_id, p.x, p.y, self.extent
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn same_structure(&self, other: &AnnotationSet) -> bool {
        self.polygons.len() == other.polygons.len()
            && self
                .polygons
                .iter()
                .zip(&other.polygons)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn map_vertices(&self, mut op: impl FnMut(Point) -> Point) -> Result<AnnotationSet> {
        let polygons = self
            .polygons
            .iter()
            .map(|p| p.map_vertices(&mut op))
            .collect::<Result<_>>()?;
        Ok(AnnotationSet::new(self.image_id.clone(), self.extent, polygons))
    }

    /// Multiplies every coordinate by `scale` and relabels the extent.
    pub fn scaled(&self, scale: f64, extent: Extent) -> Result<AnnotationSet> {
        let mut out = self.map_vertices(|p| p * scale)?;
        out.extent = extent;
        Ok(out)
    }

    pub fn with_extent(mut self, extent: Extent) -> AnnotationSet {
        self.extent = extent;
        self
    }
}

/// Per-pixel 2D displacement vectors on an `H x W` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    extent: Extent,
    vectors: Vec<Point>,
}

impl DisplacementField {
    pub fn zeros(extent: Extent) -> Self {
        Self::constant(extent, Point::ZERO)
    }

    pub fn constant(extent: Extent, v: Point) -> Self {
        DisplacementField {
            extent,
            vectors: vec![v; extent.area()],
        }
    }

    pub fn from_vec(extent: Extent, vectors: Vec<Point>) -> Result<Self> {
        if vectors.len() != extent.area() {
            return Err(Error::domain(format!(
                "field extent {extent} needs {} vectors, got {}",
                extent.area(),
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("displacement field contains non-finite values"));
        }
        Ok(DisplacementField { extent, vectors })
    }

    /// Builds a field from `f(x, y)` evaluated at every pixel center.
    pub fn from_fn(extent: Extent, mut f: impl FnMut(f64, f64) -> Point) -> Self {
        let mut vectors = Vec::with_capacity(extent.area());
        for i in 0..extent.height {
            for j in 0..extent.width {
                vectors.push(f(j as f64, i as f64));
            }
        }
        DisplacementField { extent, vectors }
    }

    /// Two channel planes (dx, dy), row-major.
    pub fn from_channels(extent: Extent, dx: &[f64], dy: &[f64]) -> Result<Self> {
        if dx.len() != extent.area() || dy.len() != extent.area() {
            return Err(Error::domain("channel length does not match field extent"));
        }
        Self::from_vec(
            extent,
            dx.iter().zip(dy).map(|(&x, &y)| Point::new(x, y)).collect(),
        )
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn height(&self) -> usize {
        self.extent.height
    }

    pub fn width(&self) -> usize {
        self.extent.width
    }

    pub fn vectors(&self) -> &[Point] {
        &self.vectors
    }

    pub fn get(&self, row: usize, col: usize) -> Point {
        self.vectors[row * self.extent.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: Point) {
        self.vectors[row * self.extent.width + col] = v;
    }

    pub fn map(&self, op: impl Fn(Point) -> Point) -> DisplacementField {
        DisplacementField {
            extent: self.extent,
            vectors: self.vectors.iter().map(|&v| op(v)).collect(),
        }
    }

    /// `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &DisplacementField, beta: f64) -> Result<Self> {
        if self.extent != other.extent {
            return Err(Error::domain("field extents differ"));
        }
        Ok(DisplacementField {
            extent: self.extent,
            vectors: self
                .vectors
                .iter()
                .zip(&other.vectors)
                .map(|(&a, &b)| a * alpha + b * beta)
                .collect(),
        })
    }

    /// Bilinear interpolation with boundary clamping; caller guarantees a
    /// non-empty field.
    pub(crate) fn sample_unchecked(&self, p: Point) -> Point {
        let w = self.extent.width;
        let h = self.extent.height;
        let x = p.x.clamp(0.0, (w - 1) as f64);
        let y = p.y.clamp(0.0, (h - 1) as f64);
        let j0 = (x.floor() as usize).min(w - 1);
        let i0 = (y.floor() as usize).min(h - 1);
        let j1 = (j0 + 1).min(w - 1);
        let i1 = (i0 + 1).min(h - 1);
        let tx = x - j0 as f64;
        let ty = y - i0 as f64;
        let v00 = self.get(i0, j0);
        let v01 = self.get(i0, j1);
        let v10 = self.get(i1, j0);
        let v11 = self.get(i1, j1);
        // Difference form keeps constant fields exact.
        let top = v00 + (v01 - v00) * tx;
        let bottom = v10 + (v11 - v10) * tx;
        top + (bottom - top) * ty
    }

    /// Largest finite-difference step between neighbouring cells, an upper
    /// estimate of the field's Lipschitz constant (per component).
    pub fn lipschitz_estimate(&self) -> f64 {
        let (h, w) = (self.extent.height, self.extent.width);
        let mut worst: f64 = 0.0;
        for i in 0..h {
            for j in 0..w {
                let v = self.get(i, j);
                if j + 1 < w {
                    worst = worst.max((self.get(i, j + 1) - v).max_abs());
                }
                if i + 1 < h {
                    worst = worst.max((self.get(i + 1, j) - v).max_abs());
                }
            }
        }
        worst
    }
}

/// Evaluates `field` at a continuous point. Integer points return the stored
/// grid vector exactly; points outside the grid are clamped onto it first.
pub fn bilinear_sample(field: &DisplacementField, p: Point) -> Result<Point> {
    if field.extent.is_empty() {
        return Err(Error::domain("cannot sample an empty displacement field"));
    }
    Ok(field.sample_unchecked(p))
}

fn check_cover(a: &AnnotationSet, f: &DisplacementField) -> Result<()> {
    if f.extent.is_empty() {
        return Err(Error::domain("empty displacement field"));
    }
    if a.extent != f.extent {
        return Err(Error::domain(format!(
            "annotation extent {} does not match field extent {}",
            a.extent, f.extent
        )));
    }
    Ok(())
}

/// Misaligns annotations: every vertex `v` moves to `v + f(v)`.
pub fn warp_annotations_forward(a: &AnnotationSet, f: &DisplacementField) -> Result<AnnotationSet> {
    check_cover(a, f)?;
    a.map_vertices(|v| v + f.sample_unchecked(v))
}

/// How a misaligned vertex is pulled back through a displacement field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InverseMethod {
    /// Solve `v + f(v) = v'` by fixed-point iteration.
    #[default]
    FixedPoint,
    /// Single step `v = v' - f(v')`.
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub method: InverseMethod,
}

impl Default for InverseOptions {
    fn default() -> Self {
        InverseOptions {
            tol: 0.01,
            max_iter: 10,
            method: InverseMethod::FixedPoint,
        }
    }
}

/// Vertices whose fixed-point iteration did not reach the tolerance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceReport {
    /// `(polygon index, vertex index, final residual)`.
    pub unconverged: Vec<(usize, usize, f64)>,
    pub max_residual: f64,
}

impl ConvergenceReport {
    pub fn converged(&self) -> bool {
        self.unconverged.is_empty()
    }
}

/// Inverts [`warp_annotations_forward`]: finds `v` with `v + f(v) = v'` for
/// every misaligned vertex `v'`, iterating `x <- v' - f(x)` from `x = v'`.
pub fn align_annotations_inverse(
    a_misaligned: &AnnotationSet,
    f: &DisplacementField,
    opts: &InverseOptions,
) -> Result<(AnnotationSet, ConvergenceReport)> {
    check_cover(a_misaligned, f)?;
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::config("inverse needs tol > 0 and max_iter >= 1"));
    }
    let mut report = ConvergenceReport::default();
    let mut polygons = Vec::with_capacity(a_misaligned.polygons.len());
    for (pi, poly) in a_misaligned.polygons.iter().enumerate() {
        let mut verts = Vec::with_capacity(poly.len());
        for (vi, &target) in poly.vertices().iter().enumerate() {
            let (v, residual) = match opts.method {
                InverseMethod::FirstOrder => {
                    let v = target - f.sample_unchecked(target);
                    (v, (v + f.sample_unchecked(v) - target).norm())
                }
                InverseMethod::FixedPoint => invert_point(f, target, opts.tol, opts.max_iter),
            };
            report.max_residual = report.max_residual.max(residual);
            if opts.method == InverseMethod::FixedPoint && residual > opts.tol {
                report.unconverged.push((pi, vi, residual));
            }
            verts.push(v);
        }
        polygons.push(Polygon::new(verts)?);
    }
    Ok((
        AnnotationSet::new(a_misaligned.image_id.clone(), a_misaligned.extent, polygons),
        report,
    ))
}

/// Returns the last iterate and its residual `|x + f(x) - target|`.
pub(crate) fn invert_point(
    f: &DisplacementField,
    target: Point,
    tol: f64,
    max_iter: usize,
) -> (Point, f64) {
    let mut x = target;
    let mut r = x + f.sample_unchecked(x) - target;
    for _ in 0..max_iter {
        if r.norm() <= tol {
            break;
        }
        x = x - r;
        r = x + f.sample_unchecked(x) - target;
    }
    (x, r.norm())
}

/// Scale factors the multi-resolution pipeline works with.
pub const UPSAMPLE_FACTORS: [usize; 4] = [1, 2, 4, 8];

/// Promotes a field to `factor` times its resolution. Output pixel `(x, y)`
/// reads the input at `(x / factor, y / factor)`, and vectors are multiplied
/// by `factor` so they are measured in output pixels.
pub fn upsample_field(f: &DisplacementField, factor: usize) -> Result<DisplacementField> {
    if !UPSAMPLE_FACTORS.contains(&factor) {
        return Err(Error::config(format!(
            "upsample factor must be one of {UPSAMPLE_FACTORS:?}, got {factor}"
        )));
    }
    if f.extent.is_empty() {
        return Err(Error::domain("cannot upsample an empty field"));
    }
    if factor == 1 {
        return Ok(f.clone());
    }
    let k = factor as f64;
    let out = Extent::new(f.height() * factor, f.width() * factor);
    Ok(DisplacementField::from_fn(out, |x, y| {
        f.sample_unchecked(Point::new(x / k, y / k)) * k
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldStats {
    /// Max of `|dx|` and `|dy|` over all cells.
    pub max_abs: f64,
    pub mean_dx: f64,
    pub mean_dy: f64,
}

pub fn field_stats(f: &DisplacementField) -> Result<FieldStats> {
    if f.extent.is_empty() {
        return Err(Error::domain("field_stats of an empty field"));
    }
    let mut max_abs: f64 = 0.0;
    let mut sum = Point::ZERO;
    for &v in &f.vectors {
        max_abs = max_abs.max(v.max_abs());
        sum += v;
    }
    let n = f.vectors.len() as f64;
    Ok(FieldStats {
        max_abs,
        mean_dx: sum.x / n,
        mean_dy: sum.y / n,
    })
}

const FIELD_MAGIC: &[u8; 4] = b"DFLD";

/// Writes the binary field format: `"DFLD"`, `u32` height, `u32` width, then
/// `H*W` interleaved `(dx, dy)` little-endian `f32` pairs in row-major order.
pub fn write_field<W: Write>(f: &DisplacementField, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * f.vectors.len());
    buf.extend_from_slice(FIELD_MAGIC);
    buf.extend_from_slice(&(f.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(f.width() as u32).to_le_bytes());
    for v in &f.vectors {
        buf.extend_from_slice(&(v.x as f32).to_le_bytes());
        buf.extend_from_slice(&(v.y as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_field<R: Read>(mut r: R) -> Result<DisplacementField> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::domain(format!("reading field: {e}")))?;
    if bytes.len() < 12 || &bytes[..4] != FIELD_MAGIC {
        return Err(Error::domain("not a DFLD field file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let extent = Extent::new(u32_at(4), u32_at(8));
    let expected = 12 + extent.area() * 8;
    if bytes.len() != expected {
        return Err(Error::domain(format!(
            "field file for {extent} should be {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let vectors = (0..extent.area())
        .map(|k| Point::new(f32_at(12 + 8 * k), f32_at(16 + 8 * k)))
        .collect();
    DisplacementField::from_vec(extent, vectors)
}

pub fn save_field(f: &DisplacementField, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_field(f, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_field(path: &Path) -> Result<DisplacementField> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_field(std::io::BufReader::new(file)).map_err(|e| Error::data(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, s: f64) -> Polygon {
        Polygon::new(vec![
            Point::new(x0, y0),
            Point::new(x0 + s, y0),
            Point::new(x0 + s, y0 + s),
            Point::new(x0, y0 + s),
        ])
        .unwrap()
    }

    fn ramp_dx(extent: Extent, slope: f64) -> DisplacementField {
        DisplacementField::from_fn(extent, |x, _| Point::new(slope * x, 0.0))
    }

    fn two_by_two() -> DisplacementField {
        // dx rows [[0, 2], [4, 6]]
        DisplacementField::from_channels(Extent::new(2, 2), &[0.0, 2.0, 4.0, 6.0], &[0.0; 4])
            .unwrap()
    }

    #[test]
    fn polygon_rejects_degenerate_input() {
        assert!(Polygon::new(vec![Point::ZERO, Point::new(1.0, 0.0)]).is_err());
        assert!(Polygon::new(vec![Point::ZERO, Point::new(1.0, 0.0), Point::new(f64::NAN, 1.0)]).is_err());
    }

    #[test]
    fn sample_center_of_two_by_two() {
        let f = two_by_two();
        assert_eq!(bilinear_sample(&f, Point::new(0.5, 0.5)).unwrap().x, 3.0);
    }

    #[test]
    fn sample_at_node_is_exact() {
        let f = DisplacementField::from_fn(Extent::new(3, 4), |x, y| Point::new(x * 1.7 - y, y * 0.3));
        assert_eq!(bilinear_sample(&f, Point::new(1.0, 0.0)).unwrap(), f.get(0, 1));
        assert_eq!(bilinear_sample(&f, Point::new(3.0, 2.0)).unwrap(), f.get(2, 3));
    }

    #[test]
    fn sample_quarter_point_matches_weight_formula() {
        // Oracle: (1-tx)(1-ty) v00 + tx(1-ty) v01 + (1-tx) ty v10 + tx ty v11.
        let (tx, ty) = (0.25, 0.0);
        let oracle = (1.0 - tx) * (1.0 - ty) * 0.0
            + tx * (1.0 - ty) * 2.0
            + (1.0 - tx) * ty * 4.0
            + tx * ty * 6.0;
        assert_eq!(oracle, 0.5);
        let got = bilinear_sample(&two_by_two(), Point::new(0.25, 0.0)).unwrap().x;
        assert!((got - oracle).abs() < 1e-15);
    }

    #[test]
    fn sample_clamps_outside_domain() {
        let f = two_by_two();
        assert_eq!(bilinear_sample(&f, Point::new(-3.0, -1.0)).unwrap().x, 0.0);
        assert_eq!(bilinear_sample(&f, Point::new(9.0, 9.0)).unwrap().x, 6.0);
    }

    #[test]
    fn sample_empty_field_is_domain_error() {
        let f = DisplacementField::zeros(Extent::new(0, 5));
        assert!(matches!(bilinear_sample(&f, Point::ZERO), Err(Error::Domain(_))));
        assert!(matches!(field_stats(&f), Err(Error::Domain(_))));
    }

    #[test]
    fn forward_warp_zero_and_constant() {
        let e = Extent::new(32, 32);
        let a = AnnotationSet::new("a", e, vec![square(3.0, 4.0, 10.0), square(15.5, 12.25, 6.0)]);
        assert_eq!(warp_annotations_forward(&a, &DisplacementField::zeros(e)).unwrap(), a);
        let shifted =
            warp_annotations_forward(&a, &DisplacementField::constant(e, Point::new(3.0, -2.0))).unwrap();
        for (p, q) in a.vertices().zip(shifted.vertices()) {
            assert_eq!(q, p + Point::new(3.0, -2.0));
        }
    }

    #[test]
    fn forward_warp_linear_field() {
        let e = Extent::new(32, 32);
        let tri = Polygon::new(vec![Point::new(10.0, 5.0), Point::new(20.0, 5.0), Point::new(15.0, 9.0)]).unwrap();
        let a = AnnotationSet::new("a", e, vec![tri]);
        let out = warp_annotations_forward(&a, &ramp_dx(e, 0.1)).unwrap();
        // Oracle: v + (0.1 x, 0).
        for (p, q) in a.vertices().zip(out.vertices()) {
            let expect = Point::new(p.x + 0.1 * p.x, p.y);
            assert!((q - expect).norm() < 1e-12);
        }
        assert!((out.polygons[0].vertices()[0] - Point::new(11.0, 5.0)).norm() < 1e-12);
    }

    #[test]
    fn forward_warp_rejects_extent_mismatch() {
        let a = AnnotationSet::new("a", Extent::new(16, 16), vec![square(1.0, 1.0, 4.0)]);
        let f = DisplacementField::zeros(Extent::new(16, 8));
        assert!(matches!(warp_annotations_forward(&a, &f), Err(Error::Domain(_))));
    }

    #[test]
    fn inverse_of_constant_field() {
        let e = Extent::new(32, 32);
        let tri = Polygon::new(vec![Point::new(10.0, 10.0), Point::new(20.0, 10.0), Point::new(15.0, 20.0)]).unwrap();
        let a = AnnotationSet::new("a", e, vec![tri]);
        let opts = InverseOptions::default();
        let (zero, rep) = align_annotations_inverse(&a, &DisplacementField::zeros(e), &opts).unwrap();
        assert_eq!(zero, a);
        assert!(rep.converged());
        let f = DisplacementField::constant(e, Point::new(3.0, -2.0));
        let (out, _) = align_annotations_inverse(&a, &f, &opts).unwrap();
        assert_eq!(out.polygons[0].vertices()[0], Point::new(7.0, 12.0));
    }

    #[test]
    fn inverse_of_linear_ramp() {
        // Oracle: x + 0.2 x = 12  =>  x = 10.
        let e = Extent::new(4, 32);
        let f = ramp_dx(e, 0.2);
        let (v, r) = invert_point(&f, Point::new(12.0, 1.0), 1e-12, 200);
        assert!(r <= 1e-12);
        assert!((v.x - 10.0).abs() < 1e-10);
    }

    #[test]
    fn inverse_reports_unconverged_vertices() {
        let e = Extent::new(4, 64);
        let f = ramp_dx(e, 0.9);
        let a = AnnotationSet::new(
            "a",
            e,
            vec![Polygon::new(vec![Point::new(40.0, 1.0), Point::new(50.0, 1.0), Point::new(45.0, 2.0)]).unwrap()],
        );
        let opts = InverseOptions { tol: 1e-9, max_iter: 2, ..Default::default() };
        let (_, rep) = align_annotations_inverse(&a, &f, &opts).unwrap();
        assert_eq!(rep.unconverged.len(), 3);
        assert!(!rep.converged());
    }

    #[test]
    fn first_order_inverse_samples_at_misaligned_vertex() {
        let e = Extent::new(4, 32);
        let f = ramp_dx(e, 0.2);
        let a = AnnotationSet::new(
            "a",
            e,
            vec![Polygon::new(vec![Point::new(12.0, 1.0), Point::new(20.0, 1.0), Point::new(15.0, 2.0)]).unwrap()],
        );
        let opts = InverseOptions { method: InverseMethod::FirstOrder, ..Default::default() };
        let (out, rep) = align_annotations_inverse(&a, &f, &opts).unwrap();
        assert!(rep.converged());
        assert!((out.polygons[0].vertices()[0].x - (12.0 - 2.4)).abs() < 1e-12);
    }

    #[test]
    fn upsample_identity_and_constant() {
        let f = DisplacementField::from_fn(Extent::new(3, 5), |x, y| Point::new(x - y, x * y));
        assert_eq!(upsample_field(&f, 1).unwrap(), f);
        let c = DisplacementField::constant(Extent::new(4, 4), Point::new(1.0, 0.0));
        let up = upsample_field(&c, 8).unwrap();
        assert_eq!(up.extent(), Extent::new(32, 32));
        assert!(up.vectors().iter().all(|&v| v == Point::new(8.0, 0.0)));
    }

    #[test]
    fn upsample_linear_ramp_matches_closed_form() {
        // Coarse ramp g(u, w) = (0.5 u + 1, -0.25 w). Output pixel (x, y) reads
        // the coarse grid at (x/2, y/2) and scales by 2; inside the coarse
        // domain the closed form is exact.
        let coarse = DisplacementField::from_fn(Extent::new(6, 8), |u, w| Point::new(0.5 * u + 1.0, -0.25 * w));
        let up = upsample_field(&coarse, 2).unwrap();
        for i in 0..up.height() {
            for j in 0..up.width() {
                let (u, w) = ((j as f64 / 2.0).min(7.0), (i as f64 / 2.0).min(5.0));
                let expect = Point::new(2.0 * (0.5 * u + 1.0), 2.0 * (-0.25 * w));
                assert!((up.get(i, j) - expect).norm() < 1e-6, "({i},{j})");
            }
        }
    }

    #[test]
    fn upsample_rejects_bad_factor() {
        let f = DisplacementField::zeros(Extent::new(2, 2));
        assert!(matches!(upsample_field(&f, 3), Err(Error::Config(_))));
        assert!(matches!(upsample_field(&f, 16), Err(Error::Config(_))));
    }

    #[test]
    fn stats_of_constant_fields() {
        let e = Extent::new(5, 7);
        let s = field_stats(&DisplacementField::zeros(e)).unwrap();
        assert_eq!((s.max_abs, s.mean_dx, s.mean_dy), (0.0, 0.0, 0.0));
        let s = field_stats(&DisplacementField::constant(e, Point::new(3.0, -2.0))).unwrap();
        assert_eq!((s.max_abs, s.mean_dx, s.mean_dy), (3.0, 3.0, -2.0));
    }

    #[test]
    fn stats_match_double_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let e = Extent::new(13, 17);
        let f = DisplacementField::from_fn(e, |_, _| Point::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)));
        let s = field_stats(&f).unwrap();
        let (mut mx, mut sx, mut sy) = (0.0f64, 0.0, 0.0);
        for i in 0..e.height {
            for j in 0..e.width {
                let v = f.get(i, j);
                mx = mx.max(v.x.abs()).max(v.y.abs());
                sx += v.x;
                sy += v.y;
            }
        }
        assert_eq!(s.max_abs, mx);
        assert_eq!(s.mean_dx, sx / e.area() as f64);
        assert_eq!(s.mean_dy, sy / e.area() as f64);
    }

    #[test]
    fn field_file_layout() {
        let f = DisplacementField::from_fn(Extent::new(2, 3), |x, y| Point::new(x + 0.5, -y));
        let mut buf = Vec::new();
        write_field(&f, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"DFLD");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(buf.len(), 12 + 2 * 3 * 8);
        // cell (0, 1): dx = 1.5, dy = -0
        assert_eq!(f32::from_le_bytes(buf[20..24].try_into().unwrap()), 1.5);
        assert_eq!(read_field(&buf[..]).unwrap(), f);
        assert!(read_field(&buf[..20]).is_err());
    }

    #[test]
    fn annotation_overhang_invariant() {
        let e = Extent::new(32, 32);
        assert!(AnnotationSet::new("a", e, vec![square(-60.0, 90.0, 4.0)]).validate().is_ok());
        assert!(AnnotationSet::new("a", e, vec![square(-70.0, 0.0, 4.0)]).validate().is_err());
    }

    #[test]
    fn contains_uses_even_odd() {
        let s = square(2.5, 2.5, 4.0);
        assert!(s.contains(Point::new(3.0, 3.0)));
        assert!(!s.contains(Point::new(7.0, 3.0)));
    }
}
