//! Smooth random displacement fields.
//!
//! A field is built per coordinate channel from white Gaussian noise on a
//! coarse lattice (spacing at least the correlation length), bilinearly
//! interpolated to full resolution and rescaled so its peak equals an
//! amplitude drawn uniformly from `(0, amplitude_cap]`.
//!
//! Randomness comes from ChaCha8 seeded with the spec's `seed`; derived seeds
//! use a SplitMix64 finalizer, so results do not depend on platform or on how
//! work is distributed across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{warp_annotations_forward, AnnotationSet, DisplacementField, Extent, Point};

/// Amplitude cap of self-supervision fields at full resolution.
pub const DEFAULT_AMPLITUDE_CAP: f64 = 32.0;
/// Amplitude cap of the extra misalignment in the noisier experiment.
pub const NOISIER_AMPLITUDE_CAP: f64 = 16.0;
pub const MAX_AMPLITUDE_CAP: f64 = 64.0;
pub const MIN_CORRELATION_LENGTH: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub extent: Extent,
    pub amplitude_cap: f64,
    pub correlation_length: f64,
    pub seed: u64,
}

impl FieldSpec {
    /// Cap of 32 px and correlation length of a quarter of the height.
    pub fn new(extent: Extent, seed: u64) -> Self {
        FieldSpec {
            extent,
            amplitude_cap: DEFAULT_AMPLITUDE_CAP,
            correlation_length: default_correlation_length(extent),
            seed,
        }
    }

    pub fn noisier(extent: Extent, seed: u64) -> Self {
        FieldSpec {
            amplitude_cap: NOISIER_AMPLITUDE_CAP,
            ..FieldSpec::new(extent, seed)
        }
    }

    pub fn with_cap(mut self, cap: f64) -> Self {
        self.amplitude_cap = cap;
        self
    }

    pub fn with_correlation_length(mut self, len: f64) -> Self {
        self.correlation_length = len;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent.is_empty() {
            return Err(Error::config("field spec extent must be positive"));
        }
        if !(self.amplitude_cap > 0.0 && self.amplitude_cap <= MAX_AMPLITUDE_CAP) {
            return Err(Error::config(format!(
                "amplitude_cap must be in (0, {MAX_AMPLITUDE_CAP}], got {}",
                self.amplitude_cap
            )));
        }
        let max_len = self.extent.height.min(self.extent.width) as f64;
        if !(self.correlation_length >= MIN_CORRELATION_LENGTH && self.correlation_length <= max_len) {
            return Err(Error::config(format!(
                "correlation_length must be in [{MIN_CORRELATION_LENGTH}, {max_len}], got {}",
                self.correlation_length
            )));
        }
        Ok(())
    }
}

pub fn default_correlation_length(extent: Extent) -> f64 {
    (extent.height as f64 / 4.0).max(MIN_CORRELATION_LENGTH)
}

/// SplitMix64 finalizer over `(master, index)`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The generator every sampler in this crate uses.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Lattice node count along an axis of `n` pixels so that node spacing is at
/// least `len`.
fn lattice_nodes(n: usize, len: f64) -> usize {
    if n <= 1 {
        return 1;
    }
    ((n - 1) as f64 / len).floor() as usize + 1
}

/// Bilinear interpolation of a coarse lattice onto `n_rows x n_cols` pixels.
fn interpolate_lattice(nodes: &[f64], ny: usize, nx: usize, extent: Extent) -> Vec<f64> {
    let coord = |k: usize, n: usize, nodes: usize| -> (usize, usize, f64) {
        if nodes == 1 || n <= 1 {
            return (0, 0, 0.0);
        }
        let t = k as f64 * (nodes - 1) as f64 / (n - 1) as f64;
        let a = (t.floor() as usize).min(nodes - 2);
        (a, a + 1, t - a as f64)
    };
    let mut out = Vec::with_capacity(extent.area());
    for i in 0..extent.height {
        let (r0, r1, ty) = coord(i, extent.height, ny);
        for j in 0..extent.width {
            let (c0, c1, tx) = coord(j, extent.width, nx);
            let top = nodes[r0 * nx + c0] * (1.0 - tx) + nodes[r0 * nx + c1] * tx;
            let bottom = nodes[r1 * nx + c0] * (1.0 - tx) + nodes[r1 * nx + c1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Samples a smooth zero-mean random field for `spec`.
///
/// The peak lattice value across both channels is scaled to the drawn
/// amplitude; interpolation never exceeds lattice extremes, so the cap holds
/// everywhere and neighbouring pixels differ by at most
/// `2 * amplitude / correlation_length`.
pub fn sample_gaussian_field(spec: &FieldSpec) -> Result<DisplacementField> {
    sample_field(spec, false)
}

/// Like [`sample_gaussian_field`] but the peak always equals the cap.
pub fn sample_gaussian_field_at_cap(spec: &FieldSpec) -> Result<DisplacementField> {
    sample_field(spec, true)
}

fn sample_field(spec: &FieldSpec, at_cap: bool) -> Result<DisplacementField> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let ny = lattice_nodes(spec.extent.height, spec.correlation_length);
    let nx = lattice_nodes(spec.extent.width, spec.correlation_length);
    let mut draw = || -> Vec<f64> { (0..ny * nx).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
    let dx_nodes = draw();
    let dy_nodes = draw();
    let amplitude = if at_cap { spec.amplitude_cap } else { spec.amplitude_cap * (1.0 - rng.random::<f64>()) };
    let peak = dx_nodes
        .iter()
        .chain(&dy_nodes)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { amplitude / peak } else { 0.0 };
    let dx = interpolate_lattice(&dx_nodes, ny, nx, spec.extent);
    let dy = interpolate_lattice(&dy_nodes, ny, nx, spec.extent);
    let vectors = dx
        .iter()
        .zip(&dy)
        .map(|(&x, &y)| Point::new(x * gain, y * gain))
        .collect();
    DisplacementField::from_vec(spec.extent, vectors)
}

/// Misaligns annotations with a fresh random field and returns that field as
/// ground truth.
pub fn corrupt_annotations(a: &AnnotationSet, spec: &FieldSpec) -> Result<(AnnotationSet, DisplacementField)> {
    if spec.extent != a.extent {
        return Err(Error::domain(format!(
            "field spec extent {} does not cover annotations extent {}",
            spec.extent, a.extent
        )));
    }
    let f = sample_gaussian_field(spec)?;
    let out = warp_annotations_forward(a, &f)?;
    Ok((out, f))
}

/// Moves each polygon rigidly by an independent uniform offset in
/// `[-cap, cap]^2`. Used to mimic per-building annotation error, which smooth
/// fields cannot represent.
pub fn offset_polygons(a: &AnnotationSet, cap: f64, seed: u64) -> Result<AnnotationSet> {
    let mut rng = rng_from_seed(seed);
    let mut out = a.clone();
    for poly in out.polygons.iter_mut() {
        let d = Point::new(rng.random_range(-cap..=cap), rng.random_range(-cap..=cap));
        *poly = poly.map_vertices(|p| p + d)?;
    }
    Ok(out)
}
