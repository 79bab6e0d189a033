//! Convolutional encoder-decoder mapping an (image, polygon raster) pair to a
//! displacement map and segmentation logits, with hand-derived reverse-mode
//! gradients.
//!
//! Layout for depth `L` and widths `w[0..L]`:
//!
//! ```text
//! input (6 = RGB + interior/edge/vertices)
//!   level l: [pool] -> block -> block        (skip_l)
//!   for l = L-2 .. 0: up2(cur) ++ skip_l -> block -> block
//!   block = conv3x3 -> group norm -> SiLU
//!   displacement head: conv3x3 -> range * tanh   (2 channels)
//!   segmentation head: conv3x3                   (3 channels, logits)
//! ```

pub mod gradcheck;
pub mod ops;

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deform::rng_from_seed;
use crate::error::{Error, Result};
use crate::geometry::{DisplacementField, Point};
use crate::raster::{ImagePatch, RasterTriple, Scale};

pub use ops::{ConvLayer, Real, Tensor};

pub const INPUT_CHANNELS: usize = 6;
pub const DISP_CHANNELS: usize = 2;
pub const SEG_CHANNELS: usize = 3;
/// Output range of the displacement head in pixels at the model's scale.
pub const DISP_RANGE: f64 = 4.0;

/// How the image and raster inputs enter the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputFusion {
    /// Both inputs stacked as 6 channels at the first convolution.
    #[default]
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    /// Channel width per level; the depth is `widths.len()`.
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    #[serde(default)]
    pub fusion: InputFusion,
    /// Upper bound on group-norm groups per hidden layer; 0 disables it.
    #[serde(default = "default_norm_groups")]
    pub norm_groups: usize,
}

pub const DEFAULT_NORM_GROUPS: usize = 4;

fn default_norm_groups() -> usize {
    DEFAULT_NORM_GROUPS
}

impl ArchDescriptor {
    pub fn new(widths: Vec<usize>) -> Self {
        ArchDescriptor { widths, kernel_size: 3, fusion: InputFusion::Concat, norm_groups: DEFAULT_NORM_GROUPS }
    }

    /// Depth 3, widths (16, 32, 64).
    pub fn desk() -> Self {
        Self::new(vec![16, 32, 64])
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Spatial extents must be multiples of this.
    pub fn required_divisor(&self) -> usize {
        1 << self.depth().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::config("architecture depth must be at least 1"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("architecture widths must be at least 1"));
        }
        if self.kernel_size != 3 {
            return Err(Error::config(format!("only 3x3 kernels are supported, got {}", self.kernel_size)));
        }
        Ok(())
    }

    /// `(in_channels, out_channels)` of every convolution in parameter order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let w = &self.widths;
        let mut shapes = Vec::new();
        for (l, &width) in w.iter().enumerate() {
            let cin = if l == 0 { INPUT_CHANNELS } else { w[l - 1] };
            shapes.push((cin, width));
            shapes.push((width, width));
        }
        for l in (0..w.len() - 1).rev() {
            shapes.push((w[l] + w[l + 1], w[l]));
            shapes.push((w[l], w[l]));
        }
        shapes.push((w[0], DISP_CHANNELS));
        shapes.push((w[0], SEG_CHANNELS));
        shapes
    }

    /// Hidden convolutions feed a normalization that cancels any bias, so
    /// only the heads carry one when normalization is on.
    pub fn layer_has_bias(&self, index: usize) -> bool {
        self.norm_groups == 0 || index + 2 >= self.layer_shapes().len()
    }

    /// Zero-filled layers in parameter order.
    pub fn zero_layers<T: Real>(&self) -> Vec<ConvLayer<T>> {
        self.layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(k, (i, o))| {
                let mut l = ConvLayer::zeros(i, o);
                if !self.layer_has_bias(k) {
                    l.bias.clear();
                }
                l
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.zero_layers::<f32>().iter().map(ConvLayer::param_count).sum()
    }
}

/// Weights of one per-scale network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: ArchDescriptor,
    pub scale: Scale,
    pub layers: Vec<ConvLayer<T>>,
}

/// Gradient for every parameter, same layout as [`ModelParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(m: &ModelParams<T>) -> Self {
        Grads {
            layers: m
                .layers
                .iter()
                .map(|l| ConvLayer { bias: vec![T::zero(); l.bias.len()], ..ConvLayer::zeros(l.in_ch, l.out_ch) })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.weight.iter_mut().zip(&b.weight) {
                *x += y;
            }
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in self.iter_mut() {
            *v *= s;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// He-uniform weights (`U(-a, a)`, `a = sqrt(6 / fan_in)`), zero biases.
pub fn init_model<T: Real>(arch: &ArchDescriptor, scale: Scale, seed: u64) -> Result<ModelParams<T>> {
    arch.validate()?;
    let mut rng = rng_from_seed(seed);
    let layers = arch
        .zero_layers()
        .into_iter()
        .map(|mut layer: ConvLayer<T>| {
            let bound = (6.0 / (layer.in_ch * 9) as f64).sqrt();
            for w in layer.weight.iter_mut() {
                *w = T::of(rng.random_range(-bound..bound));
            }
            layer
        })
        .collect();
    Ok(ModelParams { arch: arch.clone(), scale, layers })
}

impl<T: Real> ModelParams<T> {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            scale: self.scale,
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    in_ch: l.in_ch,
                    out_ch: l.out_ch,
                    weight: l.weight.iter().map(|v| U::of(v.f64())).collect(),
                    bias: l.bias.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn check_consistent(&self) -> Result<()> {
        self.arch.validate()?;
        let expect = self.arch.zero_layers::<f32>();
        let ok = expect.len() == self.layers.len()
            && expect.iter().zip(&self.layers).all(|(e, l)| {
                l.in_ch == e.in_ch && l.out_ch == e.out_ch && l.weight.len() == e.weight.len() && l.bias.len() == e.bias.len()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::config("model tensors do not match the architecture descriptor"))
        }
    }
}

/// Stacks image and raster channels into a `(1, 6, H, W)` tensor.
pub fn assemble_input<T: Real>(image: &ImagePatch, raster: &RasterTriple) -> Result<Tensor<T>> {
    if image.extent != raster.extent {
        return Err(Error::domain(format!(
            "image extent {} does not match raster extent {}",
            image.extent, raster.extent
        )));
    }
    let e = image.extent;
    let mut data = Vec::with_capacity(INPUT_CHANNELS * e.area());
    data.extend(image.data.iter().map(|&v| T::of(v as f64)));
    for plane in raster.channels() {
        data.extend(plane.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }));
    }
    Ok(Tensor::from_vec([1, INPUT_CHANNELS, e.height, e.width], data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput<T> {
    /// `(N, 2, H, W)`: dx then dy, in `[-4, 4]`.
    pub disp: Tensor<T>,
    /// `(N, 3, H, W)` logits for interior, edge, vertices.
    pub seg_logits: Tensor<T>,
}

impl<T: Real> NetOutput<T> {
    /// Displacement map of sample `n` as a field.
    pub fn disp_field(&self, n: usize) -> DisplacementField {
        let (dx, dy) = (self.disp.plane(n, 0), self.disp.plane(n, 1));
        let extent = crate::geometry::Extent::new(self.disp.h(), self.disp.w());
        let vectors = dx.iter().zip(dy).map(|(&x, &y)| Point::new(x.f64(), y.f64())).collect();
        DisplacementField::from_vec(extent, vectors).expect("finite network output")
    }
}

/// Upstream gradients with respect to both network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad<T> {
    pub disp: Tensor<T>,
    pub seg_logits: Tensor<T>,
}

impl<T: Real> OutputGrad<T> {
    pub fn zeros_like(out: &NetOutput<T>) -> Self {
        OutputGrad {
            disp: Tensor::zeros(out.disp.shape),
            seg_logits: Tensor::zeros(out.seg_logits.shape),
        }
    }
}

struct ConvActCache<T> {
    input: Tensor<T>,
    /// Input of the activation (normalized if normalization is on).
    pre: Tensor<T>,
    /// `(groups, 1 / std)` when normalized.
    norm: Option<(usize, Vec<T>)>,
}

fn conv_act<T: Real>(x: Tensor<T>, layer: &ConvLayer<T>, max_groups: usize) -> (Tensor<T>, ConvActCache<T>) {
    let conv = ops::conv3x3_forward(&x, layer);
    let (pre, norm) = if max_groups == 0 {
        (conv, None)
    } else {
        let g = ops::group_count(layer.out_ch, max_groups);
        let (y, inv_std) = ops::group_norm_forward(&conv, g);
        (y, Some((g, inv_std)))
    };
    let y = ops::silu_forward(&pre);
    (y, ConvActCache { input: x, pre, norm })
}

/// Returns `(grad_input, layer gradient)`.
fn conv_act_backward<T: Real>(cache: &ConvActCache<T>, layer: &ConvLayer<T>, gy: &Tensor<T>) -> (Tensor<T>, ConvLayer<T>) {
    let mut gpre = ops::silu_backward(&cache.pre, gy);
    if let Some((g, inv_std)) = &cache.norm {
        gpre = ops::group_norm_backward(&cache.pre, inv_std, *g, &gpre);
    }
    let (gx, weight, bias) = ops::conv3x3_backward(&cache.input, layer, &gpre);
    (gx, ConvLayer { in_ch: layer.in_ch, out_ch: layer.out_ch, weight, bias })
}

struct EncoderCache<T> {
    pool: Option<([usize; 4], Vec<u32>)>,
    conv_a: ConvActCache<T>,
    conv_b: ConvActCache<T>,
}

struct DecoderCache<T> {
    skip_channels: usize,
    conv_a: ConvActCache<T>,
    conv_b: ConvActCache<T>,
}

struct ForwardCache<T> {
    encoders: Vec<EncoderCache<T>>,
    /// Decoder caches in execution order (level L-2 first).
    decoders: Vec<DecoderCache<T>>,
    head_input: Tensor<T>,
    disp_pre: Tensor<T>,
    shape: [usize; 4],
}

fn check_input<T: Real>(m: &ModelParams<T>, x: &Tensor<T>) -> Result<()> {
    if x.c() != INPUT_CHANNELS {
        return Err(Error::domain(format!("network input needs {INPUT_CHANNELS} channels, got {}", x.c())));
    }
    let k = m.arch.required_divisor();
    if x.h() == 0 || x.w() == 0 || x.h() % k != 0 || x.w() % k != 0 {
        return Err(Error::domain(format!(
            "input extent {}x{} must be non-empty and divisible by {k}",
            x.h(),
            x.w()
        )));
    }
    Ok(())
}

fn forward_impl<T: Real>(m: &ModelParams<T>, x: &Tensor<T>) -> Result<(NetOutput<T>, ForwardCache<T>)> {
    m.check_consistent()?;
    check_input(m, x)?;
    let depth = m.arch.depth();
    let range = T::of(DISP_RANGE);
    let groups = m.arch.norm_groups;
    let mut encoders = Vec::with_capacity(depth);
    let mut skips: Vec<Tensor<T>> = Vec::with_capacity(depth);
    for l in 0..depth {
        let (input, pool) = if l == 0 {
            (x.clone(), None)
        } else {
            let prev = &skips[l - 1];
            let (p, idx) = ops::maxpool2_forward(prev);
            (p, Some((prev.shape, idx)))
        };
        let (a, conv_a) = conv_act(input, &m.layers[2 * l], groups);
        let (b, conv_b) = conv_act(a, &m.layers[2 * l + 1], groups);
        skips.push(b);
        encoders.push(EncoderCache { pool, conv_a, conv_b });
    }
    let mut cur = skips.pop().expect("depth >= 1");
    let mut decoders = Vec::with_capacity(depth - 1);
    for (k, l) in (0..depth - 1).rev().enumerate() {
        let skip = skips.pop().expect("skip per level");
        let cat = ops::concat_forward(&skip, &ops::upsample2_forward(&cur));
        let base = 2 * depth + 2 * k;
        let (a, conv_a) = conv_act(cat, &m.layers[base], groups);
        let (b, conv_b) = conv_act(a, &m.layers[base + 1], groups);
        cur = b;
        decoders.push(DecoderCache { skip_channels: m.arch.widths[l], conv_a, conv_b });
    }
    let n_layers = m.layers.len();
    let disp_pre = ops::conv3x3_forward(&cur, &m.layers[n_layers - 2]);
    let disp = ops::scaled_tanh_forward(&disp_pre, range);
    let seg_logits = ops::conv3x3_forward(&cur, &m.layers[n_layers - 1]);
    let out = NetOutput { disp, seg_logits };
    let cache = ForwardCache { encoders, decoders, head_input: cur, disp_pre, shape: x.shape };
    Ok((out, cache))
}

fn backward_impl<T: Real>(m: &ModelParams<T>, cache: &ForwardCache<T>, up: &OutputGrad<T>) -> Result<Grads<T>> {
    let depth = m.arch.depth();
    let n_layers = m.layers.len();
    let [n, _, h, w] = cache.shape;
    if up.disp.shape != [n, DISP_CHANNELS, h, w] || up.seg_logits.shape != [n, SEG_CHANNELS, h, w] {
        return Err(Error::domain("upstream gradient shapes do not match the forward pass"));
    }
    let mut grads: Vec<Option<ConvLayer<T>>> = vec![None; n_layers];
    let range = T::of(DISP_RANGE);

    let g_disp_pre = ops::scaled_tanh_backward(&cache.disp_pre, range, &up.disp);
    let (mut g_cur, wd, bd) = ops::conv3x3_backward(&cache.head_input, &m.layers[n_layers - 2], &g_disp_pre);
    grads[n_layers - 2] = Some(ConvLayer { in_ch: m.layers[n_layers - 2].in_ch, out_ch: DISP_CHANNELS, weight: wd, bias: bd });
    let (g_seg_in, ws, bs) = ops::conv3x3_backward(&cache.head_input, &m.layers[n_layers - 1], &up.seg_logits);
    grads[n_layers - 1] = Some(ConvLayer { in_ch: m.layers[n_layers - 1].in_ch, out_ch: SEG_CHANNELS, weight: ws, bias: bs });
    g_cur.add_assign(&g_seg_in);

    let mut skip_grads: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
    for (k, dec) in cache.decoders.iter().enumerate().rev() {
        let l = depth - 2 - k;
        let base = 2 * depth + 2 * k;
        let (g_a, gl_b) = conv_act_backward(&dec.conv_b, &m.layers[base + 1], &g_cur);
        let (g_cat, gl_a) = conv_act_backward(&dec.conv_a, &m.layers[base], &g_a);
        grads[base + 1] = Some(gl_b);
        grads[base] = Some(gl_a);
        let (g_skip, g_up) = ops::concat_backward(&g_cat, dec.skip_channels);
        skip_grads[l] = Some(g_skip);
        g_cur = ops::upsample2_backward(&g_up);
    }
    // g_cur is now the gradient flowing into the deepest encoder output.
    let mut g_level = g_cur;
    for l in (0..depth).rev() {
        if l < depth - 1 {
            let mut g = skip_grads[l].take().expect("decoder visited every skip");
            g.add_assign(&g_level);
            g_level = g;
        }
        let enc = &cache.encoders[l];
        let (g_a, gl_b) = conv_act_backward(&enc.conv_b, &m.layers[2 * l + 1], &g_level);
        let (g_in, gl_a) = conv_act_backward(&enc.conv_a, &m.layers[2 * l], &g_a);
        grads[2 * l + 1] = Some(gl_b);
        grads[2 * l] = Some(gl_a);
        g_level = match &enc.pool {
            Some((shape, idx)) => ops::maxpool2_backward(*shape, idx, &g_in),
            None => g_in,
        };
    }
    Ok(Grads {
        layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
    })
}

/// Runs the network without keeping activations.
pub fn forward_tensor<T: Real>(m: &ModelParams<T>, x: &Tensor<T>) -> Result<NetOutput<T>> {
    forward_impl(m, x).map(|(out, _)| out)
}

/// Predicts the displacement map and segmentation logits for one pair.
pub fn forward<T: Real>(m: &ModelParams<T>, image: &ImagePatch, raster: &RasterTriple) -> Result<(DisplacementField, Tensor<T>)> {
    let x = assemble_input::<T>(image, raster)?;
    let out = forward_tensor(m, &x)?;
    Ok((out.disp_field(0), out.seg_logits))
}

/// Holds the activations of one forward pass so gradients can be taken.
pub struct Tape<T> {
    cache: Option<ForwardCache<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape { cache: None }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, m: &ModelParams<T>, x: &Tensor<T>) -> Result<NetOutput<T>> {
        let (out, cache) = forward_impl(m, x)?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Parameter gradients for the recorded forward pass. `m` must be the
    /// parameters that pass used; they are not modified.
    pub fn backward(&self, m: &ModelParams<T>, upstream: &OutputGrad<T>) -> Result<Grads<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        backward_impl(m, cache, upstream)
    }

    pub fn clear(&mut self) {
        self.cache = None;
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PACKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    scale: String,
    arch: ArchDescriptor,
    /// Total number of `f32` values in the payload.
    values: usize,
}

/// Checkpoint layout: 8-byte magic `PACKPT01`, `u32` LE header length, JSON
/// header, then every layer's weights followed by its biases as LE `f32`, in
/// descriptor order.
pub fn write_checkpoint<W: Write>(m: &ModelParams<f32>, mut w: W) -> std::io::Result<()> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        scale: m.scale.tag().to_string(),
        arch: m.arch.clone(),
        values: m.param_count(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * header.values);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in m.params() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::domain(format!("reading checkpoint: {e}")))?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::domain("not a checkpoint file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + hlen;
    if bytes.len() < header_end {
        return Err(Error::domain("truncated checkpoint header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[12..header_end]).map_err(|e| Error::domain(format!("checkpoint header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::domain(format!("unsupported checkpoint version {}", header.format_version)));
    }
    let scale = Scale::from_tag(&header.scale).ok_or_else(|| Error::domain(format!("unknown scale tag {}", header.scale)))?;
    let mut m = ModelParams {
        scale,
        layers: header.arch.zero_layers(),
        arch: header.arch,
    };
    m.arch.validate()?;
    let payload = &bytes[header_end..];
    if payload.len() != 4 * m.param_count() || header.values != m.param_count() {
        return Err(Error::domain("checkpoint payload size does not match its architecture"));
    }
    for (v, chunk) in m.params_mut().zip(payload.chunks_exact(4)) {
        *v = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(m)
}

pub fn save_checkpoint(m: &ModelParams<f32>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(m, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file)).map_err(|e| Error::data(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Extent;

    fn random_input(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        Tensor::from_vec([1, 6, h, w], (0..6 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let arch = ArchDescriptor::new(vec![4, 8]);
        let a = init_model::<f64>(&arch, Scale::Full, 3).unwrap();
        let b = init_model::<f64>(&arch, Scale::Full, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        assert_ne!(a, init_model::<f64>(&arch, Scale::Full, 4).unwrap());
    }

    #[test]
    fn init_variance_is_two_over_fan_in() {
        // One wide layer: 10k+ weights with fan-in 64*9.
        let arch = ArchDescriptor::new(vec![64, 64]);
        let m = init_model::<f64>(&arch, Scale::Full, 9).unwrap();
        let layer = &m.layers[1];
        assert!(layer.weight.len() >= 10_000);
        let n = layer.weight.len() as f64;
        let mean = layer.weight.iter().sum::<f64>() / n;
        let var = layer.weight.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expect = 2.0 / (64.0 * 9.0);
        assert!((var / expect - 1.0).abs() < 0.2, "var {var} vs {expect}");
    }

    #[test]
    fn invalid_descriptors() {
        assert!(init_model::<f32>(&ArchDescriptor::new(vec![]), Scale::Full, 0).is_err());
        assert!(init_model::<f32>(&ArchDescriptor::new(vec![4, 0]), Scale::Full, 0).is_err());
        let mut arch = ArchDescriptor::new(vec![4]);
        arch.kernel_size = 5;
        assert!(init_model::<f32>(&arch, Scale::Full, 0).is_err());
    }

    #[test]
    fn output_shapes_and_range() {
        let m = init_model::<f64>(&ArchDescriptor::new(vec![4, 8, 8]), Scale::Half, 1).unwrap();
        let x = random_input(2, 16, 8);
        let out = forward_tensor(&m, &x).unwrap();
        assert_eq!(out.disp.shape, [1, 2, 16, 8]);
        assert_eq!(out.seg_logits.shape, [1, 3, 16, 8]);
        assert!(out.disp.data.iter().all(|v| v.abs() <= 4.0));
    }

    #[test]
    fn rejects_bad_extents() {
        let m = init_model::<f64>(&ArchDescriptor::new(vec![4, 4, 4]), Scale::Full, 1).unwrap();
        assert!(matches!(forward_tensor(&m, &random_input(0, 6, 8)), Err(Error::Domain(_))));
        let img = ImagePatch::constant(Extent::new(8, 8), [0.0; 3]);
        let r = RasterTriple::zeros(Extent::new(8, 4));
        assert!(matches!(forward(&m, &img, &r), Err(Error::Domain(_))));
    }

    #[test]
    fn batch_duplicates_give_identical_outputs() {
        let m = init_model::<f32>(&ArchDescriptor::new(vec![4, 8]), Scale::Full, 5).unwrap();
        let one = random_input(7, 8, 8).cast::<f32>();
        let two = Tensor::stack(&[one.clone(), one.clone()]);
        let a = forward_tensor(&m, &one).unwrap();
        let b = forward_tensor(&m, &two).unwrap();
        assert_eq!(b.disp.sample(0), a.disp.sample(0));
        assert_eq!(b.disp.sample(1), a.disp.sample(0));
        assert_eq!(b.seg_logits.sample(1), a.seg_logits.sample(0));
    }

    #[test]
    fn backward_requires_forward() {
        let m = init_model::<f64>(&ArchDescriptor::new(vec![2]), Scale::Full, 0).unwrap();
        let tape = Tape::new();
        let up = OutputGrad { disp: Tensor::zeros([1, 2, 4, 4]), seg_logits: Tensor::zeros([1, 3, 4, 4]) };
        assert!(matches!(tape.backward(&m, &up), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = init_model::<f64>(&ArchDescriptor::new(vec![3, 5]), Scale::Full, 0).unwrap();
        let mut tape = Tape::new();
        let out = tape.forward(&m, &random_input(1, 8, 8)).unwrap();
        let g = tape.backward(&m, &OutputGrad::zeros_like(&out)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert_eq!(g.iter().count(), m.param_count());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = init_model::<f32>(&ArchDescriptor::new(vec![3, 6]), Scale::Quarter, 21).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, m);
        let mut buf2 = Vec::new();
        write_checkpoint(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert!(read_checkpoint(&buf[..buf.len() - 4]).is_err());
    }
}
