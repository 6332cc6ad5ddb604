//! Latent pyramid geometry, hyperprior resampling, the learned ×2
//! upsampler cascade and the synthesis network.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{conv2d_forward, upsample_forward, Axis, SparseMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PyramidError {
    #[error("grid {h}x{w} needs {expected} values, got {got}")]
    GridSize { h: usize, w: usize, expected: usize, got: usize },
    #[error("shape drift: expected {expected:?}, got {got:?}")]
    ShapeDrift { expected: (usize, usize), got: (usize, usize) },
    #[error("{what}: expected {expected} values, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("invalid geometry: {0}")]
    Geometry(String),
}

/// Row-major 2-D grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self, PyramidError> {
        if data.len() != height * width {
            return Err(PyramidError::GridSize { h: height, w: width, expected: height * width, got: data.len() });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self { height, width, data: vec![v; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.width + j] = v;
    }
}

pub fn ceil_div_pow2(v: usize, k: usize) -> usize {
    (v + (1 << k) - 1) >> k
}

/// Shapes of the `L` latent layers and of the hyperprior for an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub layers: usize,
    pub downsampling: usize,
}

impl Geometry {
    pub fn new(height: usize, width: usize, layers: usize, downsampling: usize) -> Result<Self, PyramidError> {
        if height == 0 || width == 0 {
            return Err(PyramidError::Geometry("image must be non-empty".into()));
        }
        if !(1..=12).contains(&layers) {
            return Err(PyramidError::Geometry(format!("layer count {} outside 1..=12", layers)));
        }
        if !(2..=6).contains(&downsampling) {
            return Err(PyramidError::Geometry(format!("downsampling exponent {} outside 2..=6", downsampling)));
        }
        Ok(Self { height, width, layers, downsampling })
    }

    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (ceil_div_pow2(self.height, l), ceil_div_pow2(self.width, l))
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.layers).map(|l| self.layer_shape(l)).collect()
    }

    /// Start offset of each layer in the flat concatenation, plus the total.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for (h, w) in self.layer_shapes() {
            off.push(off.last().unwrap() + h * w);
        }
        off
    }

    pub fn latent_count(&self) -> usize {
        *self.layer_offsets().last().unwrap()
    }

    pub fn hyperprior_shape(&self) -> (usize, usize) {
        (ceil_div_pow2(self.height, self.downsampling), ceil_div_pow2(self.width, self.downsampling))
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Σ layer elements / pixels.
    pub fn density(&self) -> f64 {
        self.latent_count() as f64 / self.pixels() as f64
    }
}

/// Integer latent layers, finest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentPyramid {
    pub layers: Vec<Grid<i32>>,
}

impl LatentPyramid {
    pub fn zeros(geom: &Geometry) -> Self {
        Self { layers: geom.layer_shapes().into_iter().map(|(h, w)| Grid::filled(h, w, 0)).collect() }
    }

    pub fn from_flat(geom: &Geometry, flat: &[i32]) -> Result<Self, PyramidError> {
        let off = geom.layer_offsets();
        if flat.len() != *off.last().unwrap() {
            return Err(PyramidError::Dimension { what: "latents", expected: *off.last().unwrap(), got: flat.len() });
        }
        let layers = geom
            .layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(l, (h, w))| Grid::new(h, w, flat[off[l]..off[l + 1]].to_vec()))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn flat(&self) -> Vec<i32> {
        self.layers.iter().flat_map(|g| g.data().iter().copied()).collect()
    }

    /// Largest absolute value per layer.
    pub fn supports(&self) -> Vec<u32> {
        self.layers.iter().map(|g| g.data().iter().map(|v| v.unsigned_abs()).max().unwrap_or(0)).collect()
    }
}

/// Coarse integer side-information grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialHyperprior {
    pub grid: Grid<i32>,
    pub downsampling: usize,
}

impl SpatialHyperprior {
    pub fn support(&self) -> u32 {
        self.grid.data().iter().map(|v| v.unsigned_abs()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMode {
    #[default]
    Bicubic,
    Area,
}

const CUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = −0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// 1-D resampling weights `(input index, weight)` for each output sample,
/// aligned on pixel centres. Downsampling stretches the kernel by the scale
/// factor; borders replicate; weights are normalized to sum to one.
pub fn resample_weights(in_len: usize, out_len: usize, mode: ResampleMode) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut add = |i: i64, wgt: f64| {
                let i = i.clamp(0, in_len as i64 - 1) as usize;
                match taps.iter_mut().find(|t| t.0 == i) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((i, wgt)),
                }
            };
            match mode {
                ResampleMode::Bicubic => {
                    let centre = (o as f64 + 0.5) * scale - 0.5;
                    let support = if scale > 1.0 { 2.0 * scale } else { 2.0 };
                    let stretch = scale.max(1.0);
                    let lo = (centre - support).floor() as i64;
                    let hi = (centre + support).ceil() as i64;
                    for i in lo..=hi {
                        let wgt = cubic_kernel((centre - i as f64) / stretch);
                        if wgt != 0.0 {
                            add(i, wgt);
                        }
                    }
                }
                ResampleMode::Area => {
                    let (start, end) = (o as f64 * scale, (o + 1) as f64 * scale);
                    let mut i = start.floor() as i64;
                    while (i as f64) < end {
                        let overlap = (end.min(i as f64 + 1.0) - start.max(i as f64)).max(0.0);
                        if overlap > 0.0 {
                            add(i, overlap);
                        }
                        i += 1;
                    }
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps.retain(|t| t.1 != 0.0);
            taps
        })
        .collect()
}

/// Fixed linear map from the hyperprior grid to every latent layer.
#[derive(Debug, Clone)]
pub struct Resampler {
    matrix: Arc<SparseMatrix>,
    /// MACs of the equivalent separable implementation.
    separable_macs: usize,
}

impl Resampler {
    pub fn new(geom: &Geometry, mode: ResampleMode) -> Self {
        let (sh, sw) = geom.hyperprior_shape();
        let mut rows = Vec::with_capacity(geom.latent_count());
        let mut macs = 0;
        for (h, w) in geom.layer_shapes() {
            let wr = resample_weights(sh, h, mode);
            let wc = resample_weights(sw, w, mode);
            let taps_c: usize = wc.iter().map(Vec::len).sum();
            let taps_r: usize = wr.iter().map(Vec::len).sum();
            macs += sh * taps_c + taps_r * w;
            for ri in &wr {
                for ci in &wc {
                    let mut row = Vec::with_capacity(ri.len() * ci.len());
                    for &(r, a) in ri {
                        for &(c, b) in ci {
                            row.push((r * sw + c, a * b));
                        }
                    }
                    rows.push(row);
                }
            }
        }
        Self { matrix: Arc::new(SparseMatrix::from_rows(sh * sw, &rows)), separable_macs: macs }
    }

    pub fn matrix(&self) -> Arc<SparseMatrix> {
        self.matrix.clone()
    }

    /// Flat concatenation of every resampled layer.
    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        self.matrix.apply(s)
    }

    pub fn separable_macs(&self) -> usize {
        self.separable_macs
    }
}

/// Resamples the hyperprior to each of `target_shapes`.
pub fn resample_hyperprior(s: &Grid<f64>, target_shapes: &[(usize, usize)], mode: ResampleMode) -> Vec<Grid<f64>> {
    let (sh, sw) = s.shape();
    target_shapes
        .iter()
        .map(|&(h, w)| {
            let wr = resample_weights(sh, h, mode);
            let wc = resample_weights(sw, w, mode);
            let mut tmp = vec![0.0; sh * w];
            for i in 0..sh {
                for (j, taps) in wc.iter().enumerate() {
                    tmp[i * w + j] = taps.iter().map(|&(c, k)| k * s.get(i, c)).sum();
                }
            }
            let mut out = vec![0.0; h * w];
            for (i, taps) in wr.iter().enumerate() {
                for j in 0..w {
                    out[i * w + j] = taps.iter().map(|&(r, k)| k * tmp[r * w + j]).sum();
                }
            }
            Grid { height: h, width: w, data: out }
        })
        .collect()
}

/// Half-taps of the symmetric 8-tap bicubic ×2 interpolator.
pub const BICUBIC_HALF_TAPS: [f64; 4] = [-0.0234375, -0.0703125, 0.2265625, 0.8671875];

/// Learned ×2 filters; `taps[s]` upsamples level `s + 1` to level `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsamplerParams {
    pub taps: Vec<[f64; 4]>,
}

impl UpsamplerParams {
    pub fn bicubic(layers: usize) -> Self {
        Self { taps: vec![BICUBIC_HALF_TAPS; layers.saturating_sub(1)] }
    }

    pub fn param_count(&self) -> usize {
        4 * self.taps.len()
    }

    /// Rescales every stage so that each polyphase branch sums to one.
    pub fn normalize(&mut self) {
        for t in &mut self.taps {
            normalize_taps(t);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.taps.iter().flatten().copied().collect()
    }

    pub fn from_flat(layers: usize, flat: &[f64]) -> Result<Self, PyramidError> {
        let expected = 4 * layers.saturating_sub(1);
        if flat.len() != expected {
            return Err(PyramidError::Dimension { what: "upsampler parameters", expected, got: flat.len() });
        }
        Ok(Self { taps: flat.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect() })
    }
}

pub fn normalize_taps(t: &mut [f64; 4]) {
    let s: f64 = t.iter().sum();
    if s.abs() > 1e-12 {
        t.iter_mut().for_each(|v| *v /= s);
    }
}

/// Upsamples every layer to full resolution through the ×2 cascade and
/// stacks them into `[L × H × W]`.
pub fn upsample_pyramid(layers: &[Grid<f64>], params: &UpsamplerParams) -> Result<Vec<f64>, PyramidError> {
    let n = layers.len();
    if params.taps.len() + 1 != n {
        return Err(PyramidError::Dimension { what: "upsampler stages", expected: n.saturating_sub(1), got: params.taps.len() });
    }
    let last = &layers[n - 1];
    let mut acc = last.data().to_vec();
    let mut shape = [1, last.height(), last.width()];
    for lvl in (0..n - 1).rev() {
        let (th, tw) = layers[lvl].shape();
        let t = &params.taps[lvl];
        let a = upsample_forward(&acc, t, &shape, Axis::Cols, tw);
        let s2 = [shape[0], shape[1], tw];
        let b = upsample_forward(&a, t, &s2, Axis::Rows, th);
        if (s2[1] * 2).min(th) != th {
            return Err(PyramidError::ShapeDrift { expected: (th, tw), got: (s2[1] * 2, tw) });
        }
        let mut next = layers[lvl].data().to_vec();
        next.extend_from_slice(&b);
        acc = next;
        shape = [shape[0] + 1, th, tw];
    }
    Ok(acc)
}

/// Synthesis weights: 1×1 (L→C), ReLU, 1×1 (C→3), then two 3×3 residual
/// blocks `x ← relu(x + conv3(x))`, `x ← x + conv4(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisParams {
    pub layers: usize,
    pub channels: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
    pub w4: Vec<f64>,
    pub b4: Vec<f64>,
}

impl SynthesisParams {
    pub fn zeros(layers: usize, channels: usize) -> Self {
        Self {
            layers,
            channels,
            w1: vec![0.0; channels * layers],
            b1: vec![0.0; channels],
            w2: vec![0.0; 3 * channels],
            b2: vec![0.0; 3],
            w3: vec![0.0; 81],
            b3: vec![0.0; 3],
            w4: vec![0.0; 81],
            b4: vec![0.0; 3],
        }
    }

    pub fn random<R: Rng + ?Sized>(layers: usize, channels: usize, rng: &mut R) -> Self {
        let mut u = |fan_in: usize, n: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-b..b)).collect::<Vec<f64>>()
        };
        Self {
            layers,
            channels,
            w1: u(layers, channels * layers),
            b1: u(layers, channels),
            w2: u(channels, 3 * channels),
            b2: u(channels, 3),
            w3: u(27, 81),
            b3: u(27, 3),
            w4: u(27, 81),
            b4: u(27, 3),
        }
    }

    /// Training start point: uniform 1×1 layers, zero residual blocks and a
    /// mid-gray output bias, so every post-residual activation starts live.
    pub fn initial<R: Rng + ?Sized>(layers: usize, channels: usize, rng: &mut R) -> Self {
        let mut p = Self::random(layers, channels, rng);
        p.b2 = vec![0.5; 3];
        p.w3.fill(0.0);
        p.b3.fill(0.0);
        p.w4.fill(0.0);
        p.b4.fill(0.0);
        p
    }

    pub fn count_for(layers: usize, channels: usize) -> usize {
        channels * layers + channels + 3 * channels + 3 + 81 + 3 + 81 + 3
    }

    pub fn param_count(&self) -> usize {
        Self::count_for(self.layers, self.channels)
    }

    /// MACs per pixel: `L·C + 3·C + 81 + 81`.
    pub fn macs_per_pixel(layers: usize, channels: usize) -> usize {
        layers * channels + 3 * channels + 81 + 81
    }

    pub fn to_flat(&self) -> Vec<f64> {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3, &self.w4, &self.b4]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn from_flat(layers: usize, channels: usize, flat: &[f64]) -> Result<Self, PyramidError> {
        let expected = Self::count_for(layers, channels);
        if flat.len() != expected {
            return Err(PyramidError::Dimension { what: "synthesis parameters", expected, got: flat.len() });
        }
        let mut s = Self::zeros(layers, channels);
        let mut off = 0;
        for v in [&mut s.w1, &mut s.b1, &mut s.w2, &mut s.b2, &mut s.w3, &mut s.b3, &mut s.w4, &mut s.b4] {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(s)
    }
}

/// Runs the synthesis network on `[L × H × W]`; output `[3 × H × W]` in
/// `[0, 1]`.
pub fn synthesize(u: &[f64], h: usize, w: usize, p: &SynthesisParams) -> Result<Vec<f64>, PyramidError> {
    let mut out = synthesize_unclamped(u, h, w, p)?;
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

pub(crate) fn synthesize_unclamped(u: &[f64], h: usize, w: usize, p: &SynthesisParams) -> Result<Vec<f64>, PyramidError> {
    if u.len() != p.layers * h * w {
        return Err(PyramidError::Dimension { what: "synthesis input", expected: p.layers * h * w, got: u.len() });
    }
    let c = p.channels;
    let mut x1 = conv2d_forward(u, &p.w1, &p.b1, p.layers, c, h, w, 1);
    x1.iter_mut().for_each(|v| *v = v.max(0.0));
    let x2 = conv2d_forward(&x1, &p.w2, &p.b2, c, 3, h, w, 1);
    let r3 = conv2d_forward(&x2, &p.w3, &p.b3, 3, 3, h, w, 3);
    let x3: Vec<f64> = x2.iter().zip(&r3).map(|(a, b)| (a + b).max(0.0)).collect();
    let r4 = conv2d_forward(&x3, &p.w4, &p.b4, 3, 3, h, w, 3);
    Ok(x3.iter().zip(&r4).map(|(a, b)| a + b).collect())
}

/// MACs per pixel of the ×2 cascade for a given geometry.
pub fn upsampler_macs(geom: &Geometry) -> f64 {
    let shapes = geom.layer_shapes();
    let mut total = 0usize;
    for lvl in (0..geom.layers.saturating_sub(1)).rev() {
        let channels = geom.layers - 1 - lvl;
        let (ih, _) = shapes[lvl + 1];
        let (oh, ow) = shapes[lvl];
        total += channels * (ih * ow * 4 + oh * ow * 4);
    }
    total as f64 / geom.pixels() as f64
}
