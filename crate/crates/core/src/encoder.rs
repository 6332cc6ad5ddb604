//! Per-image overfitting: joint gradient descent on latents, hyperprior and
//! all decoder networks under a rate-distortion loss, followed by parameter
//! quantization, range coding and a decode-verify pass.

use std::sync::Arc;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coder::{
    serialize_params, Bitstream, BitstreamHeader, CoderError, ParamSet, RangeEncoder, Section, SectionKind,
};
use crate::context::{ContextError, ContextWindow, HyperpriorContextModel, LatentContextModel};
use crate::decoder::{
    decode_with, hyperprior_distribution, reconstruct, Architecture, CodecModel, DecodeError, DecodeOptions, Image,
    LatentConditioning, LatentPredictor, ParityTrace,
};
use crate::diffgraph::{Axis, Graph, GraphError, NodeId, SparseMatrix, Tensor};
use crate::entropy::{build_cdf, laplace_pmf, EntropyConfig, EntropyError};
use crate::pyramid::{normalize_taps, Grid, LatentPyramid, PyramidError, ResampleMode, Resampler, SynthesisParams, UpsamplerParams};
use crate::quantize::{gaussian, QuantError, QuantSchedule, Relaxation};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("decoder self-check failed: {0}")]
    SelfCheck(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

/// Complexity operation points: context size and synthesis width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OperatingPoint {
    #[default]
    Hop,
    Mop,
    Lop,
}

impl OperatingPoint {
    pub fn context_size(self) -> usize {
        match self {
            OperatingPoint::Hop | OperatingPoint::Mop => 16,
            OperatingPoint::Lop => 8,
        }
    }

    pub fn synth_channels(self) -> usize {
        match self {
            OperatingPoint::Hop => 48,
            OperatingPoint::Mop | OperatingPoint::Lop => 16,
        }
    }
}

impl std::str::FromStr for OperatingPoint {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hop" => Ok(Self::Hop),
            "mop" => Ok(Self::Mop),
            "lop" => Ok(Self::Lop),
            _ => Err(format!("unknown operation point '{}'", s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_hyperprior: bool,
    pub use_layer_index: bool,
    pub resample_mode: ResampleMode,
    pub med: bool,
    pub cphi: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { use_hyperprior: true, use_layer_index: true, resample_mode: ResampleMode::Bicubic, med: true, cphi: true }
    }
}

impl Ablation {
    /// Hyperprior and layer index disabled.
    pub fn baseline() -> Self {
        Self { use_hyperprior: false, use_layer_index: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr_start: 1e-2, lr_end: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// λ values of the five standard quality points.
pub const LAMBDAS: [f64; 5] = [0.0001, 0.0004, 0.001, 0.004, 0.02];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodeConfig {
    pub lambda: f64,
    pub operating_point: OperatingPoint,
    /// Overrides the operating point's context size.
    pub context_size: Option<usize>,
    /// Overrides the operating point's synthesis width.
    pub synth_channels: Option<usize>,
    pub layers: usize,
    pub downsampling: usize,
    pub schedule: QuantSchedule,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub ablation: Ablation,
    pub entropy: EntropyConfig,
    pub checksum: bool,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            lambda: 0.001,
            operating_point: OperatingPoint::Hop,
            context_size: None,
            synth_channels: None,
            layers: 7,
            downsampling: 4,
            schedule: QuantSchedule::default(),
            optimizer: AdamConfig::default(),
            seed: 0,
            ablation: Ablation::default(),
            entropy: EntropyConfig::default(),
            checksum: true,
        }
    }
}

impl EncodeConfig {
    /// Total iterations `n`, 10% of them straight-through; annealing
    /// endpoints are kept.
    pub fn with_iterations(mut self, n: usize) -> Self {
        let t = QuantSchedule::with_total(n);
        self.schedule.phase1_iters = t.phase1_iters;
        self.schedule.phase2_iters = t.phase2_iters;
        self
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(EncodeError::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        self.schedule.validate()?;
        let o = &self.optimizer;
        if !(o.lr_start > 0.0 && o.lr_end > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(EncodeError::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, height: usize, width: usize) -> Result<Architecture, EncodeError> {
        let arch = Architecture {
            height,
            width,
            layers: self.layers,
            downsampling: self.downsampling,
            context_size: self.context_size.unwrap_or(self.operating_point.context_size()),
            synth_channels: self.synth_channels.unwrap_or(self.operating_point.synth_channels()),
            use_hyperprior: self.ablation.use_hyperprior,
            use_layer_index: self.ablation.use_layer_index,
            resample_mode: self.ablation.resample_mode,
            med: self.ablation.med,
            cphi: self.ablation.cphi,
            entropy: self.entropy,
        };
        arch.validate().map_err(|e| EncodeError::Config(e.to_string()))?;
        Ok(arch)
    }
}

/// Offsets of each trainable group inside the flat state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub latents: std::ops::Range<usize>,
    pub hyperprior: std::ops::Range<usize>,
    pub params: [std::ops::Range<usize>; 4],
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let geom = arch.geometry();
        let t = geom.latent_count();
        let (sh, sw) = geom.hyperprior_shape();
        let p = if arch.use_hyperprior { sh * sw } else { 0 };
        let mut off = t + p;
        let params = ParamSet::ALL.map(|s| {
            let r = off..off + arch.param_count(s);
            off = r.end;
            r
        });
        Self { latents: 0..t, hyperprior: t..t + p, params }
    }

    pub fn total(&self) -> usize {
        self.params[3].end
    }
}

/// Continuous training state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub arch: Architecture,
    pub layout: Layout,
    /// `[latents | hyperprior | φ | ξ | υ | θ]`.
    pub values: Vec<f64>,
    pub iteration: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl TrainState {
    /// Zero latents and hyperprior, uniform weights, identity residual
    /// blocks, bicubic upsampler.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let layout = Layout::new(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.total()];
        let phi = if arch.use_hyperprior { HyperpriorContextModel::random(arch.cphi, &mut rng).to_flat() } else { vec![] };
        let xi = LatentContextModel::random(arch.context_size, arch.conditioning_inputs(), &mut rng).to_flat();
        let ups = UpsamplerParams::bicubic(arch.layers).to_flat();
        let synth = SynthesisParams::initial(arch.layers, arch.synth_channels, &mut rng).to_flat();
        for (r, v) in layout.params.iter().zip([phi, xi, ups, synth]) {
            values[r.clone()].copy_from_slice(&v);
        }
        let n = values.len();
        Self { arch, layout, values, iteration: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn latents(&self) -> &[f64] {
        &self.values[self.layout.latents.clone()]
    }

    pub fn hyperprior(&self) -> &[f64] {
        &self.values[self.layout.hyperprior.clone()]
    }

    pub fn params(&self, set: ParamSet) -> &[f64] {
        &self.values[self.layout.params[set as usize].clone()]
    }

    /// Continuous model (unquantized parameters).
    pub fn model(&self) -> Result<CodecModel, EncodeError> {
        let f = ParamSet::ALL.map(|s| self.params(s));
        Ok(CodecModel::from_flats(self.arch, f)?)
    }
}

/// Index tables that depend only on the architecture.
struct Plan {
    arch: Architecture,
    layout: Layout,
    shapes: Vec<(usize, usize)>,
    latent_count: usize,
    hp_count: usize,
    hp_ctx: Arc<Vec<Option<usize>>>,
    hp_broadcast: Arc<Vec<Option<usize>>>,
    resampler: Option<Arc<SparseMatrix>>,
    ctx_idx: Arc<Vec<Option<usize>>>,
    input_idx: Arc<Vec<Option<usize>>>,
    lbar: Vec<f64>,
    layer_slices: Vec<Arc<Vec<Option<usize>>>>,
    split_t: [Arc<Vec<Option<usize>>>; 2],
    split_p: [Arc<Vec<Option<usize>>>; 2],
    neg_target: Vec<f64>,
}

fn split_indices(n: usize) -> [Arc<Vec<Option<usize>>>; 2] {
    [Arc::new((0..n).map(|i| Some(2 * i)).collect()), Arc::new((0..n).map(|i| Some(2 * i + 1)).collect())]
}

impl Plan {
    fn new(arch: &Architecture, target: &[f64]) -> Result<Self, EncodeError> {
        let geom = arch.geometry();
        let shapes = geom.layer_shapes();
        let offsets = geom.layer_offsets();
        let t = geom.latent_count();
        let (sh, sw) = geom.hyperprior_shape();
        let p = if arch.use_hyperprior { sh * sw } else { 0 };

        let mut hp_ctx = Vec::with_capacity(3 * p);
        if arch.use_hyperprior {
            for i in 0..sh {
                for j in 0..sw {
                    let at = |r: Option<usize>, c: Option<usize>| match (r, c) {
                        (Some(r), Some(c)) => Some(r * sw + c),
                        _ => None,
                    };
                    hp_ctx.push(at(Some(i), j.checked_sub(1)));
                    hp_ctx.push(at(i.checked_sub(1), Some(j)));
                    hp_ctx.push(at(i.checked_sub(1), j.checked_sub(1)));
                }
            }
        }

        // Inputs gathered from concat([ŷ, s_r?, l̄?]).
        let window = ContextWindow::new(arch.context_size)?;
        let n = window.len();
        let k = n + arch.conditioning_inputs();
        let mut ctx_idx = Vec::with_capacity(t * n);
        let mut input_idx = Vec::with_capacity(t * k);
        for (l, &(h, w)) in shapes.iter().enumerate() {
            let local = window.gather_indices(h, w);
            for pos in 0..h * w {
                let taps = &local[pos * n..(pos + 1) * n];
                let g = offsets[l] + pos;
                for tap in taps {
                    let idx = tap.map(|x| offsets[l] + x);
                    ctx_idx.push(idx);
                    input_idx.push(idx);
                }
                let mut base = t;
                if arch.use_hyperprior {
                    input_idx.push(Some(base + g));
                    base += t;
                }
                if arch.use_layer_index {
                    input_idx.push(Some(base + g));
                }
            }
        }
        let mut lbar = Vec::new();
        if arch.use_layer_index {
            for (l, &(h, w)) in shapes.iter().enumerate() {
                lbar.extend(std::iter::repeat(l as f64 / arch.layers as f64).take(h * w));
            }
        }
        let layer_slices = (0..arch.layers).map(|l| Arc::new((offsets[l]..offsets[l + 1]).map(Some).collect())).collect();
        Ok(Self {
            arch: *arch,
            layout: Layout::new(arch),
            shapes,
            latent_count: t,
            hp_count: p,
            hp_ctx: Arc::new(hp_ctx),
            hp_broadcast: Arc::new(vec![Some(0); p]),
            resampler: arch.use_hyperprior.then(|| Resampler::new(&geom, arch.resample_mode).matrix()),
            ctx_idx: Arc::new(ctx_idx),
            input_idx: Arc::new(input_idx),
            lbar,
            layer_slices,
            split_t: split_indices(t),
            split_p: split_indices(p),
            neg_target: target.iter().map(|v| -v).collect(),
        })
    }
}

/// Terms of the rate-distortion loss for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub mse: f64,
    pub rate_y_bits: f64,
    pub rate_s_bits: f64,
}

struct Forward {
    graph: Graph,
    leaves: Vec<(NodeId, usize)>,
    loss: NodeId,
    parts: LossBreakdown,
}

fn leaf(g: &mut Graph, leaves: &mut Vec<(NodeId, usize)>, values: &[f64], off: usize, shape: Vec<usize>) -> Result<NodeId, EncodeError> {
    let n: usize = shape.iter().product();
    let id = g.param(Tensor::new(shape, values[off..off + n].to_vec())?);
    leaves.push((id, off));
    Ok(id)
}

fn quantize_node(g: &mut Graph, x: NodeId, relax: Relaxation, noise: &[f64]) -> Result<NodeId, EncodeError> {
    Ok(match relax {
        Relaxation::Soft { temperature, .. } => {
            let a = g.softround(x, temperature)?;
            let b = g.add_const(a, noise)?;
            g.softround(b, temperature)?
        }
        Relaxation::Straight => g.ste_round(x)?,
    })
}

fn forward(plan: &Plan, values: &[f64], lambda: f64, relax: Relaxation, rng: &mut ChaCha8Rng) -> Result<Forward, EncodeError> {
    let arch = &plan.arch;
    let lay = &plan.layout;
    let entropy = &arch.entropy;
    let (log_lo, log_hi) = entropy.log_sigma_bounds();
    let min_prob = entropy.min_prob();
    let mut g = Graph::new();
    let mut leaves = Vec::new();
    let t = plan.latent_count;
    let p = plan.hp_count;

    let noise_std = match relax {
        Relaxation::Soft { noise_std, .. } => noise_std,
        Relaxation::Straight => 0.0,
    };
    let y = leaf(&mut g, &mut leaves, values, lay.latents.start, vec![t])?;
    let y_noise: Vec<f64> = (0..t).map(|_| gaussian(noise_std, rng)).collect();
    let yq = quantize_node(&mut g, y, relax, &y_noise)?;

    // Hyperprior rate and resampled conditioning.
    let mut rate_s = None;
    let mut s_r = None;
    if arch.use_hyperprior {
        let s = leaf(&mut g, &mut leaves, values, lay.hyperprior.start, vec![p])?;
        let s_noise: Vec<f64> = (0..p).map(|_| gaussian(noise_std, rng)).collect();
        let sq = quantize_node(&mut g, s, relax, &s_noise)?;
        let ctx = g.gather(sq, plan.hp_ctx.clone(), vec![p, 3])?;
        let po = lay.params[ParamSet::Phi as usize].start;
        let (corr, raw) = if arch.cphi {
            let w1 = leaf(&mut g, &mut leaves, values, po, vec![3, 3])?;
            let b1 = leaf(&mut g, &mut leaves, values, po + 9, vec![3])?;
            let w2 = leaf(&mut g, &mut leaves, values, po + 12, vec![2, 3])?;
            let b2 = leaf(&mut g, &mut leaves, values, po + 18, vec![2])?;
            let h = g.dense(ctx, w1, b1)?;
            let h = g.add(h, ctx)?;
            let h = g.relu(h)?;
            let out = g.dense(h, w2, b2)?;
            (Some(g.gather(out, plan.split_p[0].clone(), vec![p])?), g.gather(out, plan.split_p[1].clone(), vec![p])?)
        } else {
            let r = leaf(&mut g, &mut leaves, values, po, vec![1])?;
            (None, g.gather(r, plan.hp_broadcast.clone(), vec![p])?)
        };
        let med = if arch.med {
            Some(match relax {
                Relaxation::Soft { med_temperature, .. } => g.med_soft(ctx, med_temperature)?,
                Relaxation::Straight => g.med_hard(ctx)?,
            })
        } else {
            None
        };
        let mu = match (corr, med) {
            (Some(c), Some(m)) => g.add(c, m)?,
            (Some(c), None) => c,
            (None, Some(m)) => m,
            (None, None) => g.constant(Tensor::zeros(vec![p])),
        };
        let log_sigma = g.clamp(raw, log_lo, log_hi)?;
        rate_s = Some(g.laplace_rate(sq, mu, log_sigma, min_prob)?);
        s_r = Some(g.sparse_linear(sq, plan.resampler.clone().expect("resampler"))?);
    }

    // Latent rate through C_ξ.
    let n = arch.context_size;
    let k = n + arch.conditioning_inputs();
    let mut sources = vec![yq];
    sources.extend(s_r);
    if arch.use_layer_index {
        sources.push(g.constant(Tensor::new(vec![t], plan.lbar.clone())?));
    }
    let pool = if sources.len() == 1 { yq } else { g.concat(&sources)? };
    let input = g.gather(pool, plan.input_idx.clone(), vec![t, k])?;
    let ctx = g.gather(yq, plan.ctx_idx.clone(), vec![t, n])?;
    let xo = lay.params[ParamSet::Xi as usize].start;
    let w1 = leaf(&mut g, &mut leaves, values, xo, vec![n, k])?;
    let mut off = xo + n * k;
    let b1 = leaf(&mut g, &mut leaves, values, off, vec![n])?;
    off += n;
    let w2 = leaf(&mut g, &mut leaves, values, off, vec![n, n])?;
    off += n * n;
    let b2 = leaf(&mut g, &mut leaves, values, off, vec![n])?;
    off += n;
    let w3 = leaf(&mut g, &mut leaves, values, off, vec![2, n])?;
    off += 2 * n;
    let b3 = leaf(&mut g, &mut leaves, values, off, vec![2])?;
    let h1 = g.dense(input, w1, b1)?;
    let h1 = g.add(h1, ctx)?;
    let h1 = g.relu(h1)?;
    let h2 = g.dense(h1, w2, b2)?;
    let h2 = g.add(h2, h1)?;
    let h2 = g.relu(h2)?;
    let out = g.dense(h2, w3, b3)?;
    let mu = g.gather(out, plan.split_t[0].clone(), vec![t])?;
    let raw = g.gather(out, plan.split_t[1].clone(), vec![t])?;
    let log_sigma = g.clamp(raw, log_lo, log_hi)?;
    let rate_y = g.laplace_rate(yq, mu, log_sigma, min_prob)?;

    // Upsampling cascade.
    let l_count = arch.layers;
    let uo = lay.params[ParamSet::Upsampler as usize].start;
    let taps: Vec<NodeId> = (0..l_count - 1).map(|s| leaf(&mut g, &mut leaves, values, uo + 4 * s, vec![4])).collect::<Result<_, _>>()?;
    let layer_node = |g: &mut Graph, l: usize| -> Result<NodeId, EncodeError> {
        let (h, w) = plan.shapes[l];
        Ok(g.gather(yq, plan.layer_slices[l].clone(), vec![1, h, w])?)
    };
    let mut acc = layer_node(&mut g, l_count - 1)?;
    for lvl in (0..l_count - 1).rev() {
        let (h, w) = plan.shapes[lvl];
        let a = g.upsample(acc, taps[lvl], Axis::Cols, w)?;
        let b = g.upsample(a, taps[lvl], Axis::Rows, h)?;
        let cur = layer_node(&mut g, lvl)?;
        let cat = g.concat(&[cur, b])?;
        acc = g.reshape(cat, vec![l_count - lvl, h, w])?;
    }

    // Synthesis.
    let c = arch.synth_channels;
    let so = lay.params[ParamSet::Synthesis as usize].start;
    let mut off = so;
    let mut next = |g: &mut Graph, leaves: &mut Vec<(NodeId, usize)>, shape: Vec<usize>| -> Result<NodeId, EncodeError> {
        let id = leaf(g, leaves, values, off, shape.clone())?;
        off += shape.iter().product::<usize>();
        Ok(id)
    };
    let sw1 = next(&mut g, &mut leaves, vec![c, l_count, 1, 1])?;
    let sb1 = next(&mut g, &mut leaves, vec![c])?;
    let sw2 = next(&mut g, &mut leaves, vec![3, c, 1, 1])?;
    let sb2 = next(&mut g, &mut leaves, vec![3])?;
    let sw3 = next(&mut g, &mut leaves, vec![3, 3, 3, 3])?;
    let sb3 = next(&mut g, &mut leaves, vec![3])?;
    let sw4 = next(&mut g, &mut leaves, vec![3, 3, 3, 3])?;
    let sb4 = next(&mut g, &mut leaves, vec![3])?;
    let x1 = g.conv2d(acc, sw1, sb1)?;
    let x1 = g.relu(x1)?;
    let x2 = g.conv2d(x1, sw2, sb2)?;
    let r3 = g.conv2d(x2, sw3, sb3)?;
    let x3 = g.add(x2, r3)?;
    let x3 = g.relu(x3)?;
    let r4 = g.conv2d(x3, sw4, sb4)?;
    let x4 = g.add(x3, r4)?;

    let diff = g.add_const(x4, &plan.neg_target)?;
    let sq = g.square(diff)?;
    let mse = g.mean(sq)?;
    let rate = match rate_s {
        Some(rs) => g.add(rate_y, rs)?,
        None => rate_y,
    };
    let pixels = (arch.height * arch.width) as f64;
    let scaled = g.scale(rate, lambda / pixels)?;
    let loss = g.add(mse, scaled)?;
    let parts = LossBreakdown {
        loss: g.value(loss).data()[0],
        mse: g.value(mse).data()[0],
        rate_y_bits: g.value(rate_y).data()[0],
        rate_s_bits: rate_s.map_or(0.0, |r| g.value(r).data()[0]),
    };
    Ok(Forward { graph: g, leaves, loss, parts })
}

fn gradient(fwd: &Forward, total: usize) -> Result<Vec<f64>, EncodeError> {
    let grads = fwd.graph.backward(fwd.loss)?;
    let mut out = vec![0.0; total];
    for &(id, off) in &fwd.leaves {
        if let Some(gv) = grads.get(id) {
            for (o, v) in out[off..off + gv.len()].iter_mut().zip(gv) {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// Validated target image and the fixed index tables for one encode.
pub struct Problem {
    plan: Plan,
    target: Vec<f64>,
}

impl Problem {
    pub fn new(image: &Image, config: &EncodeConfig) -> Result<Self, EncodeError> {
        config.validate()?;
        let arch = config.architecture(image.height, image.width)?;
        let target = image.to_planar();
        Ok(Self { plan: Plan::new(&arch, &target)?, target })
    }

    pub fn arch(&self) -> &Architecture {
        &self.plan.arch
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    /// Loss terms of `values` under a given relaxation; `noise_seed` fixes
    /// the quantization noise.
    pub fn loss(&self, values: &[f64], lambda: f64, relax: Relaxation, noise_seed: u64) -> Result<LossBreakdown, EncodeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        Ok(forward(&self.plan, values, lambda, relax, &mut rng)?.parts)
    }

    /// Loss terms and gradient with respect to every entry of `values`.
    pub fn loss_and_gradient(
        &self,
        values: &[f64],
        lambda: f64,
        relax: Relaxation,
        noise_seed: u64,
    ) -> Result<(LossBreakdown, Vec<f64>), EncodeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let fwd = forward(&self.plan, values, lambda, relax, &mut rng)?;
        let g = gradient(&fwd, values.len())?;
        Ok((fwd.parts, g))
    }
}

/// Per-iteration learning rate.
pub fn learning_rate(config: &EncodeConfig, iter: usize) -> f64 {
    let o = &config.optimizer;
    let p1 = config.schedule.phase1_iters;
    if iter >= p1 {
        return o.lr_end;
    }
    let f = iter as f64 / p1 as f64;
    o.lr_end + 0.5 * (o.lr_start - o.lr_end) * (1.0 + (std::f64::consts::PI * f).cos())
}

/// Loss history of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub final_terms: Option<LossBreakdown>,
}

/// Applies one Adam step with gradient `grad` at the state's iteration.
fn adam_step(state: &mut TrainState, grad: &[f64], config: &EncodeConfig) {
    let o = &config.optimizer;
    let lr = learning_rate(config, state.iteration);
    let t = (state.iteration + 1) as i32;
    let c1 = 1.0 - o.beta1.powi(t);
    let c2 = 1.0 - o.beta2.powi(t);
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = o.beta1 * state.m[i] + (1.0 - o.beta1) * g;
        state.v[i] = o.beta2 * state.v[i] + (1.0 - o.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        state.values[i] -= lr * mh / (vh.sqrt() + o.eps);
    }
    let ups = state.layout.params[ParamSet::Upsampler as usize].clone();
    for chunk in state.values[ups].chunks_mut(4) {
        let mut t: [f64; 4] = chunk.try_into().expect("four taps");
        normalize_taps(&mut t);
        chunk.copy_from_slice(&t);
    }
    state.iteration += 1;
}

/// Runs `iterations` optimizer steps from the state's current iteration.
pub fn train_steps(problem: &Problem, state: &mut TrainState, config: &EncodeConfig, iterations: usize, log: &mut TrainLog) -> Result<(), EncodeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    for _ in 0..state.iteration {
        // Keep the noise stream aligned with the iteration count.
        let _ = rand::Rng::gen::<u64>(&mut rng);
    }
    for _ in 0..iterations {
        let it = state.iteration;
        let relax = config.schedule.relaxation(it);
        let noise_seed = rand::Rng::gen::<u64>(&mut rng);
        let (parts, grad) = problem.loss_and_gradient(&state.values, config.lambda, relax, noise_seed)?;
        if !parts.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(EncodeError::Diverged { iteration: it, loss: parts.loss });
        }
        log.losses.push(parts.loss);
        log.final_terms = Some(parts);
        if it % 500 == 0 {
            debug!("iter {} loss {:.6} mse {:.6} Ry {:.1} Rs {:.1}", it, parts.loss, parts.mse, parts.rate_y_bits, parts.rate_s_bits);
        }
        adam_step(state, &grad, config);
    }
    Ok(())
}

/// Full two-phase training from a fresh state.
pub fn train(image: &Image, config: &EncodeConfig) -> Result<(TrainState, TrainLog), EncodeError> {
    let problem = Problem::new(image, config)?;
    let mut state = TrainState::init(*problem.arch(), config.seed);
    let mut log = TrainLog::default();
    train_steps(&problem, &mut state, config, config.schedule.total(), &mut log)?;
    Ok((state, log))
}

/// Rate/distortion of a fully quantized model, with rates from the
/// floored Laplace model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantizedEval {
    pub mse: f64,
    pub rate_y_bits: f64,
    pub rate_s_bits: f64,
}

fn floored_bits(v: i32, p: crate::entropy::LaplaceParams, min_prob: f64) -> f64 {
    -laplace_pmf(v as i64, p).unwrap_or(0.0).max(min_prob).log2()
}

fn hyperprior_rate(model: &CodecModel, s: &Grid<i32>) -> f64 {
    let Some(phi) = model.phi.as_ref() else { return 0.0 };
    let (h, w) = s.shape();
    let min_prob = model.arch.entropy.min_prob();
    let mut bits = 0.0;
    for i in 0..h {
        for j in 0..w {
            let p = hyperprior_distribution(s.data(), w, i, j, phi, &model.arch);
            bits += floored_bits(*s.get(i, j), p, min_prob);
        }
    }
    bits
}

fn latent_rate(model: &CodecModel, latents: &LatentPyramid, cond: &LatentConditioning) -> Result<f64, EncodeError> {
    let mut pred = LatentPredictor::new(model, cond)?;
    let min_prob = model.arch.entropy.min_prob();
    let mut bits = 0.0;
    for (l, g) in latents.layers.iter().enumerate() {
        let (h, w) = g.shape();
        for i in 0..h {
            for j in 0..w {
                let p = pred.distribution(g.data(), l, h, w, i, j);
                bits += floored_bits(*g.get(i, j), p, min_prob);
            }
        }
    }
    Ok(bits)
}

fn distortion(model: &CodecModel, latents: &LatentPyramid, target: &[f64]) -> Result<f64, EncodeError> {
    let (planar, _) = reconstruct(model, latents)?;
    Ok(planar.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / target.len() as f64)
}

pub fn evaluate_quantized(model: &CodecModel, latents: &LatentPyramid, hyperprior: Option<&Grid<i32>>, target: &[f64]) -> Result<QuantizedEval, EncodeError> {
    let cond = LatentConditioning::new(&model.arch, hyperprior);
    Ok(QuantizedEval {
        mse: distortion(model, latents, target)?,
        rate_y_bits: latent_rate(model, latents, &cond)?,
        rate_s_bits: hyperprior.map_or(0.0, |s| hyperprior_rate(model, s)),
    })
}

/// Candidate step exponents `k`, step `2^-k`.
pub const STEP_EXPONENTS: std::ops::RangeInclusive<u8> = 2..=8;

fn max_symbol(entropy: &EntropyConfig) -> i32 {
    (((1u64 << entropy.precision) - 1) / 2) as i32
}

fn quantize_values(v: &[f64], limit: i32) -> Result<Vec<i32>, EncodeError> {
    v.iter()
        .map(|&x| Ok((crate::quantize::round(x)?).clamp(-(limit as i64), limit as i64) as i32))
        .collect()
}

/// Per-section coding statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionStats {
    pub name: String,
    pub bytes: usize,
    /// Σ −log2 of the quantized table probabilities (range-coded sections).
    pub cross_entropy_bits: Option<f64>,
    /// Floored Laplace estimate (range-coded sections).
    pub estimated_bits: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncodeReport {
    pub total_bytes: usize,
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub step_exponents: [u8; 4],
    pub sections: Vec<SectionStats>,
    pub train: TrainLog,
}

/// Result of a complete encode.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub model: CodecModel,
    pub latents: LatentPyramid,
    pub hyperprior: Option<Grid<i32>>,
    pub reconstruction: Image,
    pub trace: ParityTrace,
    pub report: EncodeReport,
}

/// Greedy per-set step search minimizing `D + λ(R_y + R_s)/pixels` with
/// the candidate set quantized and earlier sets already fixed.
fn choose_steps(
    state: &TrainState,
    latents: &LatentPyramid,
    hyperprior: Option<&Grid<i32>>,
    target: &[f64],
    lambda: f64,
) -> Result<([u8; 4], [Vec<f64>; 4]), EncodeError> {
    let arch = state.arch;
    let pixels = (arch.height * arch.width) as f64;
    let mut flats: [Vec<f64>; 4] = ParamSet::ALL.map(|s| state.params(s).to_vec());
    let mut exps = [0u8; 4];
    let cond = LatentConditioning::new(&arch, hyperprior);
    for set in ParamSet::ALL {
        let si = set as usize;
        let original = flats[si].clone();
        let mut best: Option<(f64, u8, Vec<f64>)> = None;
        for k in STEP_EXPONENTS {
            let step = (-(k as f64)).exp2();
            let (_, rec) = serialize_params(&original, step)?;
            flats[si] = rec.clone();
            let model = CodecModel::from_flats(arch, [&flats[0], &flats[1], &flats[2], &flats[3]])?;
            // Only the terms this parameter set influences.
            let term = match set {
                ParamSet::Phi => lambda * hyperprior.map_or(0.0, |s| hyperprior_rate(&model, s)) / pixels,
                ParamSet::Xi => lambda * latent_rate(&model, latents, &cond)? / pixels,
                ParamSet::Upsampler | ParamSet::Synthesis => distortion(&model, latents, target)?,
            };
            let cost = term;
            if cost.is_finite() && best.as_ref().map_or(true, |b| cost < b.0) {
                best = Some((cost, k, rec));
            }
        }
        let (_, k, rec) = best.ok_or_else(|| EncodeError::Config("no finite quantization step".into()))?;
        exps[si] = k;
        flats[si] = rec;
    }
    Ok((exps, flats))
}

/// Quantizes a trained state, writes the bitstream and verifies it by
/// decoding.
pub fn finalize(state: &TrainState, image: &Image, config: &EncodeConfig, log: TrainLog) -> Result<Encoded, EncodeError> {
    let arch = state.arch;
    let geom = arch.geometry();
    let target = image.to_planar();
    let limit = max_symbol(&arch.entropy);

    let latents = LatentPyramid::from_flat(&geom, &quantize_values(state.latents(), limit)?)?;
    let hyperprior = if arch.use_hyperprior {
        let (sh, sw) = geom.hyperprior_shape();
        Some(Grid::new(sh, sw, quantize_values(state.hyperprior(), limit)?)?)
    } else {
        None
    };

    let (step_exponents, _) = choose_steps(state, &latents, hyperprior.as_ref(), &target, config.lambda)?;
    let mut payloads = Vec::with_capacity(4);
    let mut recs = Vec::with_capacity(4);
    for set in ParamSet::ALL {
        let (bytes, rec) = serialize_params(state.params(set), (-(step_exponents[set as usize] as f64)).exp2())?;
        payloads.push(bytes);
        recs.push(rec);
    }
    let model = CodecModel::from_flats(arch, [&recs[0], &recs[1], &recs[2], &recs[3]])?;

    let precision = arch.entropy.precision;
    let mut trace = ParityTrace::new();
    let mut sections: Vec<Section> = ParamSet::ALL
        .iter()
        .zip(payloads)
        .map(|(&set, payload)| Section { kind: SectionKind::Params(set), payload })
        .collect();
    let mut stats: Vec<(f64, f64)> = Vec::new();
    let min_prob = arch.entropy.min_prob();

    let hyperprior_support = hyperprior.as_ref().map_or(0, |s| s.data().iter().map(|v| v.unsigned_abs()).max().unwrap_or(0));
    if let (Some(s), Some(phi)) = (hyperprior.as_ref(), model.phi.as_ref()) {
        let (h, w) = s.shape();
        let a = hyperprior_support as i32;
        let mut enc = RangeEncoder::new();
        let (mut ce, mut est) = (0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let p = hyperprior_distribution(s.data(), w, i, j, phi, &arch);
                trace.push((p.mu, p.sigma));
                let table = build_cdf(p, (-a, a), precision)?;
                let v = *s.get(i, j);
                ce += table.bits(v);
                est += floored_bits(v, p, min_prob);
                enc.encode(v, &table)?;
            }
        }
        sections.push(Section { kind: SectionKind::Hyperprior, payload: enc.finish() });
        stats.push((ce, est));
    }

    let cond = LatentConditioning::new(&arch, hyperprior.as_ref());
    let supports = latents.supports();
    let mut pred = LatentPredictor::new(&model, &cond)?;
    for (l, g) in latents.layers.iter().enumerate() {
        let (h, w) = g.shape();
        let a = supports[l] as i32;
        let mut enc = RangeEncoder::new();
        let (mut ce, mut est) = (0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let p = pred.distribution(g.data(), l, h, w, i, j);
                trace.push((p.mu, p.sigma));
                let table = build_cdf(p, (-a, a), precision)?;
                let v = *g.get(i, j);
                ce += table.bits(v);
                est += floored_bits(v, p, min_prob);
                enc.encode(v, &table)?;
            }
        }
        sections.push(Section { kind: SectionKind::Latent(l as u8), payload: enc.finish() });
        stats.push((ce, est));
    }

    let header = BitstreamHeader {
        height: arch.height as u32,
        width: arch.width as u32,
        layers: arch.layers as u8,
        downsampling: arch.downsampling as u8,
        context_size: arch.context_size as u8,
        synth_channels: arch.synth_channels as u16,
        flags: arch.header_flags(config.checksum),
        precision: precision as u8,
        sigma_min: arch.entropy.sigma_min,
        sigma_max: arch.entropy.sigma_max,
        hyperprior_support,
        latent_supports: supports,
        param_counts: ParamSet::ALL.map(|s| arch.param_count(s) as u32),
        step_exponents,
    };
    let bs = Bitstream { header, sections };
    let bytes = bs.to_bytes()?;
    let (planar, reconstruction) = reconstruct(&model, &latents)?;

    // Decode-verify.
    let dec = decode_with(&bytes, &DecodeOptions { trace: true, ..Default::default() })?;
    if dec.latents != latents {
        return Err(EncodeError::SelfCheck("latents differ".into()));
    }
    if dec.hyperprior != hyperprior {
        return Err(EncodeError::SelfCheck("hyperprior differs".into()));
    }
    for set in ParamSet::ALL {
        let (a, b) = (dec.model.flat(set), model.flat(set));
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(EncodeError::SelfCheck(format!("{:?} parameters differ", set)));
        }
    }
    let dec_trace = dec.trace.as_ref().expect("trace requested");
    if dec_trace.len() != trace.len()
        || dec_trace.iter().zip(&trace).any(|(a, b)| a.0.to_bits() != b.0.to_bits() || a.1.to_bits() != b.1.to_bits())
    {
        return Err(EncodeError::SelfCheck("context parity mismatch".into()));
    }
    if dec.image != reconstruction {
        return Err(EncodeError::SelfCheck("reconstruction differs".into()));
    }

    let spans = Bitstream::spans(&bytes)?;
    let coded_start = 1 + ParamSet::ALL.len();
    let sections_report = spans
        .iter()
        .enumerate()
        .map(|(i, sp)| {
            let (ce, est) = if i >= coded_start { (Some(stats[i - coded_start].0), Some(stats[i - coded_start].1)) } else { (None, None) };
            SectionStats { name: sp.kind.map_or("header".into(), |k| k.label()), bytes: sp.length, cross_entropy_bits: ce, estimated_bits: est }
        })
        .collect();
    let img_planar = reconstruction.to_planar();
    let mse8 = img_planar.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / target.len() as f64;
    let _ = planar;
    let report = EncodeReport {
        total_bytes: bytes.len(),
        bpp: bytes.len() as f64 * 8.0 / (arch.height * arch.width) as f64,
        mse: mse8,
        psnr: if mse8 == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse8).log10() },
        step_exponents,
        sections: sections_report,
        train: log,
    };
    info!("encoded {}x{}: {} bytes, {:.4} bpp, {:.2} dB", arch.width, arch.height, report.total_bytes, report.bpp, report.psnr);
    Ok(Encoded { bytes, model, latents, hyperprior, reconstruction, trace, report })
}

/// Trains and finalizes.
pub fn encode(image: &Image, config: &EncodeConfig) -> Result<Encoded, EncodeError> {
    let (state, log) = train(image, config)?;
    finalize(&state, image, config, log)
}
