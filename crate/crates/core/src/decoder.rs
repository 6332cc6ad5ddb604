//! Decoding pipeline and the model description shared with the encoder.
//!
//! The per-symbol distribution functions here are the only place where
//! Laplace parameters for coded symbols are computed; the encoder calls the
//! same functions so both sides build identical tables.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coder::{deserialize_params, Bitstream, BitstreamHeader, CoderError, HeaderFlags, ParamSet, RangeDecoder, SectionKind};
use crate::context::{cphi_forward, med_predict, ContextError, ContextWindow, HyperpriorContextModel, LatentContextModel, SUPPORTED_SIZES};
use crate::entropy::{build_cdf, EntropyConfig, EntropyError, LaplaceParams};
use crate::pyramid::{
    synthesize, Geometry, Grid, LatentPyramid, PyramidError, ResampleMode, Resampler, SynthesisParams, UpsamplerParams,
    upsample_pyramid,
};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error("invalid header: {0}")]
    Header(String),
    #[error("missing section {0}")]
    MissingSection(String),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything about the model layout that the header fixes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub height: usize,
    pub width: usize,
    pub layers: usize,
    pub downsampling: usize,
    pub context_size: usize,
    pub synth_channels: usize,
    pub use_hyperprior: bool,
    pub use_layer_index: bool,
    pub resample_mode: ResampleMode,
    pub med: bool,
    pub cphi: bool,
    pub entropy: EntropyConfig,
}

pub const MAX_DIMENSION: usize = 1 << 15;
pub const MAX_SYNTH_CHANNELS: usize = 1024;

impl Architecture {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::Header(m));
        if self.height == 0 || self.width == 0 || self.height > MAX_DIMENSION || self.width > MAX_DIMENSION {
            return bad(format!("image size {}x{}", self.width, self.height));
        }
        Geometry::new(self.height, self.width, self.layers, self.downsampling)?;
        if !SUPPORTED_SIZES.contains(&self.context_size) {
            return bad(format!("context size {}", self.context_size));
        }
        if self.synth_channels == 0 || self.synth_channels > MAX_SYNTH_CHANNELS {
            return bad(format!("synthesis channels {}", self.synth_channels));
        }
        let e = &self.entropy;
        if !(12..=16).contains(&e.precision) {
            return bad(format!("precision {}", e.precision));
        }
        if !(e.sigma_min > 0.0 && e.sigma_min < e.sigma_max && e.sigma_max.is_finite()) {
            return bad(format!("sigma bounds [{}, {}]", e.sigma_min, e.sigma_max));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry { height: self.height, width: self.width, layers: self.layers, downsampling: self.downsampling }
    }

    /// Conditioning inputs appended to the `C_ξ` context.
    pub fn conditioning_inputs(&self) -> usize {
        self.use_hyperprior as usize + self.use_layer_index as usize
    }

    pub fn param_count(&self, set: ParamSet) -> usize {
        match set {
            ParamSet::Phi if !self.use_hyperprior => 0,
            ParamSet::Phi if self.cphi => HyperpriorContextModel::LEARNED_PARAMS,
            ParamSet::Phi => 1,
            ParamSet::Xi => LatentContextModel::count_for(self.context_size, self.conditioning_inputs()),
            ParamSet::Upsampler => 4 * (self.layers - 1),
            ParamSet::Synthesis => SynthesisParams::count_for(self.layers, self.synth_channels),
        }
    }

    pub fn from_header(h: &BitstreamHeader) -> Result<Self, DecodeError> {
        let arch = Self {
            height: h.height as usize,
            width: h.width as usize,
            layers: h.layers as usize,
            downsampling: h.downsampling as usize,
            context_size: h.context_size as usize,
            synth_channels: h.synth_channels as usize,
            use_hyperprior: h.flags.use_hyperprior,
            use_layer_index: h.flags.use_layer_index,
            resample_mode: if h.flags.resample_area { ResampleMode::Area } else { ResampleMode::Bicubic },
            med: h.flags.med,
            cphi: h.flags.cphi,
            entropy: EntropyConfig { precision: h.precision as u32, sigma_min: h.sigma_min, sigma_max: h.sigma_max },
        };
        arch.validate()?;
        for set in ParamSet::ALL {
            if h.param_count(set) != arch.param_count(set) {
                return Err(DecodeError::Header(format!(
                    "{:?} parameter count {} does not match architecture ({})",
                    set,
                    h.param_count(set),
                    arch.param_count(set)
                )));
            }
            if !(2..=8).contains(&h.step_exponents[set as usize]) {
                return Err(DecodeError::Header(format!("step exponent {}", h.step_exponents[set as usize])));
            }
        }
        let max_support = ((1u64 << arch.entropy.precision) - 1) / 2;
        if h.latent_supports.iter().chain([&h.hyperprior_support]).any(|&a| a as u64 > max_support) {
            return Err(DecodeError::Header("symbol support exceeds table precision".into()));
        }
        Ok(arch)
    }

    pub fn header_flags(&self, checksum: bool) -> HeaderFlags {
        HeaderFlags {
            use_hyperprior: self.use_hyperprior,
            use_layer_index: self.use_layer_index,
            resample_area: self.resample_mode == ResampleMode::Area,
            med: self.med,
            cphi: self.cphi,
            checksum,
        }
    }
}

/// All decoder-side networks.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecModel {
    pub arch: Architecture,
    /// Present only with the hyperprior enabled.
    pub phi: Option<HyperpriorContextModel>,
    pub xi: LatentContextModel,
    pub upsampler: UpsamplerParams,
    pub synthesis: SynthesisParams,
}

impl CodecModel {
    pub fn flat(&self, set: ParamSet) -> Vec<f64> {
        match set {
            ParamSet::Phi => self.phi.as_ref().map_or_else(Vec::new, |p| p.to_flat()),
            ParamSet::Xi => self.xi.to_flat(),
            ParamSet::Upsampler => self.upsampler.to_flat(),
            ParamSet::Synthesis => self.synthesis.to_flat(),
        }
    }

    pub fn from_flats(arch: Architecture, flats: [&[f64]; 4]) -> Result<Self, DecodeError> {
        let phi = if arch.use_hyperprior { Some(HyperpriorContextModel::from_flat(arch.cphi, flats[0])?) } else { None };
        if !arch.use_hyperprior && !flats[0].is_empty() {
            return Err(DecodeError::Header("C_phi parameters without a hyperprior".into()));
        }
        Ok(Self {
            arch,
            phi,
            xi: LatentContextModel::from_flat(arch.context_size, arch.conditioning_inputs(), flats[1])?,
            upsampler: UpsamplerParams::from_flat(arch.layers, flats[2])?,
            synthesis: SynthesisParams::from_flat(arch.layers, arch.synth_channels, flats[3])?,
        })
    }

    pub fn param_count(&self) -> usize {
        ParamSet::ALL.iter().map(|&s| self.arch.param_count(s)).sum()
    }
}

/// Distribution of the hyperprior symbol at `(i, j)` given the causal part
/// of `grid`.
pub fn hyperprior_distribution(grid: &[i32], w: usize, i: usize, j: usize, phi: &HyperpriorContextModel, arch: &Architecture) -> LaplaceParams {
    let at = |r: Option<usize>, c: Option<usize>| match (r, c) {
        (Some(r), Some(c)) => grid[r * w + c],
        _ => 0,
    };
    let left = at(Some(i), j.checked_sub(1));
    let top = at(i.checked_sub(1), Some(j));
    let top_left = at(i.checked_sub(1), j.checked_sub(1));
    let (corr, sigma) = cphi_forward([left as f64, top as f64, top_left as f64], phi, &arch.entropy);
    let mu = if arch.med { corr + med_predict(left, top, top_left) as f64 } else { corr };
    LaplaceParams { mu, sigma }
}

/// Conditioning values shared by every latent layer.
#[derive(Debug, Clone)]
pub struct LatentConditioning {
    /// Resampled hyperprior over the flat layer concatenation.
    pub s_r: Option<Vec<f64>>,
    pub offsets: Vec<usize>,
}

impl LatentConditioning {
    pub fn new(arch: &Architecture, hyperprior: Option<&Grid<i32>>) -> Self {
        let geom = arch.geometry();
        let s_r = hyperprior.map(|s| {
            let sf: Vec<f64> = s.data().iter().map(|&v| v as f64).collect();
            Resampler::new(&geom, arch.resample_mode).apply(&sf)
        });
        Self { s_r, offsets: geom.layer_offsets() }
    }
}

/// Scratch buffers for per-symbol `C_ξ` evaluation.
pub struct LatentPredictor<'a> {
    arch: &'a Architecture,
    xi: &'a LatentContextModel,
    cond: &'a LatentConditioning,
    window: ContextWindow,
    input: Vec<f64>,
}

impl<'a> LatentPredictor<'a> {
    pub fn new(model: &'a CodecModel, cond: &'a LatentConditioning) -> Result<Self, DecodeError> {
        Ok(Self {
            arch: &model.arch,
            xi: &model.xi,
            cond,
            window: ContextWindow::new(model.arch.context_size)?,
            input: vec![0.0; model.xi.input_size()],
        })
    }

    /// Distribution of the symbol at `(i, j)` of layer `l`, reading only
    /// causal entries of `layer`.
    pub fn distribution(&mut self, layer: &[i32], l: usize, h: usize, w: usize, i: usize, j: usize) -> LaplaceParams {
        let n = self.window.len();
        for (k, &(dr, dc)) in self.window.taps().iter().enumerate() {
            let r = i as i64 + dr as i64;
            let c = j as i64 + dc as i64;
            self.input[k] = if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 { 0.0 } else { layer[r as usize * w + c as usize] as f64 };
        }
        let mut k = n;
        if let Some(s_r) = &self.cond.s_r {
            self.input[k] = s_r[self.cond.offsets[l] + i * w + j];
            k += 1;
        }
        if self.arch.use_layer_index {
            self.input[k] = l as f64 / self.arch.layers as f64;
        }
        let (mu, raw) = self.xi.forward_raw(&self.input);
        LaplaceParams { mu, sigma: self.arch.entropy.sigma_from_raw(raw) }
    }
}

/// Per-symbol `(μ, σ)` recorded while coding, for encoder/decoder parity
/// checks.
pub type ParityTrace = Vec<(f64, f64)>;

fn table_for(p: LaplaceParams, support: u32, precision: u32) -> Result<crate::entropy::CdfTable, DecodeError> {
    let a = support as i32;
    Ok(build_cdf(p, (-a, a), precision)?)
}

/// Decodes the hyperprior section.
pub fn decode_hyperprior(
    payload: &[u8],
    model: &CodecModel,
    support: u32,
    mut trace: Option<&mut ParityTrace>,
) -> Result<Grid<i32>, DecodeError> {
    let arch = &model.arch;
    let phi = model.phi.as_ref().ok_or_else(|| DecodeError::Header("hyperprior without C_phi".into()))?;
    let (h, w) = arch.geometry().hyperprior_shape();
    let mut grid = vec![0i32; h * w];
    let mut dec = RangeDecoder::new(payload);
    for i in 0..h {
        for j in 0..w {
            let p = hyperprior_distribution(&grid, w, i, j, phi, arch);
            if let Some(t) = trace.as_deref_mut() {
                t.push((p.mu, p.sigma));
            }
            grid[i * w + j] = dec.decode(&table_for(p, support, arch.entropy.precision)?)?;
        }
    }
    dec.finish()?;
    Ok(Grid::new(h, w, grid)?)
}

/// Decodes latent layer `l` using only shared state; no other latent layer
/// is consulted.
pub fn decode_layer(
    payload: &[u8],
    l: usize,
    model: &CodecModel,
    cond: &LatentConditioning,
    support: u32,
    mut trace: Option<&mut ParityTrace>,
) -> Result<Grid<i32>, DecodeError> {
    let (h, w) = model.arch.geometry().layer_shape(l);
    let mut pred = LatentPredictor::new(model, cond)?;
    let mut layer = vec![0i32; h * w];
    let mut dec = RangeDecoder::new(payload);
    for i in 0..h {
        for j in 0..w {
            let p = pred.distribution(&layer, l, h, w, i, j);
            if let Some(t) = trace.as_deref_mut() {
                t.push((p.mu, p.sigma));
            }
            layer[i * w + j] = dec.decode(&table_for(p, support, model.arch.entropy.precision)?)?;
        }
    }
    dec.finish()?;
    Ok(Grid::new(h, w, layer)?)
}

/// 8-bit RGB image, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, DecodeError> {
        if data.len() != 3 * width * height || width == 0 || height == 0 {
            return Err(DecodeError::Image(format!("{}x{} RGB needs {} bytes, got {}", width, height, 3 * width * height, data.len())));
        }
        Ok(Self { width, height, data })
    }

    /// Planar `[3 × H × W]` samples in `[0, 1]`.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[3 * p + c] as f64 / 255.0;
            }
        }
        out
    }

    /// Quantizes planar samples (clamped to `[0, 1]`) to 8 bits.
    pub fn from_planar(width: usize, height: usize, planar: &[f64]) -> Result<Self, DecodeError> {
        let hw = width * height;
        if planar.len() != 3 * hw {
            return Err(DecodeError::Image(format!("planar buffer of {} for {}x{}", planar.len(), width, height)));
        }
        let mut data = vec![0u8; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[3 * p + c] = (planar[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Self::new(width, height, data)
    }
}

fn ppm_token<R: BufRead>(r: &mut R) -> Result<String, DecodeError> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(DecodeError::Image("unexpected end of PPM header".into()));
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut line = Vec::new();
                r.read_until(b'\n', &mut line)?;
            }
            b if b.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            b => tok.push(b as char),
        }
    }
}

/// Reads a binary (P6) PPM with maxval 255.
pub fn read_ppm<R: BufRead>(mut r: R) -> Result<Image, DecodeError> {
    if ppm_token(&mut r)? != "P6" {
        return Err(DecodeError::Image("not a binary PPM (P6)".into()));
    }
    let mut num = |what: &str| -> Result<usize, DecodeError> {
        ppm_token(&mut r)?.parse().map_err(|_| DecodeError::Image(format!("bad PPM {}", what)))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(DecodeError::Image(format!("unsupported PPM maxval {}", maxval)));
    }
    if width == 0 || height == 0 || width > MAX_DIMENSION || height > MAX_DIMENSION {
        return Err(DecodeError::Image(format!("PPM size {}x{}", width, height)));
    }
    let mut data = vec![0u8; 3 * width * height];
    r.read_exact(&mut data).map_err(|_| DecodeError::Image("truncated PPM pixel data".into()))?;
    Image::new(width, height, data)
}

pub fn write_ppm<W: Write>(mut w: W, img: &Image) -> Result<(), DecodeError> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

/// Binary (P5) 8-bit grayscale.
pub fn write_pgm<W: Write>(mut w: W, width: usize, height: usize, data: &[u8]) -> Result<(), DecodeError> {
    write!(w, "P5\n{} {}\n255\n", width, height)?;
    w.write_all(data)?;
    Ok(())
}

/// Upsamples, synthesizes and quantizes a decoded pyramid.
pub fn reconstruct(model: &CodecModel, latents: &LatentPyramid) -> Result<(Vec<f64>, Image), DecodeError> {
    let arch = &model.arch;
    let layers: Vec<Grid<f64>> = latents
        .layers
        .iter()
        .map(|g| Grid::new(g.height(), g.width(), g.data().iter().map(|&v| v as f64).collect()))
        .collect::<Result<_, _>>()?;
    let u = upsample_pyramid(&layers, &model.upsampler)?;
    let planar = synthesize(&u, arch.height, arch.width, &model.synthesis)?;
    let img = Image::from_planar(arch.width, arch.height, &planar)?;
    Ok((planar, img))
}

/// How latent layers are scheduled.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum LayerSchedule {
    #[default]
    Parallel,
    /// Sequential in the given order (a permutation of `0..L`).
    Ordered(Vec<usize>),
}

#[derive(Debug, Clone, Default)]
pub struct DecodeOptions {
    pub schedule: LayerSchedule,
    pub trace: bool,
}

/// Every intermediate of a decode.
#[derive(Debug, Clone)]
pub struct DecodeContext {
    pub header: BitstreamHeader,
    pub model: CodecModel,
    pub hyperprior: Option<Grid<i32>>,
    pub latents: LatentPyramid,
    /// Synthesis output in `[0, 1]`, planar.
    pub planar: Vec<f64>,
    pub image: Image,
    /// Hyperprior trace followed by each layer's trace in layer order.
    pub trace: Option<ParityTrace>,
}

fn payload(bs: &Bitstream, kind: SectionKind) -> Result<&[u8], DecodeError> {
    bs.section(kind).map(|s| &s.payload[..]).ok_or_else(|| DecodeError::MissingSection(kind.label()))
}

/// Parses the header and parameter sections.
pub fn decode_model(bs: &Bitstream) -> Result<CodecModel, DecodeError> {
    let arch = Architecture::from_header(&bs.header)?;
    let mut flats: Vec<Vec<f64>> = Vec::with_capacity(4);
    for set in ParamSet::ALL {
        let p = payload(bs, SectionKind::Params(set))?;
        flats.push(deserialize_params(p, arch.param_count(set), bs.header.step(set))?);
    }
    CodecModel::from_flats(arch, [&flats[0], &flats[1], &flats[2], &flats[3]])
}

pub fn decode_with(bytes: &[u8], opts: &DecodeOptions) -> Result<DecodeContext, DecodeError> {
    let bs = Bitstream::from_bytes(bytes)?;
    let model = decode_model(&bs)?;
    let arch = model.arch;
    let h = &bs.header;
    let mut trace = opts.trace.then(Vec::new);
    let hyperprior = if arch.use_hyperprior {
        Some(decode_hyperprior(payload(&bs, SectionKind::Hyperprior)?, &model, h.hyperprior_support, trace.as_mut())?)
    } else {
        None
    };
    let cond = LatentConditioning::new(&arch, hyperprior.as_ref());
    let run = |l: usize| -> Result<(Grid<i32>, ParityTrace), DecodeError> {
        let mut t = Vec::new();
        let p = payload(&bs, SectionKind::Latent(l as u8))?;
        let g = decode_layer(p, l, &model, &cond, h.latent_supports[l], opts.trace.then_some(&mut t))?;
        Ok((g, t))
    };
    let results: Vec<(Grid<i32>, ParityTrace)> = match &opts.schedule {
        LayerSchedule::Parallel => (0..arch.layers).into_par_iter().map(run).collect::<Result<_, _>>()?,
        LayerSchedule::Ordered(order) => {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..arch.layers).collect::<Vec<_>>() {
                return Err(DecodeError::Header(format!("layer order {:?} is not a permutation", order)));
            }
            let mut slots: Vec<Option<(Grid<i32>, ParityTrace)>> = vec![None; arch.layers];
            for &l in order {
                slots[l] = Some(run(l)?);
            }
            slots.into_iter().map(|s| s.expect("every layer decoded")).collect()
        }
    };
    let mut layers = Vec::with_capacity(arch.layers);
    for (g, t) in results {
        if let Some(tr) = trace.as_mut() {
            tr.extend(t);
        }
        layers.push(g);
    }
    let latents = LatentPyramid { layers };
    let (planar, image) = reconstruct(&model, &latents)?;
    Ok(DecodeContext { header: bs.header, model, hyperprior, latents, planar, image, trace })
}

pub fn decode(bytes: &[u8]) -> Result<Image, DecodeError> {
    Ok(decode_with(bytes, &DecodeOptions::default())?.image)
}
