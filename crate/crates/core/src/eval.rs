//! Evaluation utilities: PSNR, BD-rate, decoder complexity, bitstream
//! composition, hyperprior visualization and multi-seed sweeps.

use serde::Serialize;
use thiserror::Error;

use crate::coder::{Bitstream, CoderError, ParamSet, SectionKind};
use crate::context::{HyperpriorContextModel, LatentContextModel};
use crate::decoder::{decode_hyperprior, decode_model, Architecture, DecodeError, Image};
use crate::encoder::{encode, EncodeConfig, EncodeError};
use crate::pyramid::{upsampler_macs, Resampler, SynthesisParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid rate-distortion curve: {0}")]
    InvalidCurve(String),
    #[error("curves have no overlapping PSNR range")]
    NoOverlap,
    #[error("bitstream carries no spatial hyperprior")]
    NoHyperprior,
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// PSNR in dB between two 8-bit RGB images over all samples jointly.
/// Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, EvalError> {
    if a.width != b.width || a.height != b.height {
        return Err(EvalError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let sse: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / a.data.len() as f64;
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct RdPoint {
    /// Bits per pixel.
    pub rate: f64,
    /// PSNR in dB.
    pub psnr: f64,
}

/// At least four points, sorted by rate, PSNR strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self, EvalError> {
        if points.len() < 4 {
            return Err(EvalError::InvalidCurve(format!("need at least 4 points, got {}", points.len())));
        }
        if points.iter().any(|p| !(p.rate > 0.0 && p.rate.is_finite() && p.psnr.is_finite())) {
            return Err(EvalError::InvalidCurve("rates must be positive and PSNR finite".into()));
        }
        points.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        if points.windows(2).any(|w| w[1].psnr <= w[0].psnr) {
            return Err(EvalError::InvalidCurve("PSNR must increase with rate".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }
}

/// Piecewise cubic Akima interpolant.
#[derive(Debug, Clone)]
pub struct Akima {
    x: Vec<f64>,
    y: Vec<f64>,
    slopes: Vec<f64>,
}

impl Akima {
    /// `x` strictly increasing, at least three nodes.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        assert!(n >= 3 && y.len() == n);
        // Secants padded by two extrapolated values on either side.
        let mut m = vec![0.0; n + 3];
        for i in 0..n - 1 {
            m[i + 2] = (y[i + 1] - y[i]) / (x[i + 1] - x[i]);
        }
        m[1] = 2.0 * m[2] - m[3];
        m[0] = 2.0 * m[1] - m[2];
        m[n + 1] = 2.0 * m[n] - m[n - 1];
        m[n + 2] = 2.0 * m[n + 1] - m[n];
        let slopes = (0..n)
            .map(|i| {
                let w1 = (m[i + 3] - m[i + 2]).abs();
                let w2 = (m[i + 1] - m[i]).abs();
                if w1 + w2 == 0.0 {
                    0.5 * (m[i + 1] + m[i + 2])
                } else {
                    (w1 * m[i + 1] + w2 * m[i + 2]) / (w1 + w2)
                }
            })
            .collect();
        Self { x, y, slopes }
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.x.len();
        self.x[1..n - 1].partition_point(|&v| v <= x)
    }

    fn coefficients(&self, i: usize) -> [f64; 4] {
        let h = self.x[i + 1] - self.x[i];
        let m = (self.y[i + 1] - self.y[i]) / h;
        let (t0, t1) = (self.slopes[i], self.slopes[i + 1]);
        [self.y[i], t0, (3.0 * m - 2.0 * t0 - t1) / h, (t0 + t1 - 2.0 * m) / (h * h)]
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let [a, b, c, d] = self.coefficients(i);
        let s = x - self.x[i];
        a + s * (b + s * (c + s * d))
    }

    /// Exact integral over `[lo, hi]` within the node range.
    pub fn integrate(&self, lo: f64, hi: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.x.len() - 1 {
            let (a0, a1) = (self.x[i].max(lo), self.x[i + 1].min(hi));
            if a1 <= a0 {
                continue;
            }
            let [a, b, c, d] = self.coefficients(i);
            let prim = |s: f64| s * (a + s * (b / 2.0 + s * (c / 3.0 + s * d / 4.0)));
            total += prim(a1 - self.x[i]) - prim(a0 - self.x[i]);
        }
        total
    }
}

/// Average rate difference of `test` against `reference` at equal PSNR,
/// in percent. Negative values mean `test` needs less rate.
pub fn bd_rate(reference: &RdCurve, test: &RdCurve) -> Result<f64, EvalError> {
    let fit = |c: &RdCurve| {
        let (x, y) = c.points.iter().map(|p| (p.psnr, p.rate.log10())).unzip();
        Akima::new(x, y)
    };
    let lo = reference.points[0].psnr.max(test.points[0].psnr);
    let hi = reference.points.last().unwrap().psnr.min(test.points.last().unwrap().psnr);
    if hi <= lo {
        return Err(EvalError::NoOverlap);
    }
    let avg = (fit(test).integrate(lo, hi) - fit(reference).integrate(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// Decoder MACs per pixel by module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub context_xi: f64,
    pub upsampler: f64,
    pub synthesis: f64,
    pub context_phi: f64,
    pub resampler: f64,
    pub total: f64,
}

pub fn mac_per_pixel(arch: &Architecture) -> ComplexityReport {
    let geom = arch.geometry();
    let pixels = geom.pixels() as f64;
    let context_xi = LatentContextModel::macs(arch.context_size, arch.conditioning_inputs()) as f64 * geom.density();
    let upsampler = upsampler_macs(&geom);
    let synthesis = SynthesisParams::macs_per_pixel(arch.layers, arch.synth_channels) as f64;
    let (context_phi, resampler) = if arch.use_hyperprior {
        let (sh, sw) = geom.hyperprior_shape();
        let phi = if arch.cphi { HyperpriorContextModel::LEARNED_MACS as f64 * (sh * sw) as f64 / pixels } else { 0.0 };
        (phi, Resampler::new(&geom, arch.resample_mode).separable_macs() as f64 / pixels)
    } else {
        (0.0, 0.0)
    };
    ComplexityReport {
        context_xi,
        upsampler,
        synthesis,
        context_phi,
        resampler,
        total: context_xi + upsampler + synthesis + context_phi + resampler,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionEntry {
    pub name: String,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShareEntry {
    pub component: &'static str,
    pub bytes: usize,
    pub percent: f64,
}

/// Byte composition of a bitstream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Breakdown {
    pub total_bytes: usize,
    pub sections: Vec<SectionEntry>,
    /// Latents, ξ, υ, θ, φ, hyperprior, header.
    pub shares: Vec<ShareEntry>,
}

pub const BREAKDOWN_COMPONENTS: [&str; 7] = ["latents", "context_xi", "upsampler", "synthesis", "context_phi", "hyperprior", "header"];

fn component_index(kind: Option<SectionKind>) -> usize {
    match kind {
        Some(SectionKind::Latent(_)) => 0,
        Some(SectionKind::Params(ParamSet::Xi)) => 1,
        Some(SectionKind::Params(ParamSet::Upsampler)) => 2,
        Some(SectionKind::Params(ParamSet::Synthesis)) => 3,
        Some(SectionKind::Params(ParamSet::Phi)) => 4,
        Some(SectionKind::Hyperprior) => 5,
        None => 6,
    }
}

pub fn report_breakdown(bytes: &[u8]) -> Result<Breakdown, EvalError> {
    let spans = Bitstream::spans(bytes)?;
    let mut sizes = [0usize; 7];
    let sections = spans
        .iter()
        .map(|s| {
            sizes[component_index(s.kind)] += s.length;
            SectionEntry { name: s.kind.map_or_else(|| "header".to_string(), |k| k.label()), offset: s.offset, bytes: s.length }
        })
        .collect();
    let total = bytes.len();
    let shares = BREAKDOWN_COMPONENTS
        .iter()
        .zip(sizes)
        .map(|(&component, b)| ShareEntry { component, bytes: b, percent: 100.0 * b as f64 / total as f64 })
        .collect();
    Ok(Breakdown { total_bytes: total, sections, shares })
}

/// 8-bit grayscale rendering of the decoded hyperprior.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperpriorMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Min-max normalizes the decoded hyperprior to 0..=255; a constant grid
/// maps to 128.
pub fn dump_hyperprior(bytes: &[u8]) -> Result<HyperpriorMap, EvalError> {
    let bs = Bitstream::from_bytes(bytes)?;
    if !bs.header.flags.use_hyperprior {
        return Err(EvalError::NoHyperprior);
    }
    let model = decode_model(&bs)?;
    let payload = bs.section(SectionKind::Hyperprior).ok_or(EvalError::NoHyperprior)?;
    let grid = decode_hyperprior(&payload.payload, &model, bs.header.hyperprior_support, None)?;
    let (height, width) = grid.shape();
    let lo = *grid.data().iter().min().unwrap();
    let hi = *grid.data().iter().max().unwrap();
    let data = grid
        .data()
        .iter()
        .map(|&v| if hi == lo { 128 } else { (255.0 * (v - lo) as f64 / (hi - lo) as f64).round() as u8 })
        .collect();
    Ok(HyperpriorMap { width, height, data })
}

/// Rate and quality of one encode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub image: String,
    pub lambda: f64,
    pub seed: u64,
    pub bytes: usize,
    pub bpp: f64,
    pub psnr: f64,
}

/// Seed-averaged point for one image and λ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AveragedPoint {
    pub image: String,
    pub lambda: f64,
    pub seeds: usize,
    pub bpp: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub runs: Vec<SweepResult>,
    pub averages: Vec<AveragedPoint>,
}

/// Encodes every (image, λ, seed) combination as an independent job and
/// averages rate and PSNR over seeds per image and λ.
pub fn sweep(images: &[(String, Image)], lambdas: &[f64], seeds: &[u64], base: &EncodeConfig) -> Result<SweepReport, EvalError> {
    use rayon::prelude::*;
    let jobs: Vec<(usize, f64, u64)> = (0..images.len())
        .flat_map(|i| lambdas.iter().flat_map(move |&l| seeds.iter().map(move |&s| (i, l, s))))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(i, lambda, seed)| {
            let (name, img) = &images[i];
            let config = EncodeConfig { lambda, seed, ..base.clone() };
            let enc = encode(img, &config)?;
            Ok(SweepResult {
                image: name.clone(),
                lambda,
                seed,
                bytes: enc.bytes.len(),
                bpp: enc.report.bpp,
                psnr: psnr(img, &enc.reconstruction)?,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    let mut averages = Vec::new();
    for (name, _) in images {
        for &lambda in lambdas {
            let group: Vec<&SweepResult> = runs.iter().filter(|r| &r.image == name && r.lambda == lambda).collect();
            let n = group.len() as f64;
            averages.push(AveragedPoint {
                image: name.clone(),
                lambda,
                seeds: group.len(),
                bpp: group.iter().map(|r| r.bpp).sum::<f64>() / n,
                psnr: group.iter().map(|r| r.psnr).sum::<f64>() / n,
            });
        }
    }
    Ok(SweepReport { runs, averages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Ablation, OperatingPoint};
    use crate::entropy::EntropyConfig;
    use crate::pyramid::ResampleMode;

    fn arch(n: usize, c: usize, lance: bool) -> Architecture {
        Architecture {
            height: 512,
            width: 768,
            layers: 7,
            downsampling: 4,
            context_size: n,
            synth_channels: c,
            use_hyperprior: lance,
            use_layer_index: lance,
            resample_mode: ResampleMode::Bicubic,
            med: true,
            cphi: true,
            entropy: EntropyConfig::default(),
        }
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::new(4, 2, vec![10; 24]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::new(4, 2, vec![11; 24]).unwrap();
        assert!((psnr(&a, &b).unwrap() - 48.130803608679105).abs() < 1e-9);
        let checker: Vec<u8> = (0..24).map(|i| if (i / 3) % 2 == 0 { 0 } else { 255 }).collect();
        let inverse: Vec<u8> = checker.iter().map(|v| 255 - v).collect();
        let c = Image::new(4, 2, checker).unwrap();
        let d = Image::new(4, 2, inverse).unwrap();
        assert_eq!(psnr(&c, &d).unwrap(), 0.0);
        assert!(psnr(&a, &Image::new(2, 4, vec![0; 24]).unwrap()).is_err());
    }

    #[test]
    fn akima_reproduces_lines_and_nodes() {
        let x = vec![0.0, 1.0, 2.5, 3.0, 5.0];
        let line: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let a = Akima::new(x.clone(), line);
        for t in [0.0, 0.3, 1.7, 2.9, 4.4, 5.0] {
            assert!((a.eval(t) - (2.0 * t - 1.0)).abs() < 1e-12);
        }
        assert!((a.integrate(0.0, 5.0) - 20.0).abs() < 1e-12);
        let y = vec![1.0, -2.0, 0.5, 3.0, 3.0];
        let b = Akima::new(x.clone(), y.clone());
        for (xi, yi) in x.iter().zip(&y) {
            assert!((b.eval(*xi) - yi).abs() < 1e-12);
        }
    }

    #[test]
    fn akima_slopes_match_hand_computation() {
        // Secants 1, 0, 1, 0 padded to 3, 2, [1, 0, 1, 0], -1, -2; every weight pair is equal.
        let a = Akima::new(vec![0.0, 1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0, 1.0, 2.0, 2.0]);
        let expect = [1.5, 0.5, 0.5, 0.5, -0.5];
        for (s, e) in a.slopes.iter().zip(expect) {
            assert!((s - e).abs() < 1e-12, "{:?}", a.slopes);
        }
    }

    fn curve(points: &[(f64, f64)]) -> RdCurve {
        RdCurve::new(points.iter().map(|&(rate, psnr)| RdPoint { rate, psnr }).collect()).unwrap()
    }

    #[test]
    fn bd_rate_trivial_cases() {
        let r = curve(&[(0.1, 28.0), (0.25, 31.0), (0.5, 34.5), (1.0, 37.0), (2.0, 40.0)]);
        assert_eq!(bd_rate(&r, &r).unwrap(), 0.0);
        let t = curve(&r.points().iter().map(|p| (1.1 * p.rate, p.psnr)).collect::<Vec<_>>());
        assert!((bd_rate(&r, &t).unwrap() - 10.0).abs() < 1e-9);
        let back = bd_rate(&t, &r).unwrap();
        assert!((back - (-10.0 / 1.1)).abs() < 1e-9);
        let ab = bd_rate(&r, &t).unwrap();
        assert!((ab + back / (1.0 + back / 100.0)).abs() < 1e-9);
    }

    #[test]
    fn bd_rate_rejects_bad_curves() {
        assert!(RdCurve::new(vec![RdPoint { rate: 1.0, psnr: 30.0 }; 3]).is_err());
        assert!(RdCurve::new(vec![
            RdPoint { rate: 1.0, psnr: 30.0 },
            RdPoint { rate: 2.0, psnr: 29.0 },
            RdPoint { rate: 3.0, psnr: 31.0 },
            RdPoint { rate: 4.0, psnr: 32.0 },
        ])
        .is_err());
        let a = curve(&[(0.1, 20.0), (0.2, 21.0), (0.3, 22.0), (0.4, 23.0)]);
        let b = curve(&[(0.1, 30.0), (0.2, 31.0), (0.3, 32.0), (0.4, 33.0)]);
        assert!(matches!(bd_rate(&a, &b), Err(EvalError::NoOverlap)));
    }

    #[test]
    fn complexity_at_reference_resolution() {
        let base = mac_per_pixel(&arch(16, 48, false));
        assert!((base.context_xi - 725.29).abs() < 0.005, "{}", base.context_xi);
        assert!((mac_per_pixel(&arch(8, 16, false)).context_xi - 191.99).abs() < 0.005);
        assert_eq!(base.synthesis, 642.0);
        assert_eq!(mac_per_pixel(&arch(8, 16, true)).synthesis, 322.0);
        assert_eq!(base.context_phi, 0.0);
        let hop = mac_per_pixel(&arch(16, 48, true));
        assert!((hop.context_xi / 768.15 - 1.0).abs() < 0.005);
        assert!((mac_per_pixel(&arch(8, 16, true)).context_xi / 213.37 - 1.0).abs() < 0.005);
        assert!((hop.context_phi - 15.0 / 256.0).abs() < 1e-12);
        let sum = hop.context_xi + hop.upsampler + hop.synthesis + hop.context_phi + hop.resampler;
        assert!((hop.total - sum).abs() < 1e-9);
        assert!(hop.upsampler > 0.0 && hop.resampler > 0.0);
    }

    fn small_config() -> EncodeConfig {
        EncodeConfig {
            layers: 3,
            downsampling: 2,
            operating_point: OperatingPoint::Lop,
            ablation: Ablation::default(),
            ..Default::default()
        }
        .with_iterations(30)
    }

    fn gradient_image(w: usize, h: usize) -> Image {
        let data = (0..h).flat_map(|i| (0..w).flat_map(move |j| [(8 * i) as u8, (8 * j) as u8, 100])).collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn breakdown_accounts_for_every_byte() {
        let enc = encode(&gradient_image(20, 20), &small_config()).unwrap();
        let b = report_breakdown(&enc.bytes).unwrap();
        assert_eq!(b.total_bytes, enc.bytes.len());
        assert!((b.shares.iter().map(|s| s.percent).sum::<f64>() - 100.0).abs() < 1e-9);
        assert_eq!(b.sections.iter().map(|s| s.bytes).sum::<usize>(), enc.bytes.len());
        let mut end = 0;
        for s in &b.sections {
            assert_eq!(s.offset, end);
            end += s.bytes;
        }
    }

    #[test]
    fn hyperprior_dump_dimensions() {
        let enc = encode(&gradient_image(19, 13), &small_config()).unwrap();
        let map = dump_hyperprior(&enc.bytes).unwrap();
        assert_eq!((map.height, map.width), (4, 5));
        let s = enc.hyperprior.unwrap();
        if s.data().iter().all(|&v| v == s.data()[0]) {
            assert!(map.data.iter().all(|&v| v == 128));
        } else {
            assert!(map.data.contains(&0) && map.data.contains(&255));
        }
        let off = EncodeConfig { ablation: Ablation::baseline(), ..small_config() };
        let enc = encode(&gradient_image(8, 8), &off).unwrap();
        assert!(matches!(dump_hyperprior(&enc.bytes), Err(EvalError::NoHyperprior)));
    }

    #[test]
    fn sweep_averages_over_seeds() {
        let images = vec![("a".to_string(), gradient_image(12, 12))];
        let r = sweep(&images, &[0.001, 0.02], &[0, 1], &small_config()).unwrap();
        assert_eq!(r.runs.len(), 4);
        assert_eq!(r.averages.len(), 2);
        let runs: Vec<_> = r.runs.iter().filter(|x| x.lambda == 0.02).collect();
        let mean = (runs[0].bpp + runs[1].bpp) / 2.0;
        assert!((r.averages[1].bpp - mean).abs() < 1e-12);
        assert_eq!(r.averages[1].seeds, 2);
    }
}
