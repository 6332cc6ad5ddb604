//! Causal context windows, the MED predictor and the two context models.
//!
//! The latent model `C_ξ` maps `N` causal neighbours plus up to two
//! conditioning inputs (co-located resampled hyperprior value and
//! normalized layer index) to Laplace parameters. The hyperprior model
//! `C_φ` is a 20-parameter network over the `(left, top, top-left)` triple
//! whose mean output is added to the MED prediction.

use rand::Rng;
use thiserror::Error;

use crate::entropy::{EntropyConfig, LaplaceParams};
use crate::pyramid::Grid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContextError {
    #[error("context tap ({0}, {1}) is not strictly causal")]
    NonCausal(i32, i32),
    #[error("unsupported context size {0} (expected 3, 5, 8 or 16)")]
    UnsupportedSize(usize),
    #[error("{what}: expected {expected} values, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
}

/// Ordered list of strictly causal `(row, col)` offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    taps: Vec<(i32, i32)>,
}

pub const SUPPORTED_SIZES: [usize; 4] = [3, 5, 8, 16];

impl ContextWindow {
    /// Standard window of `n` taps.
    ///
    /// `n = 3` is `(left, top, top-left)`, the MED neighbourhood. Larger
    /// windows take the causal positions closest to the current one,
    /// ordered by Chebyshev distance, then squared Euclidean distance, then
    /// raster order.
    pub fn new(n: usize) -> Result<Self, ContextError> {
        if !SUPPORTED_SIZES.contains(&n) {
            return Err(ContextError::UnsupportedSize(n));
        }
        if n == 3 {
            return Self::from_taps(vec![(0, -1), (-1, 0), (-1, -1)]);
        }
        let mut cand: Vec<(i32, i32)> = Vec::new();
        for dr in -4..=0 {
            for dc in -4..=4 {
                if dr < 0 || dc < 0 {
                    cand.push((dr, dc));
                }
            }
        }
        cand.sort_by_key(|&(r, c)| (r.abs().max(c.abs()), r * r + c * c, r, c));
        cand.truncate(n);
        Self::from_taps(cand)
    }

    pub fn from_taps(taps: Vec<(i32, i32)>) -> Result<Self, ContextError> {
        if let Some(&(r, c)) = taps.iter().find(|&&(r, c)| !(r < 0 || (r == 0 && c < 0))) {
            return Err(ContextError::NonCausal(r, c));
        }
        Ok(Self { taps })
    }

    pub fn taps(&self) -> &[(i32, i32)] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    fn locate(&self, tap: (i32, i32), pos: (usize, usize), h: usize, w: usize) -> Option<usize> {
        let r = pos.0 as i64 + tap.0 as i64;
        let c = pos.1 as i64 + tap.1 as i64;
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            None
        } else {
            Some(r as usize * w + c as usize)
        }
    }

    /// Flat indices of every tap for every raster position (`None` when
    /// outside the grid), row-major `[h·w × N]`.
    pub fn gather_indices(&self, h: usize, w: usize) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(h * w * self.taps.len());
        for i in 0..h {
            for j in 0..w {
                out.extend(self.taps.iter().map(|&t| self.locate(t, (i, j), h, w)));
            }
        }
        out
    }
}

/// Context values at `pos`; positions outside the grid contribute 0.
pub fn gather_context(grid: &Grid<i32>, pos: (usize, usize), window: &ContextWindow) -> Vec<i32> {
    window
        .taps
        .iter()
        .map(|&t| window.locate(t, pos, grid.height(), grid.width()).map_or(0, |k| grid.data()[k]))
        .collect()
}

/// Median edge detector over left `a`, top `b` and top-left `c`.
pub fn med_predict(a: i32, b: i32, c: i32) -> i32 {
    let (mn, mx) = (a.min(b), a.max(b));
    if c >= mx {
        mn
    } else if c <= mn {
        mx
    } else {
        a + b - c
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Differentiable MED relaxation; `t` sets the sigmoid softness.
pub fn med_predict_soft(a: f64, b: f64, c: f64, t: f64) -> f64 {
    let (mn, mx) = (a.min(b), a.max(b));
    let s_max = sigmoid((c - mx) / t);
    let s_min = sigmoid((mn - c) / t);
    mn * s_max + mx * s_min + (a + b - c) * (1.0 - s_max - s_min)
}

/// Checked variant of [`med_predict_soft`].
pub fn try_med_predict_soft(a: f64, b: f64, c: f64, t: f64) -> Result<f64, ContextError> {
    if !(t > 0.0) {
        return Err(ContextError::Temperature(t));
    }
    Ok(med_predict_soft(a, b, c, t))
}

fn uniform_init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// `C_ξ`: three fully connected layers, residual connections on the `N`
/// context inputs only, ReLU after each hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentContextModel {
    n: usize,
    n_cond: usize,
    /// `[N × (N + n_cond)]`, context columns first.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[N × N]`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// `[2 × N]`, row 0 → μ, row 1 → raw scale.
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl LatentContextModel {
    pub fn zeros(n: usize, n_cond: usize) -> Self {
        Self {
            n,
            n_cond,
            w1: vec![0.0; n * (n + n_cond)],
            b1: vec![0.0; n],
            w2: vec![0.0; n * n],
            b2: vec![0.0; n],
            w3: vec![0.0; 2 * n],
            b3: vec![0.0; 2],
        }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, n_cond: usize, rng: &mut R) -> Self {
        let k = n + n_cond;
        Self {
            n,
            n_cond,
            w1: uniform_init(rng, k, n * k),
            b1: uniform_init(rng, k, n),
            w2: uniform_init(rng, n, n * n),
            b2: uniform_init(rng, n, n),
            w3: uniform_init(rng, n, 2 * n),
            b3: uniform_init(rng, n, 2),
        }
    }

    pub fn context_size(&self) -> usize {
        self.n
    }

    pub fn conditioning_inputs(&self) -> usize {
        self.n_cond
    }

    pub fn input_size(&self) -> usize {
        self.n + self.n_cond
    }

    pub fn param_count(&self) -> usize {
        Self::count_for(self.n, self.n_cond)
    }

    pub fn count_for(n: usize, n_cond: usize) -> usize {
        n * (n + n_cond) + n + n * n + n + 2 * n + 2
    }

    /// Multiply-accumulates per coded element.
    pub fn macs(n: usize, n_cond: usize) -> usize {
        n * (n + n_cond) + n * n + 2 * n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3].iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn from_flat(n: usize, n_cond: usize, flat: &[f64]) -> Result<Self, ContextError> {
        let expected = Self::count_for(n, n_cond);
        if flat.len() != expected {
            return Err(ContextError::Dimension { what: "C_xi parameters", expected, got: flat.len() });
        }
        let mut m = Self::zeros(n, n_cond);
        let mut off = 0;
        for v in [&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2, &mut m.w3, &mut m.b3] {
            let len = v.len();
            v.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(m)
    }

    /// Returns `(μ, raw scale)`; `input` is the context followed by the
    /// conditioning values.
    pub fn forward_raw(&self, input: &[f64]) -> (f64, f64) {
        let (n, k) = (self.n, self.input_size());
        debug_assert_eq!(input.len(), k);
        let mut h1 = [0.0f64; 32];
        let mut h2 = [0.0f64; 32];
        for i in 0..n {
            let row = &self.w1[i * k..(i + 1) * k];
            let mut acc = self.b1[i];
            for (wv, xv) in row.iter().zip(input) {
                acc += wv * xv;
            }
            h1[i] = (acc + input[i]).max(0.0);
        }
        for i in 0..n {
            let row = &self.w2[i * n..(i + 1) * n];
            let mut acc = self.b2[i];
            for (wv, xv) in row.iter().zip(&h1[..n]) {
                acc += wv * xv;
            }
            h2[i] = (acc + h1[i]).max(0.0);
        }
        let mut out = [0.0; 2];
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.w3[o * n..(o + 1) * n];
            let mut acc = self.b3[o];
            for (wv, xv) in row.iter().zip(&h2[..n]) {
                acc += wv * xv;
            }
            *slot = acc;
        }
        (out[0], out[1])
    }
}

/// Laplace parameters for one latent element.
///
/// `s_r` and `lbar` are used only when the model was built with the
/// matching conditioning inputs (hyperprior value first, then layer index).
pub fn cxi_forward(
    context: &[f64],
    s_r: Option<f64>,
    lbar: Option<f64>,
    model: &LatentContextModel,
    entropy: &EntropyConfig,
) -> Result<LaplaceParams, ContextError> {
    let mut input = Vec::with_capacity(model.input_size());
    input.extend_from_slice(context);
    input.extend(s_r);
    input.extend(lbar);
    if context.len() != model.n || input.len() != model.input_size() {
        return Err(ContextError::Dimension { what: "C_xi input", expected: model.input_size(), got: input.len() });
    }
    let (mu, raw) = model.forward_raw(&input);
    Ok(LaplaceParams { mu, sigma: entropy.sigma_from_raw(raw) })
}

/// `C_φ` parameters. With the learned model disabled only a single global
/// raw scale is kept.
#[derive(Debug, Clone, PartialEq)]
pub enum HyperpriorContextModel {
    Learned {
        /// `[3 × 3]`
        w1: Vec<f64>,
        b1: Vec<f64>,
        /// `[2 × 3]`, row 0 → mean correction, row 1 → raw scale.
        w2: Vec<f64>,
        b2: Vec<f64>,
    },
    ScaleOnly {
        raw_scale: f64,
    },
}

impl HyperpriorContextModel {
    pub const LEARNED_PARAMS: usize = 20;
    /// Multiply-accumulates per hyperprior element of the learned variant.
    pub const LEARNED_MACS: usize = 15;

    pub fn zeros(learned: bool) -> Self {
        if learned {
            Self::Learned { w1: vec![0.0; 9], b1: vec![0.0; 3], w2: vec![0.0; 6], b2: vec![0.0; 2] }
        } else {
            Self::ScaleOnly { raw_scale: 0.0 }
        }
    }

    pub fn random<R: Rng + ?Sized>(learned: bool, rng: &mut R) -> Self {
        if learned {
            Self::Learned {
                w1: uniform_init(rng, 3, 9),
                b1: uniform_init(rng, 3, 3),
                w2: uniform_init(rng, 3, 6),
                b2: uniform_init(rng, 3, 2),
            }
        } else {
            Self::ScaleOnly { raw_scale: 0.0 }
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Self::Learned { .. })
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Learned { .. } => Self::LEARNED_PARAMS,
            Self::ScaleOnly { .. } => 1,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            Self::Learned { w1, b1, w2, b2 } => [w1, b1, w2, b2].iter().flat_map(|v| v.iter().copied()).collect(),
            Self::ScaleOnly { raw_scale } => vec![*raw_scale],
        }
    }

    pub fn from_flat(learned: bool, flat: &[f64]) -> Result<Self, ContextError> {
        let expected = if learned { Self::LEARNED_PARAMS } else { 1 };
        if flat.len() != expected {
            return Err(ContextError::Dimension { what: "C_phi parameters", expected, got: flat.len() });
        }
        Ok(if learned {
            Self::Learned {
                w1: flat[0..9].to_vec(),
                b1: flat[9..12].to_vec(),
                w2: flat[12..18].to_vec(),
                b2: flat[18..20].to_vec(),
            }
        } else {
            Self::ScaleOnly { raw_scale: flat[0] }
        })
    }

    /// Returns `(mean correction, raw scale)`.
    pub fn forward_raw(&self, ctx: [f64; 3]) -> (f64, f64) {
        match self {
            Self::Learned { w1, b1, w2, b2 } => {
                let mut h = [0.0; 3];
                for i in 0..3 {
                    let mut acc = b1[i];
                    for j in 0..3 {
                        acc += w1[i * 3 + j] * ctx[j];
                    }
                    h[i] = (acc + ctx[i]).max(0.0);
                }
                let mut out = [0.0; 2];
                for (o, slot) in out.iter_mut().enumerate() {
                    let mut acc = b2[o];
                    for j in 0..3 {
                        acc += w2[o * 3 + j] * h[j];
                    }
                    *slot = acc;
                }
                (out[0], out[1])
            }
            Self::ScaleOnly { raw_scale } => (0.0, *raw_scale),
        }
    }
}

/// `C_φ` evaluated on a `(left, top, top-left)` triple: returns the learned
/// mean correction and the clamped scale. The caller adds the MED
/// prediction to obtain the mean.
pub fn cphi_forward(context: [f64; 3], model: &HyperpriorContextModel, entropy: &EntropyConfig) -> (f64, f64) {
    let (corr, raw) = model.forward_raw(context);
    (corr, entropy.sigma_from_raw(raw))
}
