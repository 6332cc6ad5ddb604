//! Discretized Laplace model, rate estimation and quantized CDF tables.
//!
//! Everything that feeds the range coder goes through [`det_exp`], an
//! exponential built only from IEEE-754 basic operations so that encoder
//! and decoder tables agree bit for bit on every platform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error("Laplace scale must be positive and finite, got {0}")]
    Scale(f64),
    #[error("empty symbol support [{0}, {1}]")]
    EmptySupport(i32, i32),
    #[error("CDF precision {0} outside [12, 16]")]
    Precision(u32),
    #[error("symbol/parameter length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("support of {0} symbols cannot be represented at this precision")]
    SupportTooLarge(usize),
}

pub const DEFAULT_PRECISION: u32 = 16;
pub const DEFAULT_SIGMA_MIN: f64 = 1e-3;
pub const DEFAULT_SIGMA_MAX: f64 = 1e3;

/// Scale clamp and table precision shared by encoder and decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EntropyConfig {
    pub precision: u32,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self { precision: DEFAULT_PRECISION, sigma_min: DEFAULT_SIGMA_MIN, sigma_max: DEFAULT_SIGMA_MAX }
    }
}

impl EntropyConfig {
    pub fn min_prob(&self) -> f64 {
        (-(self.precision as f64)).exp2()
    }

    pub fn log_sigma_bounds(&self) -> (f64, f64) {
        (self.sigma_min.ln(), self.sigma_max.ln())
    }

    /// Maps a raw network output to a clamped scale, reproducibly.
    pub fn sigma_from_raw(&self, raw: f64) -> f64 {
        let (lo, hi) = (self.sigma_min, self.sigma_max);
        det_exp(raw).clamp(lo, hi)
    }
}

/// Location/scale of a Laplace density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceParams {
    pub mu: f64,
    pub sigma: f64,
}

impl LaplaceParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self, EntropyError> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(EntropyError::Scale(sigma));
        }
        Ok(Self { mu, sigma })
    }
}

const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;

/// `e^x` using only addition, multiplication and division, so results are
/// identical wherever IEEE-754 double arithmetic is available.
pub fn det_exp(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    if x > 709.78 {
        return f64::INFINITY;
    }
    if x < -745.2 {
        return 0.0;
    }
    let k = (x * std::f64::consts::LOG2_E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series; |r| <= ln2/2 so 14 terms reach full double precision.
    let mut p = 1.0 / 87_178_291_200.0;
    for d in (1..14).rev() {
        p = p * r + 1.0 / FACT[d];
    }
    let p = p * r + 1.0;
    scale_pow2(p, k as i32)
}

const FACT: [f64; 14] = [
    1.0,
    1.0,
    2.0,
    6.0,
    24.0,
    120.0,
    720.0,
    5040.0,
    40320.0,
    362_880.0,
    3_628_800.0,
    39_916_800.0,
    479_001_600.0,
    6_227_020_800.0,
];

fn scale_pow2(v: f64, k: i32) -> f64 {
    let pow2 = |e: i32| f64::from_bits(((e + 1023) as u64) << 52);
    if k > 1023 {
        v * pow2(1023) * pow2(k - 1023)
    } else if k < -1022 {
        v * pow2(-1022) * pow2(k + 1022)
    } else {
        v * pow2(k)
    }
}

/// Probability mass of `[u − ½, u + ½]` under a zero-mean Laplace density of
/// scale `b`, evaluated without catastrophic cancellation in the tails.
pub(crate) fn laplace_interval_prob(u: f64, b: f64, exp: impl Fn(f64) -> f64) -> f64 {
    let (lo, hi) = (u - 0.5, u + 0.5);
    if lo >= 0.0 {
        0.5 * exp(-lo / b) * (1.0 - exp(-1.0 / b))
    } else if hi <= 0.0 {
        0.5 * exp(hi / b) * (1.0 - exp(-1.0 / b))
    } else {
        1.0 - 0.5 * exp(lo / b) - 0.5 * exp(-hi / b)
    }
}

/// Mass of integer `v` under a Laplace distribution integrated over
/// `[v − ½, v + ½]`.
pub fn laplace_pmf(v: i64, p: LaplaceParams) -> Result<f64, EntropyError> {
    LaplaceParams::new(p.mu, p.sigma)?;
    Ok(laplace_interval_prob(v as f64 - p.mu, p.sigma, det_exp))
}

/// Cross-entropy code length in bits, with each probability floored at
/// `2^-precision`.
pub fn rate_bits(symbols: &[i64], params: &[LaplaceParams], precision: u32) -> Result<f64, EntropyError> {
    if symbols.len() != params.len() {
        return Err(EntropyError::LengthMismatch(symbols.len(), params.len()));
    }
    let floor = (-(precision as f64)).exp2();
    symbols.iter().zip(params).try_fold(0.0, |acc, (&s, &p)| Ok(acc - laplace_pmf(s, p)?.max(floor).log2()))
}

/// Quantized cumulative frequency table over `[support_min, support_max]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    support_min: i32,
    precision: u32,
    /// `cumulative[k]` is the total count of symbols below
    /// `support_min + k`; the last entry equals `2^precision`.
    cumulative: Vec<u32>,
}

impl CdfTable {
    /// Builds a table from explicit frequencies (each ≥ 1, summing to
    /// `2^precision`).
    pub fn from_frequencies(support_min: i32, precision: u32, freqs: &[u32]) -> Result<Self, EntropyError> {
        if !(12..=16).contains(&precision) {
            return Err(EntropyError::Precision(precision));
        }
        if freqs.is_empty() {
            return Err(EntropyError::EmptySupport(support_min, support_min - 1));
        }
        let mut cumulative = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cumulative.push(0);
        for &f in freqs {
            if f == 0 {
                return Err(EntropyError::SupportTooLarge(freqs.len()));
            }
            acc += f;
            cumulative.push(acc);
        }
        if acc != 1 << precision {
            return Err(EntropyError::SupportTooLarge(freqs.len()));
        }
        Ok(Self { support_min, precision, cumulative })
    }

    pub fn support_min(&self) -> i32 {
        self.support_min
    }

    pub fn support_max(&self) -> i32 {
        self.support_min + self.cumulative.len() as i32 - 2
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cumulative
    }

    pub fn contains(&self, symbol: i32) -> bool {
        symbol >= self.support_min && symbol <= self.support_max()
    }

    /// `(cumulative start, frequency)` of a symbol inside the support.
    pub fn interval(&self, symbol: i32) -> Option<(u32, u32)> {
        if !self.contains(symbol) {
            return None;
        }
        let k = (symbol - self.support_min) as usize;
        Some((self.cumulative[k], self.cumulative[k + 1] - self.cumulative[k]))
    }

    /// Symbol whose interval contains `target < 2^precision`.
    pub fn lookup(&self, target: u32) -> (i32, u32, u32) {
        let k = self.cumulative.partition_point(|&c| c <= target) - 1;
        let (lo, hi) = (self.cumulative[k], self.cumulative[k + 1]);
        (self.support_min + k as i32, lo, hi - lo)
    }

    pub fn probability(&self, symbol: i32) -> f64 {
        self.interval(symbol).map_or(0.0, |(_, f)| f as f64 / (1u64 << self.precision) as f64)
    }

    /// Ideal code length of `symbol` under this table.
    pub fn bits(&self, symbol: i32) -> f64 {
        -self.probability(symbol).log2()
    }
}

/// Quantizes a Laplace model over `[min, max]` into a table whose buckets
/// all hold at least one count and sum to exactly `2^precision`.
pub fn build_cdf(p: LaplaceParams, support: (i32, i32), precision: u32) -> Result<CdfTable, EntropyError> {
    let (min, max) = support;
    if max < min {
        return Err(EntropyError::EmptySupport(min, max));
    }
    if !(12..=16).contains(&precision) {
        return Err(EntropyError::Precision(precision));
    }
    LaplaceParams::new(p.mu, p.sigma)?;
    let total: i64 = 1 << precision;
    let k = (max as i64 - min as i64 + 1) as usize;
    if k as i64 > total {
        return Err(EntropyError::SupportTooLarge(k));
    }
    let mut freqs: Vec<i64> = (min..=max)
        .map(|v| {
            let q = laplace_interval_prob(v as f64 - p.mu, p.sigma, det_exp) * total as f64;
            (q.round() as i64).max(1)
        })
        .collect();
    let mut diff = total - freqs.iter().sum::<i64>();
    if diff != 0 {
        // Spread the correction one count at a time over the largest
        // buckets; ties resolve to the lower symbol.
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| freqs[b].cmp(&freqs[a]).then(a.cmp(&b)));
        while diff != 0 {
            let mut progressed = false;
            for &i in &order {
                if diff > 0 {
                    freqs[i] += 1;
                    diff -= 1;
                    progressed = true;
                } else if freqs[i] > 1 {
                    freqs[i] -= 1;
                    diff += 1;
                    progressed = true;
                }
                if diff == 0 {
                    break;
                }
            }
            if !progressed {
                return Err(EntropyError::SupportTooLarge(k));
            }
        }
    }
    let freqs: Vec<u32> = freqs.into_iter().map(|f| f as u32).collect();
    CdfTable::from_frequencies(min, precision, &freqs)
}
