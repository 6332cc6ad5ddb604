//! Lossless back end: a carry-propagating range coder over [`CdfTable`]s,
//! order-0 exp-Golomb codes for network parameters, and the container
//! format tying header and sections together.

use thiserror::Error;

use crate::entropy::CdfTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoderError {
    #[error("symbol {symbol} outside table support [{min}, {max}]")]
    SymbolOutOfSupport { symbol: i32, min: i32, max: i32 },
    #[error("range decoder: {0}")]
    RangeDecode(String),
    #[error("exp-Golomb: {0}")]
    ExpGolomb(String),
    #[error("quantization step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("parameter {index} is not finite")]
    NonFiniteParam { index: usize },
    #[error("not a bitstream (bad magic)")]
    BadMagic,
    #[error("unsupported bitstream version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("header checksum mismatch")]
    HeaderChecksum,
    #[error("checksum mismatch in section {0}")]
    SectionChecksum(String),
    #[error("malformed bitstream: {0}")]
    Malformed(String),
}

const WINDOW_BITS: u32 = 56;
const WINDOW_MASK: u64 = (1 << WINDOW_BITS) - 1;
const RENORM_BOUND: u64 = 1 << (WINDOW_BITS - 8);
const TOP_SHIFT: u32 = WINDOW_BITS - 8;

/// Range encoder with a 56-bit low register and explicit carry
/// propagation through a cached byte plus a run of pending `0xFF` bytes.
#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: u8,
    has_cache: bool,
    pending: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: WINDOW_MASK, cache: 0, has_cache: false, pending: 0, out: Vec::new() }
    }

    pub fn encode(&mut self, symbol: i32, table: &CdfTable) -> Result<(), CoderError> {
        let (cum, freq) = table.interval(symbol).ok_or(CoderError::SymbolOutOfSupport {
            symbol,
            min: table.support_min(),
            max: table.support_max(),
        })?;
        let r = self.range >> table.precision();
        self.low += r * cum as u64;
        self.range = r * freq as u64;
        while self.range < RENORM_BOUND {
            self.shift_low();
            self.range <<= 8;
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> WINDOW_BITS) as u8;
        if self.low < (0xFF << TOP_SHIFT) || carry != 0 {
            if self.has_cache {
                self.out.push(self.cache.wrapping_add(carry));
            }
            for _ in 0..self.pending {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.pending = 0;
            self.cache = ((self.low >> TOP_SHIFT) & 0xFF) as u8;
            self.has_cache = true;
        } else {
            self.pending += 1;
        }
        self.low = (self.low << 8) & WINDOW_MASK;
    }

    /// Writes the shortest whole-byte tail that pins a value inside the
    /// final interval.
    pub fn finish(mut self) -> Vec<u8> {
        let nbytes = flush_bytes(self.range);
        let k = WINDOW_BITS - 8 * nbytes;
        let unit = 1u64 << k;
        self.low = (self.low + unit - 1) & !(unit - 1);
        for _ in 0..nbytes {
            self.shift_low();
        }
        if self.has_cache {
            self.out.push(self.cache);
        }
        for _ in 0..self.pending {
            self.out.push(0xFF);
        }
        self.out
    }
}

fn flush_bytes(range: u64) -> u32 {
    let floor_log2 = 63 - range.leading_zeros();
    (WINDOW_BITS - floor_log2).div_ceil(8)
}

/// Inverse of [`RangeEncoder`]; bytes past the end of input read as zero.
#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
    shifts: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self { data, pos: 0, code: 0, range: WINDOW_MASK, shifts: 0 };
        for _ in 0..WINDOW_BITS / 8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i32, CoderError> {
        let r = self.range >> table.precision();
        let target = self.code / r;
        if target >= 1 << table.precision() {
            return Err(CoderError::RangeDecode("code value outside the coding interval".into()));
        }
        let (symbol, cum, freq) = table.lookup(target as u32);
        self.code -= r * cum as u64;
        self.range = r * freq as u64;
        while self.range < RENORM_BOUND {
            self.code = ((self.code << 8) | self.next_byte() as u64) & WINDOW_MASK;
            self.range <<= 8;
            self.shifts += 1;
        }
        Ok(symbol)
    }

    /// Checks that the payload length is exactly what the encoder emits
    /// for the decoded symbol sequence.
    pub fn finish(self) -> Result<(), CoderError> {
        let expected = self.shifts + flush_bytes(self.range) as usize;
        if self.data.len() < expected {
            return Err(CoderError::Truncated("range-coded payload"));
        }
        if self.data.len() > expected {
            return Err(CoderError::RangeDecode(format!(
                "{} trailing bytes after final symbol",
                self.data.len() - expected
            )));
        }
        Ok(())
    }
}

/// Encodes `symbols[i]` with the table returned by `provider(i)`.
pub fn range_encode<F>(symbols: &[i32], mut provider: F) -> Result<Vec<u8>, CoderError>
where
    F: FnMut(usize) -> CdfTable,
{
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        enc.encode(s, &provider(i))?;
    }
    Ok(enc.finish())
}

/// Decodes `count` symbols; `provider` receives the index and every symbol
/// decoded so far, so it can evolve autoregressively.
pub fn range_decode<F>(bytes: &[u8], count: usize, mut provider: F) -> Result<Vec<i32>, CoderError>
where
    F: FnMut(usize, &[i32]) -> CdfTable,
{
    let mut dec = RangeDecoder::new(bytes);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let table = provider(i, &out);
        out.push(dec.decode(&table)?);
    }
    dec.finish()?;
    Ok(out)
}

/// MSB-first bit sink.
#[derive(Debug, Clone, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    nbits: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_bit(&mut self, bit: bool) {
        if self.nbits % 8 == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 0x80 >> (self.nbits % 8);
        }
        self.nbits += 1;
    }

    pub fn put_bits(&mut self, value: u64, n: u32) {
        for i in (0..n).rev() {
            self.put_bit((value >> i) & 1 == 1);
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.nbits
    }

    /// Zero-padded to a whole byte.
    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    data: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn get_bit(&mut self) -> Option<bool> {
        let byte = *self.data.get((self.pos / 8) as usize)?;
        let bit = (byte >> (7 - self.pos % 8)) & 1 == 1;
        self.pos += 1;
        Some(bit)
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    pub fn remaining(&self) -> u64 {
        self.data.len() as u64 * 8 - self.pos
    }
}

/// Defined for `v > i64::MIN`.
pub fn zigzag(v: i64) -> u64 {
    if v > 0 {
        (2 * v as i128 - 1) as u64
    } else {
        (-2 * v as i128) as u64
    }
}

pub fn unzigzag(m: u64) -> i64 {
    if m % 2 == 1 {
        (m / 2 + 1) as i64
    } else {
        -((m / 2) as i64)
    }
}

pub fn expgolomb_encode_unsigned(w: &mut BitWriter, m: u64) {
    let v = m as u128 + 1;
    let len = 128 - v.leading_zeros();
    for _ in 1..len {
        w.put_bit(false);
    }
    for i in (0..len).rev() {
        w.put_bit((v >> i) & 1 == 1);
    }
}

pub fn expgolomb_decode_unsigned(r: &mut BitReader) -> Result<u64, CoderError> {
    let mut zeros = 0u32;
    loop {
        match r.get_bit() {
            Some(false) => {
                zeros += 1;
                if zeros > 64 {
                    return Err(CoderError::ExpGolomb("prefix longer than 64 zeros".into()));
                }
            }
            Some(true) => break,
            None => return Err(CoderError::ExpGolomb("ran out of bits in prefix".into())),
        }
    }
    let mut v: u128 = 1;
    for _ in 0..zeros {
        let b = r.get_bit().ok_or_else(|| CoderError::ExpGolomb("ran out of bits in suffix".into()))?;
        v = (v << 1) | b as u128;
    }
    u64::try_from(v - 1).map_err(|_| CoderError::ExpGolomb("value exceeds 64 bits".into()))
}

pub fn expgolomb_encode_signed(w: &mut BitWriter, v: i64) {
    expgolomb_encode_unsigned(w, zigzag(v));
}

pub fn expgolomb_decode_signed(r: &mut BitReader) -> Result<i64, CoderError> {
    expgolomb_decode_unsigned(r).map(unzigzag)
}

/// Code length of `v` in bits.
pub fn expgolomb_signed_len(v: i64) -> u64 {
    let bits = 64 - (zigzag(v) + 1).leading_zeros() as u64;
    2 * bits - 1
}

fn check_step(step: f64) -> Result<(), CoderError> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(CoderError::InvalidStep(step))
    }
}

/// Integer indices `round(w / step)`, ties away from zero.
pub fn quantize_params(params: &[f64], step: f64) -> Result<Vec<i64>, CoderError> {
    check_step(step)?;
    params
        .iter()
        .enumerate()
        .map(|(index, &w)| {
            let q = (w / step).round();
            if !q.is_finite() || q.abs() > 4.0e18 {
                return Err(CoderError::NonFiniteParam { index });
            }
            Ok(q as i64)
        })
        .collect()
}

pub fn dequantize_params(indices: &[i64], step: f64) -> Vec<f64> {
    indices.iter().map(|&q| q as f64 * step).collect()
}

/// Payload bits for a parameter set at a given step.
pub fn params_bits(params: &[f64], step: f64) -> Result<u64, CoderError> {
    Ok(quantize_params(params, step)?.iter().map(|&q| expgolomb_signed_len(q)).sum())
}

/// Returns the byte payload and the reconstructed weights the decoder will
/// see.
pub fn serialize_params(params: &[f64], step: f64) -> Result<(Vec<u8>, Vec<f64>), CoderError> {
    let q = quantize_params(params, step)?;
    let mut w = BitWriter::new();
    for &v in &q {
        expgolomb_encode_signed(&mut w, v);
    }
    Ok((w.into_bytes(), dequantize_params(&q, step)))
}

pub fn deserialize_params(payload: &[u8], count: usize, step: f64) -> Result<Vec<f64>, CoderError> {
    check_step(step)?;
    let mut r = BitReader::new(payload);
    let q = (0..count).map(|_| expgolomb_decode_signed(&mut r)).collect::<Result<Vec<_>, _>>()?;
    if r.remaining() >= 8 {
        return Err(CoderError::ExpGolomb("trailing bytes after last parameter".into()));
    }
    while let Some(b) = r.get_bit() {
        if b {
            return Err(CoderError::ExpGolomb("non-zero padding".into()));
        }
    }
    Ok(dequantize_params(&q, step))
}

pub const MAGIC: [u8; 4] = *b"LNCE";
pub const VERSION: u8 = 1;

/// Parameter sets in section order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamSet {
    Phi = 0,
    Xi = 1,
    Upsampler = 2,
    Synthesis = 3,
}

impl ParamSet {
    pub const ALL: [ParamSet; 4] = [ParamSet::Phi, ParamSet::Xi, ParamSet::Upsampler, ParamSet::Synthesis];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SectionKind {
    Params(ParamSet),
    Hyperprior,
    Latent(u8),
}

impl SectionKind {
    fn code(self) -> (u8, u8) {
        match self {
            SectionKind::Params(p) => (p as u8, 0),
            SectionKind::Hyperprior => (4, 0),
            SectionKind::Latent(l) => (5, l),
        }
    }

    fn from_code(kind: u8, index: u8) -> Result<Self, CoderError> {
        Ok(match (kind, index) {
            (0..=3, 0) => SectionKind::Params(ParamSet::ALL[kind as usize]),
            (4, 0) => SectionKind::Hyperprior,
            (5, l) => SectionKind::Latent(l),
            _ => return Err(CoderError::Malformed(format!("unknown section kind {}/{}", kind, index))),
        })
    }

    pub fn label(self) -> String {
        match self {
            SectionKind::Params(ParamSet::Phi) => "params_phi".into(),
            SectionKind::Params(ParamSet::Xi) => "params_xi".into(),
            SectionKind::Params(ParamSet::Upsampler) => "params_upsampler".into(),
            SectionKind::Params(ParamSet::Synthesis) => "params_synth".into(),
            SectionKind::Hyperprior => "hyperprior".into(),
            SectionKind::Latent(l) => format!("latent_{}", l),
        }
    }
}

impl std::fmt::Display for SectionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeaderFlags {
    pub use_hyperprior: bool,
    pub use_layer_index: bool,
    pub resample_area: bool,
    pub med: bool,
    pub cphi: bool,
    pub checksum: bool,
}

impl HeaderFlags {
    fn to_byte(self) -> u8 {
        [self.use_hyperprior, self.use_layer_index, self.resample_area, self.med, self.cphi, self.checksum]
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | ((b as u8) << i))
    }

    fn from_byte(b: u8) -> Result<Self, CoderError> {
        if b >> 6 != 0 {
            return Err(CoderError::Malformed(format!("reserved flag bits set in {:#04x}", b)));
        }
        let bit = |i: u8| b >> i & 1 == 1;
        Ok(Self {
            use_hyperprior: bit(0),
            use_layer_index: bit(1),
            resample_area: bit(2),
            med: bit(3),
            cphi: bit(4),
            checksum: bit(5),
        })
    }
}

/// Everything a decoder needs besides the section payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct BitstreamHeader {
    pub height: u32,
    pub width: u32,
    pub layers: u8,
    pub downsampling: u8,
    pub context_size: u8,
    pub synth_channels: u16,
    pub flags: HeaderFlags,
    pub precision: u8,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub hyperprior_support: u32,
    pub latent_supports: Vec<u32>,
    /// Indexed by [`ParamSet`].
    pub param_counts: [u32; 4],
    /// Step exponents `k`, step `2^-k`, indexed by [`ParamSet`].
    pub step_exponents: [u8; 4],
}

impl BitstreamHeader {
    pub fn step(&self, set: ParamSet) -> f64 {
        (-(self.step_exponents[set as usize] as f64)).exp2()
    }

    pub fn param_count(&self, set: ParamSet) -> usize {
        self.param_counts[set as usize] as usize
    }

    /// Section order implied by the header.
    pub fn expected_sections(&self) -> Vec<SectionKind> {
        let mut v: Vec<SectionKind> = ParamSet::ALL.iter().map(|&p| SectionKind::Params(p)).collect();
        if self.flags.use_hyperprior {
            v.push(SectionKind::Hyperprior);
        }
        v.extend((0..self.layers).map(SectionKind::Latent));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub kind: SectionKind,
    pub payload: Vec<u8>,
}

/// Byte range of one part of a serialized bitstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub kind: Option<SectionKind>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub sections: Vec<Section>,
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CoderError> {
        if self.pos + n > self.data.len() {
            return Err(CoderError::Truncated("header"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CoderError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CoderError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CoderError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Bitstream {
    pub fn section(&self, kind: SectionKind) -> Option<&Section> {
        self.sections.iter().find(|s| s.kind == kind)
    }

    fn header_bytes(&self) -> Result<Vec<u8>, CoderError> {
        let h = &self.header;
        if h.latent_supports.len() != h.layers as usize {
            return Err(CoderError::Malformed("latent support count differs from layer count".into()));
        }
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.push(VERSION);
        b.extend_from_slice(&h.height.to_le_bytes());
        b.extend_from_slice(&h.width.to_le_bytes());
        b.push(h.layers);
        b.push(h.downsampling);
        b.push(h.context_size);
        b.extend_from_slice(&h.synth_channels.to_le_bytes());
        b.push(h.flags.to_byte());
        b.push(h.precision);
        b.extend_from_slice(&h.sigma_min.to_le_bytes());
        b.extend_from_slice(&h.sigma_max.to_le_bytes());
        b.extend_from_slice(&h.hyperprior_support.to_le_bytes());
        for s in &h.latent_supports {
            b.extend_from_slice(&s.to_le_bytes());
        }
        for c in &h.param_counts {
            b.extend_from_slice(&c.to_le_bytes());
        }
        b.extend_from_slice(&h.step_exponents);
        let n = u8::try_from(self.sections.len()).map_err(|_| CoderError::Malformed("too many sections".into()))?;
        b.push(n);
        let mut offset = 0u32;
        for s in &self.sections {
            let (kind, index) = s.kind.code();
            let len = u32::try_from(s.payload.len()).map_err(|_| CoderError::Malformed("section too large".into()))?;
            b.push(kind);
            b.push(index);
            b.extend_from_slice(&offset.to_le_bytes());
            b.extend_from_slice(&len.to_le_bytes());
            if h.flags.checksum {
                b.extend_from_slice(&crc32fast::hash(&s.payload).to_le_bytes());
            }
            offset += len;
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        Ok(b)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CoderError> {
        let mut b = self.header_bytes()?;
        for s in &self.sections {
            b.extend_from_slice(&s.payload);
        }
        Ok(b)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, CoderError> {
        Self::parse(data).map(|(bs, _)| bs)
    }

    /// Header span followed by one span per section, in file order.
    pub fn spans(data: &[u8]) -> Result<Vec<Span>, CoderError> {
        Self::parse(data).map(|(_, spans)| spans)
    }

    fn parse(data: &[u8]) -> Result<(Self, Vec<Span>), CoderError> {
        let mut r = Reader { data, pos: 0 };
        if data.len() < 4 {
            return Err(CoderError::Truncated("header"));
        }
        if r.take(4)? != MAGIC {
            return Err(CoderError::BadMagic);
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(CoderError::UnsupportedVersion(version));
        }
        let height = r.u32()?;
        let width = r.u32()?;
        let layers = r.u8()?;
        let downsampling = r.u8()?;
        let context_size = r.u8()?;
        let synth_channels = r.u16()?;
        let flags = HeaderFlags::from_byte(r.u8()?)?;
        let precision = r.u8()?;
        let sigma_min = r.f64()?;
        let sigma_max = r.f64()?;
        let hyperprior_support = r.u32()?;
        let latent_supports = (0..layers).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let mut param_counts = [0u32; 4];
        for c in &mut param_counts {
            *c = r.u32()?;
        }
        let step_exponents: [u8; 4] = r.take(4)?.try_into().unwrap();
        let nsec = r.u8()? as usize;
        let mut table = Vec::with_capacity(nsec);
        for _ in 0..nsec {
            let kind = SectionKind::from_code(r.u8()?, r.u8()?)?;
            let offset = r.u32()? as usize;
            let length = r.u32()? as usize;
            let crc = if flags.checksum { Some(r.u32()?) } else { None };
            table.push((kind, offset, length, crc));
        }
        let header_len = r.pos;
        let stored_crc = r.u32()?;
        if crc32fast::hash(&data[..header_len]) != stored_crc {
            return Err(CoderError::HeaderChecksum);
        }
        let payload_start = r.pos;
        let header = BitstreamHeader {
            height,
            width,
            layers,
            downsampling,
            context_size,
            synth_channels,
            flags,
            precision,
            sigma_min,
            sigma_max,
            hyperprior_support,
            latent_supports,
            param_counts,
            step_exponents,
        };
        let expected = header.expected_sections();
        if table.iter().map(|t| t.0).ne(expected.iter().copied()) {
            return Err(CoderError::Malformed("section table does not match header configuration".into()));
        }
        let mut spans = vec![Span { kind: None, offset: 0, length: payload_start }];
        let mut sections = Vec::with_capacity(nsec);
        let mut next = 0usize;
        for (kind, offset, length, crc) in table {
            if offset != next {
                return Err(CoderError::Malformed(format!("section {} is not contiguous", kind)));
            }
            let start = payload_start + offset;
            let end = start.checked_add(length).ok_or(CoderError::Truncated("section"))?;
            if end > data.len() {
                return Err(CoderError::Truncated("section"));
            }
            let payload = &data[start..end];
            if let Some(c) = crc {
                if crc32fast::hash(payload) != c {
                    return Err(CoderError::SectionChecksum(kind.label()));
                }
            }
            spans.push(Span { kind: Some(kind), offset: start, length });
            sections.push(Section { kind, payload: payload.to_vec() });
            next = offset + length;
        }
        if payload_start + next != data.len() {
            return Err(CoderError::Malformed("trailing bytes after last section".into()));
        }
        Ok((Self { header, sections }, spans))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{build_cdf, LaplaceParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp};

    fn laplace_sample(rng: &mut ChaCha8Rng, mu: f64, b: f64) -> f64 {
        let e = Exp::new(1.0 / b).unwrap().sample(rng);
        if rng.gen::<bool>() {
            mu + e
        } else {
            mu - e
        }
    }

    #[test]
    fn empty_sequence_round_trips() {
        let bytes = range_encode(&[], |_| unreachable!()).unwrap();
        assert_eq!(bytes, vec![0]);
        let out = range_decode(&bytes, 0, |_, _| unreachable!()).unwrap();
        assert!(out.is_empty());
        assert!(range_decode(&[], 0, |_, _| unreachable!()).is_err());
    }

    #[test]
    fn laplace_stream_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = build_cdf(LaplaceParams::new(0.0, 2.0).unwrap(), (-40, 40), 16).unwrap();
        let syms: Vec<i32> = (0..10_000).map(|_| (laplace_sample(&mut rng, 0.0, 2.0).round() as i32).clamp(-40, 40)).collect();
        let bytes = range_encode(&syms, |_| table.clone()).unwrap();
        let out = range_decode(&bytes, syms.len(), |_, _| table.clone()).unwrap();
        assert_eq!(out, syms);
    }

    #[test]
    fn out_of_support_symbol_is_rejected() {
        let table = build_cdf(LaplaceParams::new(0.0, 1.0).unwrap(), (-2, 2), 16).unwrap();
        let err = range_encode(&[3], |_| table.clone()).unwrap_err();
        assert_eq!(err, CoderError::SymbolOutOfSupport { symbol: 3, min: -2, max: 2 });
    }

    #[test]
    fn deterministic_table_stays_within_floor_overhead() {
        // One symbol owns all mass except one count per other bucket.
        let table = build_cdf(LaplaceParams::new(0.0, 1e-3).unwrap(), (-5, 5), 16).unwrap();
        assert_eq!(table.interval(0).unwrap().1, 65536 - 10);
        let n = 50_000;
        let bytes = range_encode(&vec![0; n], |_| table.clone()).unwrap();
        let bound = n as f64 * -(1.0 - 10.0 / 65536.0f64).log2() + 64.0;
        assert!((bytes.len() * 8) as f64 <= bound, "{} > {}", bytes.len() * 8, bound);
        assert_eq!(range_decode(&bytes, n, |_, _| table.clone()).unwrap(), vec![0; n]);
    }

    #[test]
    fn length_is_within_cross_entropy_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..4 {
            let n = 100_000;
            let mut tables = Vec::with_capacity(n);
            let mut syms = Vec::with_capacity(n);
            let mut ce = 0.0;
            for _ in 0..n {
                let mu = rng.gen_range(-3.0..3.0);
                let b = rng.gen_range(0.05..6.0);
                let t = build_cdf(LaplaceParams::new(mu, b).unwrap(), (-30, 30), 16).unwrap();
                let s = (laplace_sample(&mut rng, mu, b).round() as i32).clamp(-30, 30);
                ce += t.bits(s);
                syms.push(s);
                tables.push(t);
            }
            let bytes = range_encode(&syms, |i| tables[i].clone()).unwrap();
            let bits = (bytes.len() * 8) as f64;
            assert!(bits <= ce + 64.0 && bits >= ce - 1.0, "trial {}: {} bits vs CE {}", trial, bits, ce);
            assert_eq!(range_decode(&bytes, n, |i, _| tables[i].clone()).unwrap(), syms);
        }
    }

    #[test]
    fn autoregressive_tables_round_trip() {
        // The table for each symbol depends on the previous one.
        let provider = |prev: Option<i32>| {
            let mu = prev.map_or(0.0, |p| p as f64 * 0.8);
            build_cdf(LaplaceParams::new(mu, 1.5).unwrap(), (-64, 64), 16).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut syms = Vec::new();
        for i in 0..5_000 {
            let prev: Option<i32> = if i == 0 { None } else { Some(syms[i - 1]) };
            let mu = prev.map_or(0.0, |p| p as f64 * 0.8);
            syms.push((laplace_sample(&mut rng, mu, 1.5).round() as i32).clamp(-64, 64));
        }
        let bytes = range_encode(&syms, |i| provider(if i == 0 { None } else { Some(syms[i - 1]) })).unwrap();
        let out = range_decode(&bytes, syms.len(), |_, dec| provider(dec.last().copied())).unwrap();
        assert_eq!(out, syms);
    }

    #[test]
    fn truncated_and_padded_payloads_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = build_cdf(LaplaceParams::new(0.0, 3.0).unwrap(), (-50, 50), 16).unwrap();
        let syms: Vec<i32> = (0..2000).map(|_| rng.gen_range(-20..=20)).collect();
        let bytes = range_encode(&syms, |_| table.clone()).unwrap();
        for cut in [1, 2, bytes.len() / 2] {
            assert!(range_decode(&bytes[..bytes.len() - cut], syms.len(), |_, _| table.clone()).is_err());
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(range_decode(&longer, syms.len(), |_, _| table.clone()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn random_tables_round_trip(seed in 0u64..1000, n in 0usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tables = Vec::new();
            let mut syms = Vec::new();
            for _ in 0..n {
                let lo = rng.gen_range(-20..=0);
                let hi = rng.gen_range(0..=20);
                let t = build_cdf(
                    LaplaceParams::new(rng.gen_range(-25.0..25.0), rng.gen_range(0.001..50.0)).unwrap(),
                    (lo, hi),
                    rng.gen_range(12..=16),
                ).unwrap();
                syms.push(rng.gen_range(lo..=hi));
                tables.push(t);
            }
            let bytes = range_encode(&syms, |i| tables[i].clone()).unwrap();
            let out = range_decode(&bytes, n, |i, _| tables[i].clone()).unwrap();
            proptest::prop_assert_eq!(out, syms);
        }
    }

    fn bits_string(v: i64) -> String {
        let mut w = BitWriter::new();
        expgolomb_encode_signed(&mut w, v);
        let n = w.bit_len();
        let bytes = w.into_bytes();
        (0..n).map(|i| if bytes[(i / 8) as usize] >> (7 - i % 8) & 1 == 1 { '1' } else { '0' }).collect()
    }

    #[test]
    fn expgolomb_codewords() {
        assert_eq!(bits_string(0), "1");
        assert_eq!(bits_string(1), "010");
        assert_eq!(bits_string(-1), "011");
        assert_eq!(bits_string(2), "00100");
        assert_eq!(bits_string(-2), "00101");
        for v in [-7i64, 0, 5, 1000, -123456] {
            assert_eq!(bits_string(v).len() as u64, expgolomb_signed_len(v));
        }
    }

    #[test]
    fn expgolomb_exhaustive_round_trip() {
        let mut w = BitWriter::new();
        for v in -1000..=1000 {
            expgolomb_encode_signed(&mut w, v);
        }
        let bytes = w.into_bytes();
        let mut r = BitReader::new(&bytes);
        for v in -1000..=1000 {
            assert_eq!(expgolomb_decode_signed(&mut r).unwrap(), v);
        }
        for v in [i64::MAX, i64::MIN + 1] {
            let mut w = BitWriter::new();
            expgolomb_encode_signed(&mut w, v);
            let b = w.into_bytes();
            assert_eq!(expgolomb_decode_signed(&mut BitReader::new(&b)).unwrap(), v);
        }
    }

    #[test]
    fn expgolomb_malformed_prefix() {
        assert!(expgolomb_decode_signed(&mut BitReader::new(&[0u8; 4])).is_err());
        assert!(expgolomb_decode_signed(&mut BitReader::new(&[0u8; 20])).is_err());
        // "0001" followed by only two suffix bits
        assert!(expgolomb_decode_signed(&mut BitReader::new(&[0b0001_0100])).is_ok());
        assert!(expgolomb_decode_signed(&mut BitReader::new(&[0b0000_0001])).is_err());
    }

    #[test]
    fn param_serialization() {
        let (bytes, rec) = serialize_params(&[0.0; 10], 0.25).unwrap();
        assert_eq!(bytes, vec![0xFF, 0xC0]);
        assert_eq!(rec, vec![0.0; 10]);
        assert_eq!(deserialize_params(&bytes, 10, 0.25).unwrap(), rec);

        let (bytes, rec) = serialize_params(&[0.37], 0.125).unwrap();
        assert_eq!(rec, vec![0.375]);
        assert_eq!(deserialize_params(&bytes, 1, 0.125).unwrap(), vec![0.375]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params: Vec<f64> = (0..500).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let step = 2f64.powi(-6);
        let (bytes, rec) = serialize_params(&params, step).unwrap();
        assert!(params.iter().zip(&rec).all(|(a, b)| (a - b).abs() <= step / 2.0));
        assert_eq!(deserialize_params(&bytes, params.len(), step).unwrap(), rec);
        assert_eq!(params_bits(&params, step).unwrap().div_ceil(8), bytes.len() as u64);

        assert_eq!(serialize_params(&[1.0], 0.0).unwrap_err(), CoderError::InvalidStep(0.0));
        assert!(serialize_params(&[1.0], -0.5).is_err());
        assert!(serialize_params(&[f64::NAN], 0.5).is_err());
        assert!(deserialize_params(&bytes, params.len() + 1, step).is_err());
    }

    fn sample_stream(checksum: bool) -> Bitstream {
        let header = BitstreamHeader {
            height: 37,
            width: 50,
            layers: 2,
            downsampling: 4,
            context_size: 8,
            synth_channels: 16,
            flags: HeaderFlags { use_hyperprior: true, use_layer_index: true, med: true, cphi: true, checksum, resample_area: false },
            precision: 16,
            sigma_min: 1e-3,
            sigma_max: 1e3,
            hyperprior_support: 3,
            latent_supports: vec![5, 0],
            param_counts: [20, 100, 4, 200],
            step_exponents: [6, 5, 8, 7],
        };
        let sections = header
            .expected_sections()
            .into_iter()
            .enumerate()
            .map(|(i, kind)| Section { kind, payload: (0..(i * 3 + 1) as u8).collect() })
            .collect();
        Bitstream { header, sections }
    }

    #[test]
    fn container_round_trip_and_spans() {
        for checksum in [false, true] {
            let bs = sample_stream(checksum);
            let bytes = bs.to_bytes().unwrap();
            assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), bs);
            let spans = Bitstream::spans(&bytes).unwrap();
            assert_eq!(spans.iter().map(|s| s.length).sum::<usize>(), bytes.len());
            for w in spans.windows(2) {
                assert_eq!(w[0].offset + w[0].length, w[1].offset);
            }
            for (sp, sec) in spans[1..].iter().zip(&bs.sections) {
                assert_eq!(&bytes[sp.offset..sp.offset + sp.length], &sec.payload[..]);
            }
        }
    }

    #[test]
    fn container_errors() {
        let bs = sample_stream(true);
        let bytes = bs.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(Bitstream::from_bytes(&bad).unwrap_err(), CoderError::BadMagic);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(Bitstream::from_bytes(&bad).unwrap_err(), CoderError::UnsupportedVersion(9));
        let mut bad = bytes.clone();
        bad[6] ^= 1;
        assert_eq!(Bitstream::from_bytes(&bad).unwrap_err(), CoderError::HeaderChecksum);
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 0x10;
        assert_eq!(Bitstream::from_bytes(&bad).unwrap_err(), CoderError::SectionChecksum("latent_1".into()));
        assert!(matches!(Bitstream::from_bytes(&bytes[..bytes.len() - 1]), Err(CoderError::Truncated(_))));
        assert!(matches!(Bitstream::from_bytes(&bytes[..10]), Err(CoderError::Truncated(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(Bitstream::from_bytes(&longer), Err(CoderError::Malformed(_))));
    }
}
