//! Range coding of latents and the on-disk bitstream format.
//!
//! Each latent element is coded under a 16-bit quantised CDF derived from its
//! discretised Gaussian. The alphabet covers `round(μ) ± K` with
//! `K = clamp(ceil(6σ) + 1, 1, 256)` plus one escape symbol; escaped values
//! follow as a sign bit and an order-0 Exp-Golomb magnitude, both coded as
//! equiprobable bits.

use egic_tensor::{normal_cdf, ParamStore};

use crate::codec::{Codec, GaussianField, LatentCode};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EGIC";
pub const VERSION: u8 = 1;
/// Header bytes before the payload.
pub const HEADER_BYTES: usize = 33;
pub const CRC_BYTES: usize = 4;

const PRECISION: u32 = 16;
const TOTAL: u32 = 1 << PRECISION;
const TOP: u32 = 1 << 24;
const MAX_HALF_WIDTH: i64 = 256;

/// Source of the distributions a stream is coded under.
pub trait EntropyModel {
    /// Identifies the model; streams record it and refuse other models.
    fn digest(&self) -> u64;
    fn hyper_distribution(&self, dims: (usize, usize, usize)) -> Result<GaussianField>;
    fn latent_distribution(
        &self,
        z: Option<&LatentCode>,
        dims: (usize, usize, usize),
    ) -> Result<GaussianField>;
}

/// A codec's entropy model bound to its parameters.
pub struct CodecEntropy<'a> {
    pub codec: &'a Codec,
    pub params: &'a ParamStore,
}

impl EntropyModel for CodecEntropy<'_> {
    fn digest(&self) -> u64 {
        crate::digest::params(self.params)
    }

    fn hyper_distribution(&self, dims: (usize, usize, usize)) -> Result<GaussianField> {
        Ok(self.codec.hyper_distribution(self.params, dims))
    }

    fn latent_distribution(
        &self,
        z: Option<&LatentCode>,
        dims: (usize, usize, usize),
    ) -> Result<GaussianField> {
        self.codec.latent_distribution(self.params, z, dims)
    }
}

struct RangeEncoder {
    low: u64,
    range: u32,
    out: Vec<u8>,
}

impl RangeEncoder {
    fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    fn carry(&mut self) {
        for b in self.out.iter_mut().rev() {
            let (v, overflow) = b.overflowing_add(1);
            *b = v;
            if !overflow {
                return;
            }
        }
        unreachable!("carry past the start of the stream");
    }

    fn encode(&mut self, cum: u32, freq: u32, last: bool) {
        let r = self.range >> PRECISION;
        self.low += u64::from(r) * u64::from(cum);
        // The last symbol absorbs the truncation remainder of the range.
        self.range = if last {
            self.range - r * cum
        } else {
            r * freq
        };
        if self.low >= 1 << 32 {
            self.low -= 1 << 32;
            self.carry();
        }
        while self.range < TOP {
            self.out.push((self.low >> 24) as u8);
            self.low = (self.low << 8) & 0xFFFF_FFFF;
            self.range <<= 8;
        }
    }

    fn encode_bit(&mut self, bit: bool) {
        let half = TOTAL / 2;
        self.encode(if bit { half } else { 0 }, half, bit);
    }

    /// Emits the value in `[low, low + range)` with the most trailing zero
    /// bits, then drops trailing zero bytes (the decoder reads zeros past
    /// the end).
    fn finish(mut self) -> Vec<u8> {
        let hi = self.low + u64::from(self.range);
        let mut value = self.low;
        for k in (0..=32).rev() {
            let mask = (1u64 << k) - 1;
            let v = (self.low + mask) & !mask;
            if v < hi {
                value = v;
                break;
            }
        }
        if value >= 1 << 32 {
            value -= 1 << 32;
            self.carry();
        }
        self.out.extend_from_slice(&(value as u32).to_be_bytes());
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    low: u32,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    fn new(data: &'a [u8]) -> Self {
        let mut d = Self {
            data,
            pos: 0,
            low: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte());
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn target(&self) -> u32 {
        let r = self.range >> PRECISION;
        (self.code.wrapping_sub(self.low) / r).min(TOTAL - 1)
    }

    fn consume(&mut self, cum: u32, freq: u32, last: bool) {
        let r = self.range >> PRECISION;
        self.low = self.low.wrapping_add(r * cum);
        self.range = if last {
            self.range - r * cum
        } else {
            r * freq
        };
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte());
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    fn decode_bit(&mut self) -> bool {
        let half = TOTAL / 2;
        let bit = self.target() >= half;
        self.consume(if bit { half } else { 0 }, half, bit);
        bit
    }
}

/// Quantised CDF over `base..base + n_values` plus a trailing escape symbol.
struct SymbolTable {
    base: i64,
    cum: Vec<u32>,
}

impl SymbolTable {
    fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::ModelPreparation(format!(
                "degenerate distribution mu={mu} sigma={sigma}"
            )));
        }
        let center = mu.round_ties_even() as i64;
        let k = ((6.0 * sigma).ceil() as i64 + 1).clamp(1, MAX_HALF_WIDTH);
        let base = center - k;
        let n_values = (2 * k + 1) as usize;
        let n = n_values + 1;
        let mut probs = Vec::with_capacity(n);
        for i in 0..n_values {
            let v = (base + i as i64) as f64;
            probs.push(bin_mass(v, mu, sigma));
        }
        let covered: f64 = probs.iter().sum();
        probs.push((1.0 - covered).max(0.0));

        let spare = f64::from(TOTAL - n as u32);
        let mut freq: Vec<u32> = probs.iter().map(|p| 1 + (p * spare).floor() as u32).collect();
        let used: u32 = freq.iter().sum();
        if used > TOTAL {
            return Err(Error::ModelPreparation("quantised CDF overflows".into()));
        }
        let argmax = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
        freq[argmax] += TOTAL - used;
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0;
        cum.push(0);
        for f in freq {
            acc += f;
            cum.push(acc);
        }
        Ok(Self { base, cum })
    }

    fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    fn escape(&self) -> usize {
        self.symbols() - 1
    }

    fn top(&self) -> i64 {
        self.base + self.escape() as i64 - 1
    }

    fn encode(&self, enc: &mut RangeEncoder, value: i64) {
        let put = |enc: &mut RangeEncoder, s: usize| {
            enc.encode(self.cum[s], self.cum[s + 1] - self.cum[s], s + 1 == self.symbols());
        };
        if (self.base..=self.top()).contains(&value) {
            put(enc, (value - self.base) as usize);
            return;
        }
        put(enc, self.escape());
        let (above, excess) = if value > self.top() {
            (true, value - self.top() - 1)
        } else {
            (false, self.base - value - 1)
        };
        enc.encode_bit(above);
        // Order-0 Exp-Golomb of `excess`: prefix zeros, then excess + 1.
        let v = excess as u64 + 1;
        let bits = 64 - v.leading_zeros();
        for _ in 1..bits {
            enc.encode_bit(false);
        }
        for i in (0..bits).rev() {
            enc.encode_bit((v >> i) & 1 == 1);
        }
    }

    fn decode(&self, dec: &mut RangeDecoder) -> Result<i64> {
        let t = dec.target();
        // First symbol whose upper cumulative bound exceeds the target.
        let s = self.cum[1..].partition_point(|&c| c <= t);
        dec.consume(self.cum[s], self.cum[s + 1] - self.cum[s], s + 1 == self.symbols());
        if s != self.escape() {
            return Ok(self.base + s as i64);
        }
        let above = dec.decode_bit();
        let mut zeros = 0;
        while !dec.decode_bit() {
            zeros += 1;
            if zeros > 40 {
                return Err(Error::Corrupt("escape code too long".into()));
            }
        }
        let mut v: u64 = 1;
        for _ in 0..zeros {
            v = (v << 1) | u64::from(dec.decode_bit());
        }
        let excess = (v - 1) as i64;
        Ok(if above {
            self.top() + 1 + excess
        } else {
            self.base - 1 - excess
        })
    }
}

/// Mass of the unit bin centred on `v`, evaluated on the upper tail side for
/// accuracy.
fn bin_mass(v: f64, mu: f64, sigma: f64) -> f64 {
    let d = (v - mu).abs();
    normal_cdf((0.5 - d) / sigma) - normal_cdf((-0.5 - d) / sigma)
}

/// Ideal code length `Σ -log2 P(v_i)` with the same floor as the rate
/// estimate.
pub fn estimate_bits(values: &[i32], field: &GaussianField) -> f64 {
    values
        .iter()
        .zip(field.mu.iter().zip(&field.sigma))
        .map(|(&v, (&mu, &sigma))| {
            -bin_mass(f64::from(v), mu, sigma)
                .max(crate::codec::LIKELIHOOD_FLOOR)
                .log2()
        })
        .sum()
}

fn check_field(values: usize, field: &GaussianField) -> Result<()> {
    if field.mu.len() != values || field.sigma.len() != values {
        return Err(Error::ModelPreparation(format!(
            "model describes {} elements, latent has {values}",
            field.mu.len()
        )));
    }
    Ok(())
}

fn encode_values(enc: &mut RangeEncoder, values: &[i32], field: &GaussianField) -> Result<()> {
    check_field(values.len(), field)?;
    for (i, &v) in values.iter().enumerate() {
        SymbolTable::new(field.mu[i], field.sigma[i])?.encode(enc, i64::from(v));
    }
    Ok(())
}

fn decode_values(dec: &mut RangeDecoder, field: &GaussianField) -> Result<Vec<i32>> {
    let mut out = Vec::with_capacity(field.mu.len());
    for (&mu, &sigma) in field.mu.iter().zip(&field.sigma) {
        let v = SymbolTable::new(mu, sigma)?.decode(dec)?;
        let v = i32::try_from(v).map_err(|_| Error::Corrupt("decoded value out of range".into()))?;
        out.push(v);
    }
    Ok(out)
}

/// Range-codes integer values under per-element Gaussians.
pub fn encode_symbols(values: &[i32], field: &GaussianField) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    encode_values(&mut enc, values, field)?;
    Ok(enc.finish())
}

pub fn decode_symbols(payload: &[u8], field: &GaussianField) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(payload);
    decode_values(&mut dec, field)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub digest: u64,
    pub width: u16,
    pub height: u16,
    /// Latent `(height, width, channels)`.
    pub latent: (u16, u16, u16),
    /// Hyper-latent `(height, width, channels)`, zeros when absent.
    pub hyper: (u16, u16, u16),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub payload: Vec<u8>,
}

fn dim16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} does not fit the header")))
}

fn latent_dims((h, w, c): (u16, u16, u16)) -> (usize, usize, usize) {
    (usize::from(c), usize::from(h), usize::from(w))
}

/// Codes the hyper-latent first, then the latent conditioned on it.
pub fn encode_stream(
    width: usize,
    height: usize,
    y: &LatentCode,
    z: Option<&LatentCode>,
    model: &dyn EntropyModel,
) -> Result<Bitstream> {
    let latent = (
        dim16(y.height, "latent height")?,
        dim16(y.width, "latent width")?,
        dim16(y.channels, "latent channels")?,
    );
    let hyper = match z {
        Some(z) => (
            dim16(z.height, "hyper height")?,
            dim16(z.width, "hyper width")?,
            dim16(z.channels, "hyper channels")?,
        ),
        None => (0, 0, 0),
    };
    let header = Header {
        version: VERSION,
        digest: model.digest(),
        width: dim16(width, "width")?,
        height: dim16(height, "height")?,
        latent,
        hyper,
    };
    let mut enc = RangeEncoder::new();
    if let Some(z) = z {
        let field = model.hyper_distribution(z.dims())?;
        encode_values(&mut enc, &z.values, &field)?;
    }
    if !y.is_empty() {
        let field = model.latent_distribution(z, y.dims())?;
        encode_values(&mut enc, &y.values, &field)?;
    }
    Ok(Bitstream {
        header,
        payload: enc.finish(),
    })
}

pub fn decode_stream(
    stream: &Bitstream,
    model: &dyn EntropyModel,
) -> Result<(LatentCode, Option<LatentCode>)> {
    let expected = model.digest();
    if stream.header.digest != expected {
        return Err(Error::IncompatibleModel {
            expected,
            found: stream.header.digest,
        });
    }
    let mut dec = RangeDecoder::new(&stream.payload);
    let (zc, zh, zw) = latent_dims(stream.header.hyper);
    let z = if zc * zh * zw > 0 {
        let field = model.hyper_distribution((zc, zh, zw))?;
        Some(LatentCode::new(zc, zh, zw, decode_values(&mut dec, &field)?))
    } else {
        None
    };
    let (c, h, w) = latent_dims(stream.header.latent);
    let y = if c * h * w > 0 {
        let field = model.latent_distribution(z.as_ref(), (c, h, w))?;
        LatentCode::new(c, h, w, decode_values(&mut dec, &field)?)
    } else {
        LatentCode::new(c, h, w, Vec::new())
    };
    Ok((y, z))
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload.len() + CRC_BYTES);
        out.extend_from_slice(MAGIC);
        out.push(h.version);
        out.extend_from_slice(&h.digest.to_le_bytes());
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        for d in [h.latent.0, h.latent.1, h.latent.2, h.hyper.0, h.hyper.1, h.hyper.2] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES + CRC_BYTES {
            return Err(Error::Corrupt("stream shorter than its header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let version = bytes[4];
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported version {version}")));
        }
        let digest = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
        let len = u32::from_le_bytes(bytes[29..33].try_into().expect("4 bytes")) as usize;
        if bytes.len() != HEADER_BYTES + len + CRC_BYTES {
            return Err(Error::Corrupt(format!(
                "payload length {len} does not match stream size {}",
                bytes.len()
            )));
        }
        let body = &bytes[..HEADER_BYTES + len];
        let crc = u32::from_le_bytes(bytes[HEADER_BYTES + len..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != crc {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        Ok(Self {
            header: Header {
                version,
                digest,
                width: u16_at(13),
                height: u16_at(15),
                latent: (u16_at(17), u16_at(19), u16_at(21)),
                hyper: (u16_at(23), u16_at(25), u16_at(27)),
            },
            payload: body[HEADER_BYTES..].to_vec(),
        })
    }

    /// Serialised size including header and checksum.
    pub fn total_bytes(&self) -> usize {
        HEADER_BYTES + self.payload.len() + CRC_BYTES
    }

    /// Bits per pixel of the whole file.
    pub fn bpp(&self) -> f64 {
        let pixels = f64::from(self.header.width) * f64::from(self.header.height);
        8.0 * self.total_bytes() as f64 / pixels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(n: usize, mu: f64, sigma: f64) -> GaussianField {
        GaussianField {
            mu: vec![mu; n],
            sigma: vec![sigma; n],
        }
    }

    #[test]
    fn tables_sum_to_total_with_positive_mass() {
        for &(mu, sigma) in &[(0.0, 0.01), (3.7, 0.5), (-12.2, 4.0), (0.49, 50.0)] {
            let t = SymbolTable::new(mu, sigma).unwrap();
            assert_eq!(*t.cum.last().unwrap(), TOTAL);
            assert!(t.cum.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn degenerate_scale_is_a_preparation_error() {
        assert!(matches!(SymbolTable::new(0.0, 0.0), Err(Error::ModelPreparation(_))));
        assert!(matches!(SymbolTable::new(f64::NAN, 1.0), Err(Error::ModelPreparation(_))));
    }

    #[test]
    fn round_trip_with_escapes() {
        let f = field(8, 0.3, 0.8);
        let values = [0, 1, -1, 30, -45, 1000, -70000, 2];
        let payload = encode_symbols(&values, &f).unwrap();
        assert_eq!(decode_symbols(&payload, &f).unwrap(), values);
    }

    #[test]
    fn near_deterministic_zeros_are_tiny() {
        let f = field(256, 0.0, 0.01);
        let payload = encode_symbols(&[0; 256], &f).unwrap();
        assert!(payload.len() <= 8, "{} bytes", payload.len());
    }

    #[test]
    fn empty_input_gives_empty_payload() {
        let f = field(0, 0.0, 1.0);
        assert!(encode_symbols(&[], &f).unwrap().is_empty());
    }

    #[test]
    fn random_values_round_trip_near_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.random_range(1..300);
            let f = GaussianField {
                mu: (0..n).map(|_| rng.random_range(-20.0..20.0)).collect(),
                sigma: (0..n).map(|_| rng.random_range(0.01..30.0)).collect(),
            };
            let values: Vec<i32> = f
                .mu
                .iter()
                .zip(&f.sigma)
                .map(|(m, s)| (m + s * rng.random_range(-3.0..3.0)).round() as i32)
                .collect();
            let payload = encode_symbols(&values, &f).unwrap();
            assert_eq!(decode_symbols(&payload, &f).unwrap(), values);
            let bits = estimate_bits(&values, &f);
            assert!(8.0 * payload.len() as f64 <= bits * 1.02 + 32.0);
        }
    }

    #[test]
    fn header_round_trip_and_bpp() {
        let b = Bitstream {
            header: Header {
                version: VERSION,
                digest: 0xdead_beef_0123_4567,
                width: 64,
                height: 64,
                latent: (8, 8, 32),
                hyper: (4, 4, 8),
            },
            payload: vec![1; 64 - HEADER_BYTES - CRC_BYTES],
        };
        let bytes = b.to_bytes();
        assert_eq!(bytes.len(), 64);
        assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), b);
        assert!((b.bpp() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn tampering_is_detected() {
        let b = Bitstream {
            header: Header {
                version: VERSION,
                digest: 1,
                width: 8,
                height: 8,
                latent: (1, 1, 1),
                hyper: (0, 0, 0),
            },
            payload: vec![7, 8, 9],
        };
        let mut bytes = b.to_bytes();
        bytes[HEADER_BYTES + 1] ^= 0x10;
        assert!(matches!(Bitstream::from_bytes(&bytes), Err(Error::Corrupt(_))));
        let bytes = b.to_bytes();
        assert!(matches!(
            Bitstream::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::Corrupt(_))
        ));
    }
}
