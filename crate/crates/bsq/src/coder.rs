//! Incremental integer arithmetic coding over any synchronized [`Model`].
//!
//! The construction is the classic 32-bit register coder: `low`/`high` track
//! the current interval in fixed point, matching leading bits are emitted as
//! soon as they are decided (with deferred "pending" bits covering the
//! straddle case), and all products run in 64-bit intermediates. Because
//! model frequencies live on a power-of-two scale capped at 2^16, every
//! interval split is exact integer arithmetic and encoder and decoder stay in
//! perfect lockstep on any platform.
//!
//! Termination emits the outstanding pending count plus two disambiguating
//! bits, and the decoder zero-pads reads past the end of the stream. That
//! gives a sharp accounting identity: a valid decode consumes exactly
//! `stream length + 30` bit reads (32 to fill the register, minus the two
//! flush bits). The decoder enforces it, which is what turns truncated or
//! extended streams into [`CoderError::CorruptStream`] instead of garbage.
//! [`ac_decode_verified`] goes further and re-encodes the decoded symbols,
//! accepting only if the bitstream matches exactly.

use crate::prob::{Model, ProbError};
use thiserror::Error;

const HALF: u32 = 1 << 31;
const QUARTER: u32 = 1 << 30;
const THREE_QUARTERS: u32 = HALF + QUARTER;

/// Zero bits a valid decode reads past the end of the stream: the 32-bit
/// register fill minus the two flush bits.
const PAD_BUDGET: usize = 30;

#[derive(Debug, Error, PartialEq)]
pub enum CoderError {
    #[error("symbol {symbol} not codable under a model over {k} symbols")]
    UncodableSymbol { symbol: usize, k: usize },
    #[error("corrupt stream: {reason}")]
    CorruptStream { reason: String },
    #[error("malformed bitstream serialization: {reason}")]
    BadSerialization { reason: String },
}

impl From<ProbError> for CoderError {
    fn from(err: ProbError) -> Self {
        match err {
            ProbError::SymbolOutOfRange { symbol, k } => CoderError::UncodableSymbol { symbol, k },
            other => CoderError::CorruptStream { reason: other.to_string() },
        }
    }
}

/// Growable bit sequence with byte-packed storage, big-endian within each
/// byte (the first bit pushed occupies the most significant position of the
/// first byte). Unused tail bits are always zero, so equality is structural.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitStream {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl BitStream {
    pub fn new() -> Self {
        Self::default()
    }

    /// Length in bits.
    pub fn len(&self) -> usize {
        self.bit_len
    }

    pub fn is_empty(&self) -> bool {
        self.bit_len == 0
    }

    pub fn push(&mut self, bit: bool) {
        let byte = self.bit_len / 8;
        if byte == self.bytes.len() {
            self.bytes.push(0);
        }
        if bit {
            self.bytes[byte] |= 0x80 >> (self.bit_len % 8);
        }
        self.bit_len += 1;
    }

    pub fn get(&self, index: usize) -> Option<bool> {
        if index >= self.bit_len {
            return None;
        }
        Some(self.bytes[index / 8] & (0x80 >> (index % 8)) != 0)
    }

    /// Drops trailing bits so that `len()` becomes `bit_len`. Used by tests
    /// to model truncation corruption.
    pub fn truncated(&self, bit_len: usize) -> BitStream {
        assert!(bit_len <= self.bit_len, "cannot truncate to a longer stream");
        let mut out = BitStream::new();
        for i in 0..bit_len {
            out.push(self.get(i).unwrap());
        }
        out
    }

    /// Serializes as an LEB128 varint bit count followed by the packed
    /// payload bytes, tail zero-padded to a byte boundary.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.bytes.len() + 4);
        let mut n = self.bit_len as u64;
        loop {
            let byte = (n & 0x7f) as u8;
            n >>= 7;
            if n == 0 {
                out.push(byte);
                break;
            }
            out.push(byte | 0x80);
        }
        out.extend_from_slice(&self.bytes);
        out
    }

    /// Parses a serialized stream, returning it plus the number of input
    /// bytes consumed (trailing data is left for the caller).
    pub fn from_bytes(bytes: &[u8]) -> Result<(BitStream, usize), CoderError> {
        let mut bit_len = 0u64;
        let mut shift = 0u32;
        let mut pos = 0usize;
        loop {
            let &byte = bytes.get(pos).ok_or_else(|| CoderError::BadSerialization {
                reason: "truncated length prefix".into(),
            })?;
            pos += 1;
            if shift >= 63 {
                return Err(CoderError::BadSerialization { reason: "length prefix overflow".into() });
            }
            bit_len |= u64::from(byte & 0x7f) << shift;
            shift += 7;
            if byte & 0x80 == 0 {
                break;
            }
        }
        let bit_len = usize::try_from(bit_len)
            .map_err(|_| CoderError::BadSerialization { reason: "length prefix overflow".into() })?;
        let n_bytes = bit_len.div_ceil(8);
        let payload = bytes.get(pos..pos + n_bytes).ok_or_else(|| {
            CoderError::BadSerialization {
                reason: format!("payload truncated: need {n_bytes} bytes"),
            }
        })?;
        let mut data = payload.to_vec();
        // Canonicalize any nonzero padding bits in the final byte.
        if bit_len % 8 != 0 {
            let keep = 0xffu8 << (8 - bit_len % 8);
            *data.last_mut().unwrap() &= keep;
        }
        Ok((BitStream { bytes: data, bit_len }, pos + n_bytes))
    }
}

struct Encoder {
    low: u32,
    high: u32,
    pending: u64,
    out: BitStream,
}

impl Encoder {
    fn new() -> Self {
        Encoder { low: 0, high: u32::MAX, pending: 0, out: BitStream::new() }
    }

    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        for _ in 0..self.pending {
            self.out.push(!bit);
        }
        self.pending = 0;
    }

    fn code(&mut self, low_cum: u32, high_cum: u32, scale: u32) {
        let range = u64::from(self.high - self.low) + 1;
        let base = u64::from(self.low);
        self.high = (base + range * u64::from(high_cum) / u64::from(scale) - 1) as u32;
        self.low = (base + range * u64::from(low_cum) / u64::from(scale)) as u32;
        debug_assert!(self.low < self.high, "interval collapsed");
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
        debug_assert!(self.high - self.low >= QUARTER, "renormalization fell short");
    }

    fn flush(mut self) -> BitStream {
        self.pending += 1;
        let bit = self.low >= QUARTER;
        self.emit(bit);
        self.out
    }
}

/// Encodes `symbols` by driving `model` in predict-then-update lockstep. An
/// empty input encodes to an empty bitstream. The output length never
/// exceeds the model's ideal code length plus the fixed register slack.
pub fn ac_encode<M: Model>(model: &mut M, symbols: &[usize]) -> Result<BitStream, CoderError> {
    if symbols.is_empty() {
        return Ok(BitStream::new());
    }
    let mut enc = Encoder::new();
    for &sym in symbols {
        let table = model.predict();
        if sym >= table.num_symbols() {
            return Err(CoderError::UncodableSymbol { symbol: sym, k: table.num_symbols() });
        }
        let (lo, hi) = table.range(sym);
        enc.code(lo, hi, table.scale());
        model.update(sym)?;
    }
    Ok(enc.flush())
}

struct BitReader<'a> {
    stream: &'a BitStream,
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn next(&mut self) -> bool {
        let bit = self.stream.get(self.pos).unwrap_or(false);
        self.pos += 1;
        bit
    }

    fn consumed(&self) -> usize {
        self.pos
    }

    fn padded(&self) -> usize {
        self.pos.saturating_sub(self.stream.len())
    }
}

struct Decoder<'a> {
    low: u32,
    high: u32,
    code: u32,
    reader: BitReader<'a>,
}

impl<'a> Decoder<'a> {
    fn new(stream: &'a BitStream) -> Self {
        let mut reader = BitReader { stream, pos: 0 };
        let mut code = 0u32;
        for _ in 0..32 {
            code = (code << 1) | u32::from(reader.next());
        }
        Decoder { low: 0, high: u32::MAX, code, reader }
    }

    fn exhausted(&self) -> bool {
        self.reader.padded() > PAD_BUDGET
    }

    fn decode(&mut self, table: &crate::prob::FreqTable) -> Result<usize, CoderError> {
        let range = u64::from(self.high - self.low) + 1;
        let scale = u64::from(table.scale());
        let offset = u64::from(self.code - self.low);
        let target = ((offset + 1) * scale - 1) / range;
        let sym = table.symbol_for(target as u32);
        let (low_cum, high_cum) = table.range(sym);
        let base = u64::from(self.low);
        self.high = (base + range * u64::from(high_cum) / scale - 1) as u32;
        self.low = (base + range * u64::from(low_cum) / scale) as u32;
        debug_assert!(self.low <= self.code && self.code <= self.high);
        loop {
            if self.high < HALF {
                // Leading bit settled at 0.
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.code -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.code -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.code = (self.code << 1) | u32::from(self.reader.next());
            if self.exhausted() {
                return Err(CoderError::CorruptStream {
                    reason: "stream exhausted before all symbols decoded".into(),
                });
            }
        }
        Ok(sym)
    }
}

/// Decodes exactly `n_symbols` symbols, driving `model` through the same
/// predict-then-update sequence the encoder used. Rejects streams whose bit
/// accounting does not match a valid encoding (truncation, extension, or an
/// empty-stream mismatch); see [`ac_decode_verified`] for the strongest
/// corruption check.
pub fn ac_decode<M: Model>(
    model: &mut M,
    stream: &BitStream,
    n_symbols: usize,
) -> Result<Vec<usize>, CoderError> {
    if n_symbols == 0 {
        if !stream.is_empty() {
            return Err(CoderError::CorruptStream {
                reason: "nonempty stream for zero symbols".into(),
            });
        }
        return Ok(Vec::new());
    }
    let mut dec = Decoder::new(stream);
    if dec.exhausted() {
        return Err(CoderError::CorruptStream { reason: "stream too short to fill register".into() });
    }
    let mut symbols = Vec::with_capacity(n_symbols);
    for _ in 0..n_symbols {
        let table = model.predict();
        let sym = dec.decode(&table)?;
        model.update(sym)?;
        symbols.push(sym);
    }
    if dec.reader.consumed() != stream.len() + PAD_BUDGET {
        return Err(CoderError::CorruptStream {
            reason: format!(
                "length mismatch: consumed {} bit reads for a {}-bit stream",
                dec.reader.consumed(),
                stream.len()
            ),
        });
    }
    Ok(symbols)
}

/// Like [`ac_decode`], then re-encodes the decoded symbols from a copy of the
/// initial model state and requires the bitstream to match exactly. Accepts a
/// stream only if it is precisely the encoding of the symbols returned.
pub fn ac_decode_verified<M: Model + Clone>(
    model: &mut M,
    stream: &BitStream,
    n_symbols: usize,
) -> Result<Vec<usize>, CoderError> {
    let mut replay = model.clone();
    let symbols = ac_decode(model, stream, n_symbols)?;
    let reencoded = ac_encode(&mut replay, &symbols)?;
    if &reencoded != stream {
        return Err(CoderError::CorruptStream {
            reason: "stream is not a valid encoding of its decoded symbols".into(),
        });
    }
    Ok(symbols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{
        stream_bits_lower_bound, AdaptiveBitModel, ContextModel, FreqTable, UniformModel,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bitstream_packs_big_endian_within_bytes() {
        let mut s = BitStream::new();
        for bit in [true, false, true, true, false, false, false, true, true, true] {
            s.push(bit);
        }
        assert_eq!(s.len(), 10);
        assert_eq!(s.to_bytes(), vec![0x0a, 0b1011_0001, 0b1100_0000]);
    }

    #[test]
    fn bitstream_serialization_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [0usize, 1, 7, 8, 9, 64, 321] {
            let mut s = BitStream::new();
            for _ in 0..len {
                s.push(rng.gen());
            }
            let bytes = s.to_bytes();
            let (back, consumed) = BitStream::from_bytes(&bytes).unwrap();
            assert_eq!(back, s);
            assert_eq!(consumed, bytes.len());
        }
    }

    #[test]
    fn bitstream_parser_rejects_truncation_and_canonicalizes_padding() {
        assert!(BitStream::from_bytes(&[]).is_err());
        assert!(BitStream::from_bytes(&[0x10, 0xab]).is_err());
        // 4 declared bits but dirty padding in the low nibble.
        let (s, _) = BitStream::from_bytes(&[0x04, 0b1010_1111]).unwrap();
        let mut clean = BitStream::new();
        for bit in [true, false, true, false] {
            clean.push(bit);
        }
        assert_eq!(s, clean);
    }

    #[test]
    fn bitstream_parser_leaves_trailing_data() {
        let (s, consumed) = BitStream::from_bytes(&[0x08, 0xff, 0x42, 0x99]).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(consumed, 2);
    }

    #[test]
    fn empty_input_encodes_to_empty_stream() {
        let mut model = UniformModel::new(4).unwrap();
        let stream = ac_encode(&mut model, &[]).unwrap();
        assert!(stream.is_empty());
        let mut model = UniformModel::new(4).unwrap();
        assert_eq!(ac_decode(&mut model, &stream, 0).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn zero_symbols_with_a_nonempty_stream_is_corrupt() {
        let mut stream = BitStream::new();
        stream.push(true);
        let mut model = UniformModel::new(4).unwrap();
        assert!(matches!(
            ac_decode(&mut model, &stream, 0),
            Err(CoderError::CorruptStream { .. })
        ));
    }

    #[test]
    fn uniform_bits_cost_one_bit_each_plus_flush() {
        let symbols = [0usize, 1, 1, 0, 1, 0, 0, 1];
        let mut model = UniformModel::new(2).unwrap();
        let stream = ac_encode(&mut model, &symbols).unwrap();
        // Exact halving emits one bit per symbol; the flush adds two.
        assert_eq!(stream.len(), symbols.len() + 2);
        assert!(stream.to_bytes().len() * 8 <= 40);
        let mut model = UniformModel::new(2).unwrap();
        assert_eq!(ac_decode_verified(&mut model, &stream, 8).unwrap(), symbols);
    }

    #[test]
    fn single_near_deterministic_symbol_needs_only_the_flush() {
        struct Fixed(FreqTable);
        impl Model for Fixed {
            fn num_symbols(&self) -> usize {
                self.0.num_symbols()
            }
            fn predict(&self) -> FreqTable {
                self.0.clone()
            }
            fn update(&mut self, _s: usize) -> Result<(), crate::prob::ProbError> {
                Ok(())
            }
        }
        let table = FreqTable::from_weights(&[1u64 << 40, 1], 1 << 14).unwrap();
        let mut model = Fixed(table.clone());
        let stream = ac_encode(&mut model, &[0]).unwrap();
        assert_eq!(stream.len(), 2);

        // A hundred such symbols stay within the slack budget.
        let mut model = Fixed(table);
        let stream = ac_encode(&mut model, &vec![0usize; 100]).unwrap();
        assert!(stream.len() <= 9 + 32, "got {} bits", stream.len());
    }

    #[test]
    fn uncodable_symbols_are_rejected() {
        let mut model = UniformModel::new(4).unwrap();
        assert_eq!(
            ac_encode(&mut model, &[1, 9]),
            Err(CoderError::UncodableSymbol { symbol: 9, k: 4 })
        );
    }

    fn roundtrip_case(case: u64) -> (Vec<usize>, BitStream, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let kind = case % 3;
        match kind {
            0 => {
                let k = *[2usize, 4, 256, 1 << 16].iter().nth(rng.gen_range(0..4)).unwrap();
                let n = rng.gen_range(1..400);
                let symbols: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
                let mut enc = UniformModel::new(k).unwrap();
                let mut ideal_model = UniformModel::new(k).unwrap();
                let stream = ac_encode(&mut enc, &symbols).unwrap();
                let ideal = stream_bits_lower_bound(&mut ideal_model, &symbols).unwrap();
                (symbols, stream, ideal)
            }
            1 => {
                let positions = rng.gen_range(1..12);
                let n = rng.gen_range(1..2000);
                // Biased bits so the adaptive model has something to learn.
                let p: f64 = rng.gen_range(0.05..0.95);
                let symbols: Vec<usize> =
                    (0..n).map(|_| usize::from(rng.gen_bool(p))).collect();
                let mut enc = AdaptiveBitModel::new(positions).unwrap();
                let mut ideal_model = AdaptiveBitModel::new(positions).unwrap();
                let stream = ac_encode(&mut enc, &symbols).unwrap();
                let ideal = stream_bits_lower_bound(&mut ideal_model, &symbols).unwrap();
                (symbols, stream, ideal)
            }
            _ => {
                let k = *[2usize, 4, 16].iter().nth(rng.gen_range(0..3)).unwrap();
                let order = rng.gen_range(1..3);
                let n = rng.gen_range(1..600);
                let symbols: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
                let mut enc = ContextModel::new(k, order).unwrap();
                let mut ideal_model = ContextModel::new(k, order).unwrap();
                let stream = ac_encode(&mut enc, &symbols).unwrap();
                let ideal = stream_bits_lower_bound(&mut ideal_model, &symbols).unwrap();
                (symbols, stream, ideal)
            }
        }
    }

    fn decode_case(case: u64, stream: &BitStream, n: usize) -> Result<Vec<usize>, CoderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        match case % 3 {
            0 => {
                let k = *[2usize, 4, 256, 1 << 16].iter().nth(rng.gen_range(0..4)).unwrap();
                let _: usize = rng.gen_range(1..400);
                ac_decode_verified(&mut UniformModel::new(k).unwrap(), stream, n)
            }
            1 => {
                let positions = rng.gen_range(1..12);
                ac_decode_verified(&mut AdaptiveBitModel::new(positions).unwrap(), stream, n)
            }
            _ => {
                let k = *[2usize, 4, 16].iter().nth(rng.gen_range(0..3)).unwrap();
                let order = rng.gen_range(1..3);
                ac_decode_verified(&mut ContextModel::new(k, order).unwrap(), stream, n)
            }
        }
    }

    #[test]
    fn fuzzed_streams_round_trip_within_the_slack_window() {
        for case in 0..120u64 {
            let (symbols, stream, ideal) = roundtrip_case(case);
            let decoded = decode_case(case, &stream, symbols.len())
                .unwrap_or_else(|e| panic!("case {case}: {e}"));
            assert_eq!(decoded, symbols, "case {case} round trip");
            let measured = stream.len() as f64;
            assert!(
                measured >= ideal - 1e-9 && measured <= ideal + 32.0,
                "case {case}: measured {measured} vs ideal {ideal}"
            );
        }
    }

    #[test]
    fn truncated_streams_never_decode_silently_wrong() {
        let mut flagged = 0usize;
        let mut total = 0usize;
        for case in 0..60u64 {
            let (symbols, stream, _) = roundtrip_case(case);
            for cut in [8usize, 9, 17, 40] {
                if stream.len() <= cut {
                    continue;
                }
                total += 1;
                let shorter = stream.truncated(stream.len() - cut);
                match decode_case(case, &shorter, symbols.len()) {
                    Err(_) => flagged += 1,
                    Ok(decoded) => assert_eq!(
                        decoded, symbols,
                        "case {case} cut {cut}: silent wrong decode"
                    ),
                }
            }
        }
        assert!(total > 100, "mutation sweep too small ({total} cases)");
        assert_eq!(flagged, total, "some truncations slipped through undetected");
    }

    #[test]
    fn extended_streams_are_rejected_too() {
        let (symbols, stream, _) = roundtrip_case(3);
        let mut longer = stream.clone();
        for _ in 0..16 {
            longer.push(true);
        }
        assert!(decode_case(3, &longer, symbols.len()).is_err());
    }

    #[test]
    fn adaptive_round_trip_compresses_a_skewed_stream() {
        // 95%-zero bits: the adaptive model should beat 1 bit/symbol by a lot.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let symbols: Vec<usize> = (0..4000).map(|_| usize::from(rng.gen_bool(0.05))).collect();
        let mut enc = AdaptiveBitModel::new(1).unwrap();
        let stream = ac_encode(&mut enc, &symbols).unwrap();
        assert!(stream.len() < 2000, "no compression: {} bits", stream.len());
        let mut dec = AdaptiveBitModel::new(1).unwrap();
        assert_eq!(ac_decode_verified(&mut dec, &stream, symbols.len()).unwrap(), symbols);
    }
}
