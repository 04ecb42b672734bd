//! On-disk containers for token streams and their compressed form, plus the
//! glue between token codes and the arithmetic coder's symbol alphabets.
//!
//! Both formats are little-endian with fixed byte offsets.
//!
//! Token file (magic `BSQT`, version 1):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0      | 4    | magic `BSQT` |
//! | 4      | 2    | version (u16) |
//! | 6      | 1    | bits per token L (u8) |
//! | 7      | 1    | patch size p (u8) |
//! | 8      | 4    | frame count T (u32) |
//! | 12     | 4    | token grid height H (u32) |
//! | 16     | 4    | token grid width W (u32) |
//! | 20     | 8    | token count N (u64, must equal T*H*W) |
//! | 28     | N*ceil(L/8) | codes, each ceil(L/8) bytes little-endian |
//!
//! Codes are byte-aligned rather than bit-packed: the compressed container is
//! the size-critical artifact, and byte alignment keeps this one trivially
//! seekable.
//!
//! Compressed file (magic `BSQC`, version 1):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0      | 4    | magic `BSQC` |
//! | 4      | 2    | version (u16) |
//! | 6      | 1    | model id: 0 uniform, 1 adaptive-bit, 2 context |
//! | 7      | 1    | context order (0 unless model id 2) |
//! | 8      | 1    | bits per token L (u8) |
//! | 9      | 1    | patch size p (u8) |
//! | 10     | 4    | frame count T (u32) |
//! | 14     | 4    | token grid height H (u32) |
//! | 18     | 4    | token grid width W (u32) |
//! | 22     | 8    | token count N (u64) |
//! | 30     | ...  | serialized arithmetic-coder bitstream |
//!
//! The uniform and adaptive-bit models code tokens bit by bit (least
//! significant bit first, one model position per bit), so they work at any L;
//! the context model codes whole tokens over an alphabet of `2^L` symbols and
//! is limited to L <= 16. Decompression uses the verified decode path, so a
//! corrupted payload surfaces as an error rather than wrong tokens.

use crate::coder::{ac_decode_verified, ac_encode, BitStream, CoderError};
use crate::prob::{
    AdaptiveBitModel, ContextModel, FreqTable, Model, ProbError, UniformModel, MAX_CONTEXT_ORDER,
};
use crate::quantizer::MAX_BITS;
use thiserror::Error;

pub const TOKEN_MAGIC: [u8; 4] = *b"BSQT";
pub const COMPRESSED_MAGIC: [u8; 4] = *b"BSQC";
pub const TOKEN_VERSION: u16 = 1;
pub const COMPRESSED_VERSION: u16 = 1;

/// Context-model tokens index a frequency table of `2^L` entries, which must
/// fit the coder's maximum scale.
pub const MAX_CONTEXT_TOKEN_BITS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum ContainerError {
    #[error("bad magic {found:02x?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("file truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("{extra} trailing bytes after the payload")]
    TrailingData { extra: usize },
    #[error("bad geometry: {reason}")]
    BadGeometry { reason: String },
    #[error("code {code} at index {index} does not fit in {bits} bits")]
    CodeOutOfRange { index: usize, code: u64, bits: usize },
    #[error("unknown or malformed model id {id} (order {order})")]
    BadModel { id: u8, order: u8 },
    #[error("model unsupported for this token file: {reason}")]
    ModelUnsupported { reason: String },
    #[error("token and compressed geometry disagree: {reason}")]
    GeometryMismatch { reason: String },
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Prob(#[from] ProbError),
}

/// Shape of a token stream: `bits` per token, source patch size, and a
/// frames-by-grid layout with `frames * grid_h * grid_w` tokens total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGeometry {
    pub bits: usize,
    pub patch: usize,
    pub frames: u32,
    pub grid_h: u32,
    pub grid_w: u32,
}

impl TokenGeometry {
    pub fn validate(&self) -> Result<(), ContainerError> {
        if self.bits < 1 || self.bits > MAX_BITS {
            return Err(ContainerError::BadGeometry {
                reason: format!("bits per token {} outside 1..={MAX_BITS}", self.bits),
            });
        }
        if self.patch < 1 || self.patch > 255 {
            return Err(ContainerError::BadGeometry {
                reason: format!("patch size {} outside 1..=255", self.patch),
            });
        }
        Ok(())
    }

    pub fn token_count(&self) -> u64 {
        self.frames as u64 * self.grid_h as u64 * self.grid_w as u64
    }

    /// Pixels covered by the stream: each token stands for a `patch x patch`
    /// block, so every frame holds `(grid_h * patch) * (grid_w * patch)`.
    pub fn pixel_count(&self) -> u64 {
        self.token_count() * (self.patch as u64) * (self.patch as u64)
    }

    /// Bytes one code occupies in the token file.
    pub fn code_bytes(&self) -> usize {
        self.bits.div_ceil(8)
    }
}

/// A parsed token file: geometry plus one code per token, row-major within
/// each frame, frames in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFile {
    pub geometry: TokenGeometry,
    pub codes: Vec<u64>,
}

impl TokenFile {
    pub fn new(geometry: TokenGeometry, codes: Vec<u64>) -> Result<Self, ContainerError> {
        geometry.validate()?;
        if codes.len() as u64 != geometry.token_count() {
            return Err(ContainerError::BadGeometry {
                reason: format!(
                    "{} codes for a geometry of {} tokens",
                    codes.len(),
                    geometry.token_count()
                ),
            });
        }
        let limit = code_limit(geometry.bits);
        for (index, &code) in codes.iter().enumerate() {
            if code >= limit {
                return Err(ContainerError::CodeOutOfRange { index, code, bits: geometry.bits });
            }
        }
        Ok(TokenFile { geometry, codes })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cb = self.geometry.code_bytes();
        let mut out = Vec::with_capacity(28 + self.codes.len() * cb);
        out.extend_from_slice(&TOKEN_MAGIC);
        out.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
        out.push(self.geometry.bits as u8);
        out.push(self.geometry.patch as u8);
        out.extend_from_slice(&self.geometry.frames.to_le_bytes());
        out.extend_from_slice(&self.geometry.grid_h.to_le_bytes());
        out.extend_from_slice(&self.geometry.grid_w.to_le_bytes());
        out.extend_from_slice(&(self.codes.len() as u64).to_le_bytes());
        for &code in &self.codes {
            out.extend_from_slice(&code.to_le_bytes()[..cb]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let header = bytes.get(..28).ok_or(ContainerError::Truncated { need: 28, have: bytes.len() })?;
        let magic: [u8; 4] = header[0..4].try_into().unwrap();
        if magic != TOKEN_MAGIC {
            return Err(ContainerError::BadMagic { found: magic });
        }
        let version = u16::from_le_bytes(header[4..6].try_into().unwrap());
        if version != TOKEN_VERSION {
            return Err(ContainerError::VersionMismatch { found: version, expected: TOKEN_VERSION });
        }
        let geometry = TokenGeometry {
            bits: header[6] as usize,
            patch: header[7] as usize,
            frames: u32::from_le_bytes(header[8..12].try_into().unwrap()),
            grid_h: u32::from_le_bytes(header[12..16].try_into().unwrap()),
            grid_w: u32::from_le_bytes(header[16..20].try_into().unwrap()),
        };
        geometry.validate()?;
        let n = u64::from_le_bytes(header[20..28].try_into().unwrap());
        if n != geometry.token_count() {
            return Err(ContainerError::BadGeometry {
                reason: format!("count field {n} != frames*grid = {}", geometry.token_count()),
            });
        }
        let cb = geometry.code_bytes();
        let need = 28 + (n as usize).checked_mul(cb).ok_or(ContainerError::BadGeometry {
            reason: "token payload overflows addressable size".into(),
        })?;
        if bytes.len() < need {
            return Err(ContainerError::Truncated { need, have: bytes.len() });
        }
        if bytes.len() > need {
            return Err(ContainerError::TrailingData { extra: bytes.len() - need });
        }
        let limit = code_limit(geometry.bits);
        let mut codes = Vec::with_capacity(n as usize);
        for index in 0..n as usize {
            let mut buf = [0u8; 8];
            buf[..cb].copy_from_slice(&bytes[28 + index * cb..28 + (index + 1) * cb]);
            let code = u64::from_le_bytes(buf);
            if code >= limit {
                return Err(ContainerError::CodeOutOfRange { index, code, bits: geometry.bits });
            }
            codes.push(code);
        }
        Ok(TokenFile { geometry, codes })
    }
}

fn code_limit(bits: usize) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        1u64 << bits
    }
}

/// Which probability model a compressed file was coded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    /// Bit-level uniform coding: no modeling gain, any L.
    Uniform,
    /// Per-bit-position adaptive Bernoulli coding, any L.
    AdaptiveBit,
    /// Token-level order-k context coding; requires L <= 16.
    Context { order: usize },
}

impl ModelChoice {
    pub fn id(&self) -> u8 {
        match self {
            ModelChoice::Uniform => 0,
            ModelChoice::AdaptiveBit => 1,
            ModelChoice::Context { .. } => 2,
        }
    }

    fn order_byte(&self) -> u8 {
        match self {
            ModelChoice::Context { order } => *order as u8,
            _ => 0,
        }
    }

    pub fn from_header(id: u8, order: u8) -> Result<Self, ContainerError> {
        match (id, order) {
            (0, 0) => Ok(ModelChoice::Uniform),
            (1, 0) => Ok(ModelChoice::AdaptiveBit),
            (2, o) if o >= 1 && o as usize <= MAX_CONTEXT_ORDER => {
                Ok(ModelChoice::Context { order: o as usize })
            }
            _ => Err(ContainerError::BadModel { id, order }),
        }
    }

    /// Whether tokens are decomposed into bits (true) or coded whole (false).
    fn bit_level(&self) -> bool {
        !matches!(self, ModelChoice::Context { .. })
    }
}

/// The three model kinds behind one concrete type, so encode and verified
/// decode can clone the initial state.
#[derive(Debug, Clone)]
enum AnyModel {
    Uniform(UniformModel),
    Bit(AdaptiveBitModel),
    Ctx(ContextModel),
}

impl AnyModel {
    fn build(choice: ModelChoice, bits: usize) -> Result<Self, ContainerError> {
        match choice {
            ModelChoice::Uniform => Ok(AnyModel::Uniform(UniformModel::new(2)?)),
            ModelChoice::AdaptiveBit => Ok(AnyModel::Bit(AdaptiveBitModel::new(bits)?)),
            ModelChoice::Context { order } => {
                if bits > MAX_CONTEXT_TOKEN_BITS {
                    return Err(ContainerError::ModelUnsupported {
                        reason: format!(
                            "context model needs bits <= {MAX_CONTEXT_TOKEN_BITS}, file has {bits}"
                        ),
                    });
                }
                Ok(AnyModel::Ctx(ContextModel::new(1usize << bits, order)?))
            }
        }
    }
}

impl Model for AnyModel {
    fn num_symbols(&self) -> usize {
        match self {
            AnyModel::Uniform(m) => m.num_symbols(),
            AnyModel::Bit(m) => m.num_symbols(),
            AnyModel::Ctx(m) => m.num_symbols(),
        }
    }

    fn predict(&self) -> FreqTable {
        match self {
            AnyModel::Uniform(m) => m.predict(),
            AnyModel::Bit(m) => m.predict(),
            AnyModel::Ctx(m) => m.predict(),
        }
    }

    fn update(&mut self, symbol: usize) -> Result<(), ProbError> {
        match self {
            AnyModel::Uniform(m) => m.update(symbol),
            AnyModel::Bit(m) => m.update(symbol),
            AnyModel::Ctx(m) => m.update(symbol),
        }
    }
}

/// Maps token codes to the coder's symbol stream for `choice`: whole tokens
/// for the context model, least-significant-bit-first bit decomposition
/// otherwise.
pub fn tokens_to_symbols(choice: ModelChoice, codes: &[u64], bits: usize) -> Vec<usize> {
    if choice.bit_level() {
        let mut symbols = Vec::with_capacity(codes.len() * bits);
        for &code in codes {
            for b in 0..bits {
                symbols.push(((code >> b) & 1) as usize);
            }
        }
        symbols
    } else {
        codes.iter().map(|&c| c as usize).collect()
    }
}

/// Inverse of [`tokens_to_symbols`].
pub fn symbols_to_tokens(
    choice: ModelChoice,
    symbols: &[usize],
    bits: usize,
) -> Result<Vec<u64>, ContainerError> {
    if choice.bit_level() {
        if symbols.len() % bits != 0 {
            return Err(ContainerError::BadGeometry {
                reason: format!("{} bit symbols not divisible by {bits}", symbols.len()),
            });
        }
        Ok(symbols
            .chunks_exact(bits)
            .map(|chunk| {
                chunk.iter().enumerate().fold(0u64, |code, (b, &bit)| code | (bit as u64) << b)
            })
            .collect())
    } else {
        Ok(symbols.iter().map(|&s| s as u64).collect())
    }
}

/// A compressed token stream: the original geometry, the model that coded it,
/// and the arithmetic-coder payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedFile {
    pub geometry: TokenGeometry,
    pub choice: ModelChoice,
    pub stream: BitStream,
}

impl CompressedFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.stream.to_bytes();
        let mut out = Vec::with_capacity(30 + payload.len());
        out.extend_from_slice(&COMPRESSED_MAGIC);
        out.extend_from_slice(&COMPRESSED_VERSION.to_le_bytes());
        out.push(self.choice.id());
        out.push(self.choice.order_byte());
        out.push(self.geometry.bits as u8);
        out.push(self.geometry.patch as u8);
        out.extend_from_slice(&self.geometry.frames.to_le_bytes());
        out.extend_from_slice(&self.geometry.grid_h.to_le_bytes());
        out.extend_from_slice(&self.geometry.grid_w.to_le_bytes());
        out.extend_from_slice(&self.geometry.token_count().to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let header = bytes.get(..30).ok_or(ContainerError::Truncated { need: 30, have: bytes.len() })?;
        let magic: [u8; 4] = header[0..4].try_into().unwrap();
        if magic != COMPRESSED_MAGIC {
            return Err(ContainerError::BadMagic { found: magic });
        }
        let version = u16::from_le_bytes(header[4..6].try_into().unwrap());
        if version != COMPRESSED_VERSION {
            return Err(ContainerError::VersionMismatch {
                found: version,
                expected: COMPRESSED_VERSION,
            });
        }
        let choice = ModelChoice::from_header(header[6], header[7])?;
        let geometry = TokenGeometry {
            bits: header[8] as usize,
            patch: header[9] as usize,
            frames: u32::from_le_bytes(header[10..14].try_into().unwrap()),
            grid_h: u32::from_le_bytes(header[14..18].try_into().unwrap()),
            grid_w: u32::from_le_bytes(header[18..22].try_into().unwrap()),
        };
        geometry.validate()?;
        let n = u64::from_le_bytes(header[22..30].try_into().unwrap());
        if n != geometry.token_count() {
            return Err(ContainerError::BadGeometry {
                reason: format!("count field {n} != frames*grid = {}", geometry.token_count()),
            });
        }
        let (stream, consumed) = BitStream::from_bytes(&bytes[30..])?;
        if 30 + consumed != bytes.len() {
            return Err(ContainerError::TrailingData { extra: bytes.len() - 30 - consumed });
        }
        Ok(CompressedFile { geometry, choice, stream })
    }
}

/// Losslessly compresses a token file with the chosen model.
pub fn compress(tokens: &TokenFile, choice: ModelChoice) -> Result<CompressedFile, ContainerError> {
    let mut model = AnyModel::build(choice, tokens.geometry.bits)?;
    let symbols = tokens_to_symbols(choice, &tokens.codes, tokens.geometry.bits);
    let stream = ac_encode(&mut model, &symbols)?;
    Ok(CompressedFile { geometry: tokens.geometry, choice, stream })
}

/// Recovers the exact original token file. Uses the verified decode, so a
/// payload that is not a precise encoding of some token stream is rejected.
pub fn decompress(file: &CompressedFile) -> Result<TokenFile, ContainerError> {
    let bits = file.geometry.bits;
    let n_tokens = file.geometry.token_count();
    let per_token = if file.choice.bit_level() { bits as u64 } else { 1 };
    let n_symbols = usize::try_from(n_tokens * per_token).map_err(|_| {
        ContainerError::BadGeometry { reason: "token count exceeds addressable size".into() }
    })?;
    let mut model = AnyModel::build(file.choice, bits)?;
    let symbols = ac_decode_verified(&mut model, &file.stream, n_symbols)?;
    let codes = symbols_to_tokens(file.choice, &symbols, bits)?;
    TokenFile::new(file.geometry, codes)
}

/// Rate summary for a token file, optionally against its compressed form.
/// `coded_bits` counts only the arithmetic-coder payload; fixed headers are
/// excluded from both sides of the comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub raw_bits: u64,
    pub pixel_count: u64,
    pub raw_bpp: f64,
    pub coded: Option<CodedStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodedStats {
    pub coded_bits: u64,
    pub coded_bpp: f64,
    pub savings: f64,
}

pub fn stats(
    tokens: &TokenFile,
    compressed: Option<&CompressedFile>,
) -> Result<StatsReport, ContainerError> {
    let geometry = tokens.geometry;
    let raw_bits = geometry.token_count() * geometry.bits as u64;
    let pixel_count = geometry.pixel_count();
    let per_pixel = |bits: u64| if pixel_count == 0 { 0.0 } else { bits as f64 / pixel_count as f64 };
    let coded = match compressed {
        None => None,
        Some(file) => {
            if file.geometry != geometry {
                return Err(ContainerError::GeometryMismatch {
                    reason: format!("{:?} vs {:?}", file.geometry, geometry),
                });
            }
            let coded_bits = file.stream.len() as u64;
            Some(CodedStats {
                coded_bits,
                coded_bpp: per_pixel(coded_bits),
                savings: if raw_bits == 0 {
                    0.0
                } else {
                    1.0 - coded_bits as f64 / raw_bits as f64
                },
            })
        }
    };
    Ok(StatsReport { raw_bits, pixel_count, raw_bpp: per_pixel(raw_bits), coded })
}
