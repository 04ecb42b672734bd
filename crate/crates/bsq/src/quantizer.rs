//! Hard quantization bottlenecks: BSQ on the unit sphere, sign-only LFQ, and
//! nearest-neighbor VQ against an explicit codebook.
//!
//! The BSQ path is `v -> u = v/|v| -> u_hat = sign(u)/sqrt(L)`, and a token is
//! the packed sign pattern of `v`. Packing and quantization share one sign
//! convention (zero counts as positive), so encode/decode and quantize agree
//! exactly on every input including the measure-zero boundary.

use thiserror::Error;

/// Norms at or below this are treated as zero; normalizing them would only
/// amplify noise.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Largest supported bits-per-token, chosen so a code fits in a `u64`.
pub const MAX_BITS: usize = 63;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("cannot normalize a vector with norm {norm:e} (threshold 1e-12)")]
    ZeroNorm { norm: f64 },
    #[error("{bits} bits per token exceeds the supported maximum of 63")]
    Unsupported { bits: usize },
    #[error("code {code} does not fit in {bits} bits")]
    OutOfRange { code: u64, bits: usize },
    #[error("codebook has no entries")]
    EmptyCodebook,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
}

/// The per-axis coordinate magnitude of a codebook corner, `1/sqrt(L)`.
///
/// Every site that materializes corner coordinates goes through this helper so
/// quantized vectors compare bitwise equal regardless of how they were built.
pub fn corner_coord(bits: usize) -> f64 {
    1.0 / (bits as f64).sqrt()
}

fn check_finite(values: &[f64]) -> Result<(), QuantError> {
    match values.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(QuantError::NonFinite { index }),
        None => Ok(()),
    }
}

fn norm(values: &[f64]) -> f64 {
    values.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A point on the unit sphere in `R^L`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereVec(Vec<f64>);

impl SphereVec {
    /// Wraps an already-normalized vector, rejecting anything whose norm is
    /// more than `1e-9` away from 1.
    pub fn new(values: Vec<f64>) -> Result<Self, QuantError> {
        check_finite(&values)?;
        let n = norm(&values);
        if (n - 1.0).abs() > 1e-9 {
            return Err(QuantError::ZeroNorm { norm: n });
        }
        Ok(SphereVec(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A codebook corner: every coordinate is exactly `+-1/sqrt(L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSphereVec(Vec<f64>);

impl QuantizedSphereVec {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

/// A packed token: the low `bits` bits of `code` are the per-dimension signs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenCode {
    pub code: u64,
    pub bits: usize,
}

impl TokenCode {
    pub fn new(code: u64, bits: usize) -> Result<Self, QuantError> {
        if bits == 0 || bits > MAX_BITS {
            return Err(QuantError::Unsupported { bits });
        }
        if code >> bits != 0 {
            return Err(QuantError::OutOfRange { code, bits });
        }
        Ok(TokenCode { code, bits })
    }
}

/// Shared knobs for a BSQ bottleneck: latent width `d`, token width `L`,
/// soft-assignment temperature, and the dataset-entropy weight.
#[derive(Debug, Clone, PartialEq)]
pub struct BsqConfig {
    pub latent_dim: usize,
    pub bits: usize,
    pub tau: f64,
    pub gamma: f64,
}

impl BsqConfig {
    pub fn new(latent_dim: usize, bits: usize) -> Result<Self, QuantError> {
        let config = BsqConfig { latent_dim, bits, tau: 1.0, gamma: 1.0 };
        config.validate()?;
        Ok(config)
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if self.bits == 0 || self.bits > MAX_BITS {
            return Err(QuantError::Unsupported { bits: self.bits });
        }
        if self.latent_dim < self.bits {
            return Err(QuantError::DimMismatch { expected: self.bits, got: self.latent_dim });
        }
        assert!(self.tau > 0.0, "temperature must be positive, got {}", self.tau);
        assert!(self.gamma >= 0.0, "gamma must be nonnegative, got {}", self.gamma);
        Ok(())
    }
}

/// An explicit codebook of `K` vectors in `R^d` for the VQ baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct VqCodebook {
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

impl VqCodebook {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self, QuantError> {
        let first = vectors.first().ok_or(QuantError::EmptyCodebook)?;
        let dim = first.len();
        for row in &vectors {
            if row.len() != dim {
                return Err(QuantError::DimMismatch { expected: dim, got: row.len() });
            }
            check_finite(row)?;
        }
        Ok(VqCodebook { vectors, dim })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.vectors[k]
    }
}

/// Scales `v` onto the unit sphere.
pub fn project_to_sphere(v: &[f64]) -> Result<SphereVec, QuantError> {
    check_finite(v)?;
    let n = norm(v);
    if n <= ZERO_NORM_EPS {
        return Err(QuantError::ZeroNorm { norm: n });
    }
    Ok(SphereVec(v.iter().map(|x| x / n).collect()))
}

/// Snaps a unit vector to the nearest codebook corner: per-dimension sign
/// scaled by `1/sqrt(L)`, with zero counting as positive.
pub fn bsq_quantize(u: &SphereVec) -> QuantizedSphereVec {
    let s = corner_coord(u.len());
    QuantizedSphereVec(u.values().iter().map(|&x| if x >= 0.0 { s } else { -s }).collect())
}

/// Packs the sign pattern of `v` into a token: bit `d` is set iff `v[d] >= 0`.
///
/// Works on either the projected or the normalized vector since normalization
/// preserves signs. Note `-0.0 >= 0.0` holds in IEEE arithmetic, so both zeros
/// take the positive branch.
pub fn encode_token(v: &[f64]) -> Result<TokenCode, QuantError> {
    let bits = v.len();
    if bits == 0 || bits > MAX_BITS {
        return Err(QuantError::Unsupported { bits });
    }
    check_finite(v)?;
    let mut code = 0u64;
    for (d, &x) in v.iter().enumerate() {
        if x >= 0.0 {
            code |= 1 << d;
        }
    }
    Ok(TokenCode { code, bits })
}

/// Unpacks a token back into its codebook corner.
pub fn decode_token(token: TokenCode) -> Result<QuantizedSphereVec, QuantError> {
    let TokenCode { code, bits } = token;
    if bits == 0 || bits > MAX_BITS {
        return Err(QuantError::Unsupported { bits });
    }
    if code >> bits != 0 {
        return Err(QuantError::OutOfRange { code, bits });
    }
    let s = corner_coord(bits);
    let values = (0..bits).map(|d| if code >> d & 1 == 1 { s } else { -s }).collect();
    Ok(QuantizedSphereVec(values))
}

/// Sign quantization without sphere normalization: the LFQ baseline, whose
/// codebook is `{-1, +1}^L`.
pub fn lfq_quantize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x >= 0.0 { 1.0 } else { -1.0 }).collect()
}

/// Nearest codebook entry by Euclidean distance; ties go to the lowest index.
pub fn vq_quantize<'a>(z: &[f64], cb: &'a VqCodebook) -> Result<(usize, &'a [f64]), QuantError> {
    if cb.dim() != z.len() {
        return Err(QuantError::DimMismatch { expected: cb.dim(), got: z.len() });
    }
    check_finite(z)?;
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for k in 0..cb.len() {
        let dist: f64 = z.iter().zip(cb.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best_dist {
            best = k;
            best_dist = dist;
        }
    }
    Ok((best, cb.row(best)))
}
