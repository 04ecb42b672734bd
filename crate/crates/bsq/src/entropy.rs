//! Soft assignment over the implicit codebook and the entropy terms built on
//! it.
//!
//! The softmax over all `2^L` corners factorizes into `L` independent
//! Bernoulli variables, one per dimension, which is what makes entropy
//! regularization affordable: per-sample entropy is a sum of `L` binary
//! entropies instead of a reduction over `2^L` states, and the dataset term
//! uses the closest factorized distribution (per-dimension batch marginals) in
//! place of the intractable batch mixture. The brute-force operations in this
//! module enumerate the full codebook and exist to check those shortcuts, so
//! they are deliberately written against the unfactorized definitions.
//!
//! All entropies are in bits.

use crate::quantizer::{corner_coord, SphereVec, TokenCode};
use thiserror::Error;

/// Soft-assignment probabilities are kept this far away from 0 and 1 so the
/// entropy terms and their gradients stay finite.
pub const PROB_CLAMP: f64 = 1e-12;

/// Brute-force enumerations refuse to allocate more than `2^20` states.
pub const MAX_BRUTE_FORCE_BITS: usize = 20;

/// Exact-mixture computations (batch mixtures of brute-force distributions)
/// are capped lower to keep batched sweeps fast.
pub const MAX_MIXTURE_BITS: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error("{bits} bits would enumerate 2^{bits} codes; the cap is {max}")]
    TooLarge { bits: usize, max: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("group size {group} does not evenly divide {bits} dimensions (cap 20)")]
    BadGroupSize { group: usize, bits: usize },
    #[error("assignment lengths differ within one batch: {expected} vs {got}")]
    MixedLengths { expected: usize, got: usize },
}

/// Binary entropy in bits, with the integrand clamped so `H(0) = H(1) = 0`
/// holds as the limit value.
pub fn binary_entropy(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = 1.0 - p;
    -(p * p.log2() + q * q.log2())
}

/// Per-dimension Bernoulli parameters of the soft quantizer: entry `d` is the
/// probability that bit `d` comes out positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    probs: Vec<f64>,
}

impl SoftAssignment {
    /// Clamps each probability into `[PROB_CLAMP, 1 - PROB_CLAMP]`; at extreme
    /// temperatures the sigmoid rounds to exactly 0 or 1 in `f64` and the
    /// clamp keeps downstream logs finite.
    pub fn new(probs: Vec<f64>) -> Self {
        assert!(!probs.is_empty(), "assignment must have at least one dimension");
        assert!(probs.iter().all(|p| p.is_finite()), "probabilities must be finite");
        let probs = probs.iter().map(|p| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).collect();
        SoftAssignment { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Probability of one full code under the factorized assignment: the
    /// product of the per-bit masses selected by the code's bits.
    pub fn code_mass(&self, token: TokenCode) -> f64 {
        assert_eq!(token.bits, self.len());
        let mut mass = 1.0;
        for (d, &p) in self.probs.iter().enumerate() {
            mass *= if token.code >> d & 1 == 1 { p } else { 1.0 - p };
        }
        mass
    }
}

/// A dense distribution over all `2^L` codes, indexed by token code.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeDistribution {
    mass: Vec<f64>,
    bits: usize,
}

impl CodeDistribution {
    pub fn new(mass: Vec<f64>, bits: usize) -> Result<Self, EntropyError> {
        if bits > MAX_BRUTE_FORCE_BITS {
            return Err(EntropyError::TooLarge { bits, max: MAX_BRUTE_FORCE_BITS });
        }
        assert_eq!(mass.len(), 1 << bits, "mass must cover all codes");
        assert!(mass.iter().all(|&m| m >= 0.0), "mass must be nonnegative");
        let total: f64 = mass.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12, "mass must sum to 1, got {total}");
        Ok(CodeDistribution { mass, bits })
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    /// Shannon entropy in bits, with `0 log 0 = 0`.
    pub fn entropy_bits(&self) -> f64 {
        self.mass.iter().filter(|&&m| m > 0.0).map(|&m| -m * m.log2()).sum()
    }

    /// Uniform-weight mixture of several distributions over the same codebook.
    pub fn mixture(dists: &[CodeDistribution]) -> Result<CodeDistribution, EntropyError> {
        let first = dists.first().ok_or(EntropyError::EmptyBatch)?;
        let bits = first.bits;
        let mut mass = vec![0.0; 1 << bits];
        for dist in dists {
            if dist.bits != bits {
                return Err(EntropyError::MixedLengths { expected: bits, got: dist.bits });
            }
            for (acc, &m) in mass.iter_mut().zip(&dist.mass) {
                *acc += m;
            }
        }
        let n = dists.len() as f64;
        for m in &mut mass {
            *m /= n;
        }
        CodeDistribution::new(mass, bits)
    }
}

/// Per-dimension means of a batch of soft assignments: the parameters of the
/// closest factorized distribution to the batch mixture (its M-projection).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMarginals {
    mean_probs: Vec<f64>,
}

impl BatchMarginals {
    pub fn mean_probs(&self) -> &[f64] {
        &self.mean_probs
    }

    pub fn len(&self) -> usize {
        self.mean_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_probs.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Temperature-relaxed quantizer: bit `d` is positive with probability
/// `sigma(2 tau u_d / sqrt(L))`.
pub fn soft_assign(u: &SphereVec, tau: f64) -> SoftAssignment {
    assert!(tau > 0.0, "temperature must be positive, got {tau}");
    let s = corner_coord(u.len());
    SoftAssignment::new(u.values().iter().map(|&x| sigmoid(2.0 * tau * s * x)).collect())
}

/// The same soft quantizer computed the expensive way: a softmax of
/// `tau * <corner, u>` over all `2^L` corners. Oracle for the factorized form.
pub fn brute_force_code_dist(u: &SphereVec, tau: f64) -> Result<CodeDistribution, EntropyError> {
    assert!(tau >= 0.0, "temperature must be nonnegative, got {tau}");
    let bits = u.len();
    if bits > MAX_BRUTE_FORCE_BITS {
        return Err(EntropyError::TooLarge { bits, max: MAX_BRUTE_FORCE_BITS });
    }
    // Corner dot products for all codes at once: extending by one dimension
    // doubles the table, with the new bit as the new high bit. Bit d of the
    // index selects the sign of dimension d, matching the token layout.
    let s = corner_coord(bits);
    let mut dots = vec![0.0f64];
    for d in 0..bits {
        let term = s * u.values()[d];
        let mut next = Vec::with_capacity(dots.len() * 2);
        next.extend(dots.iter().map(|x| x - term));
        next.extend(dots.iter().map(|x| x + term));
        dots = next;
    }
    let peak = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut mass: Vec<f64> = dots.iter().map(|&x| (tau * (x - peak)).exp()).collect();
    let total: f64 = mass.iter().sum();
    for m in &mut mass {
        *m /= total;
    }
    CodeDistribution::new(mass, bits)
}

/// Entropy of one sample's soft assignment: the factorization makes it a sum
/// of `L` binary entropies.
pub fn per_sample_entropy(a: &SoftAssignment) -> f64 {
    a.probs().iter().map(|&p| binary_entropy(p)).sum()
}

pub fn batch_marginals(batch: &[SoftAssignment]) -> Result<BatchMarginals, EntropyError> {
    let first = batch.first().ok_or(EntropyError::EmptyBatch)?;
    let bits = first.len();
    let mut mean = vec![0.0; bits];
    for a in batch {
        if a.len() != bits {
            return Err(EntropyError::MixedLengths { expected: bits, got: a.len() });
        }
        for (acc, &p) in mean.iter_mut().zip(a.probs()) {
            *acc += p;
        }
    }
    let n = batch.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    Ok(BatchMarginals { mean_probs: mean })
}

/// Entropy of the factorized stand-in for the dataset code distribution:
/// binary entropies of the per-dimension batch means. Always an upper bound on
/// the entropy of the exact batch mixture.
pub fn dataset_entropy_approx(batch: &[SoftAssignment]) -> Result<f64, EntropyError> {
    let marginals = batch_marginals(batch)?;
    Ok(marginals.mean_probs().iter().map(|&p| binary_entropy(p)).sum())
}

/// The combined entropy objective: low per-sample entropy (confident
/// assignments) minus `gamma` times high dataset entropy (spread code usage).
pub fn entropy_loss(batch: &[SoftAssignment], gamma: f64) -> Result<f64, EntropyError> {
    assert!(gamma >= 0.0, "gamma must be nonnegative, got {gamma}");
    if batch.is_empty() {
        return Err(EntropyError::EmptyBatch);
    }
    let mean_per_sample =
        batch.iter().map(per_sample_entropy).sum::<f64>() / batch.len() as f64;
    Ok(mean_per_sample - gamma * dataset_entropy_approx(batch)?)
}

/// How much entropy the factorized dataset approximation over-reports for this
/// batch: entropy of the marginal product minus entropy of the exact mixture.
/// Nonnegative up to rounding.
pub fn approximation_gap(batch: &[SphereVec], tau: f64) -> Result<f64, EntropyError> {
    let first = batch.first().ok_or(EntropyError::EmptyBatch)?;
    let bits = first.len();
    if bits > MAX_MIXTURE_BITS {
        return Err(EntropyError::TooLarge { bits, max: MAX_MIXTURE_BITS });
    }
    let assignments: Vec<SoftAssignment> = batch.iter().map(|u| soft_assign(u, tau)).collect();
    let approx = dataset_entropy_approx(&assignments)?;
    let dists: Vec<CodeDistribution> =
        batch.iter().map(|u| brute_force_code_dist(u, tau)).collect::<Result<_, _>>()?;
    let exact = CodeDistribution::mixture(&dists)?.entropy_bits();
    Ok(approx - exact)
}

/// Per-sample entropy computed over groups of `g` dimensions at a time: each
/// group's joint distribution over its `2^g` outcomes is enumerated exactly,
/// entropies are summed across groups and averaged over the batch. `g = 1`
/// recovers the fully factorized sum; `g = L` is the exact full enumeration.
pub fn grouped_entropy(batch: &[SoftAssignment], g: usize) -> Result<f64, EntropyError> {
    let first = batch.first().ok_or(EntropyError::EmptyBatch)?;
    let bits = first.len();
    if g == 0 || g > MAX_BRUTE_FORCE_BITS || bits % g != 0 {
        return Err(EntropyError::BadGroupSize { group: g, bits });
    }
    let mut total = 0.0;
    for a in batch {
        if a.len() != bits {
            return Err(EntropyError::MixedLengths { expected: bits, got: a.len() });
        }
        // Per-sample subtotal, then one accumulation per sample: the same
        // summation shape as averaging [`per_sample_entropy`] over the batch,
        // so the g = 1 case reproduces it bit for bit.
        let sample: f64 = a
            .probs()
            .chunks(g)
            .map(|group| {
                // Joint probabilities of all 2^g outcomes by repeated doubling.
                let mut joint = vec![1.0f64];
                for &p in group {
                    let mut next = Vec::with_capacity(joint.len() * 2);
                    next.extend(joint.iter().map(|m| m * (1.0 - p)));
                    next.extend(joint.iter().map(|m| m * p));
                    joint = next;
                }
                joint.iter().filter(|&&m| m > 0.0).map(|&m| -m * m.log2()).sum::<f64>()
            })
            .sum();
        total += sample;
    }
    Ok(total / batch.len() as f64)
}

/// Soft assignment for the LFQ baseline: mass over `{-1, +1}^L` proportional
/// to `exp(-tau * |corner - z|^2)`, with bit `d` of the index giving the sign
/// of dimension `d`.
pub fn lfq_soft_assign(z: &[f64], tau: f64) -> Result<CodeDistribution, EntropyError> {
    assert!(tau >= 0.0, "temperature must be nonnegative, got {tau}");
    let bits = z.len();
    if bits > MAX_BRUTE_FORCE_BITS {
        return Err(EntropyError::TooLarge { bits, max: MAX_BRUTE_FORCE_BITS });
    }
    let mut dist_sq = vec![0.0f64];
    for &zd in z {
        let minus = (-1.0 - zd) * (-1.0 - zd);
        let plus = (1.0 - zd) * (1.0 - zd);
        let mut next = Vec::with_capacity(dist_sq.len() * 2);
        next.extend(dist_sq.iter().map(|x| x + minus));
        next.extend(dist_sq.iter().map(|x| x + plus));
        dist_sq = next;
    }
    let lowest = dist_sq.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut mass: Vec<f64> = dist_sq.iter().map(|&d| (-tau * (d - lowest)).exp()).collect();
    let total: f64 = mass.iter().sum();
    for m in &mut mass {
        *m /= total;
    }
    CodeDistribution::new(mass, bits)
}
