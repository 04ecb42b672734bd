//! A desk-scale patch autoencoder with a pluggable quantization bottleneck.
//!
//! The network is deliberately tiny and fixed: an 8x8 grayscale patch is
//! flattened to 64 values, encoded by one tanh layer to a `d`-dimensional
//! latent, projected linearly down to `L` dimensions, quantized, projected
//! back up to `d`, and decoded by a tanh layer plus a linear output layer.
//! Backpropagation is written by hand (see [`crate::grad`]), the optimizer is
//! plain SGD with a constant learning rate, and everything is seeded, so two
//! runs with the same config produce bit-identical reports.
//!
//! Four bottlenecks are supported: binary spherical quantization (normalize,
//! then sign), lookup-free quantization (sign to +-1), vector quantization
//! against a frozen random codebook, and a pass-through for the unquantized
//! baseline. Quantized forward passes keep the hard corner in the
//! reconstruction path while gradients flow through the smooth surrogate; the
//! surrogate forward mode exists so finite differences can check the entire
//! loss gradient end to end.
//!
//! The training loss is `mse + weight_entropy * entropy_loss + weight_commit
//! * commit`, where the entropy term pushes per-sample code distributions
//! toward confident corners while spreading the batch average (weighted by
//! `gamma`), and the commit term penalizes the distance between the
//! quantizer's input and its (gradient-blocked) output.

use std::collections::HashSet;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::entropy::{entropy_loss, EntropyError, SoftAssignment};
use crate::grad::{
    bsq_ste_backward, dense_backward, dense_forward, normalize_backward, Activation, DenseGrads,
    DenseLayer, GradError,
};
use crate::quantizer::{
    bsq_quantize, corner_coord, decode_token, encode_token, lfq_quantize, project_to_sphere,
    vq_quantize, QuantError, TokenCode, VqCodebook, MAX_BITS,
};

/// Side length of every patch; inputs are `PATCH * PATCH` values in [0, 1].
pub const PATCH: usize = 8;

/// Widest token the frozen VQ codebook supports (2^bits rows).
pub const MAX_VQ_BITS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerKind {
    Bsq,
    Lfq,
    Vq,
    None,
}

impl FromStr for QuantizerKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "bsq" => Ok(QuantizerKind::Bsq),
            "lfq" => Ok(QuantizerKind::Lfq),
            "vq" => Ok(QuantizerKind::Vq),
            "none" => Ok(QuantizerKind::None),
            other => Err(TrainError::UnknownKind { kind: other.to_string() }),
        }
    }
}

impl std::fmt::Display for QuantizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QuantizerKind::Bsq => "bsq",
            QuantizerKind::Lfq => "lfq",
            QuantizerKind::Vq => "vq",
            QuantizerKind::None => "none",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("bad config: {reason}")]
    BadConfig { reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown kind {kind:?}")]
    UnknownKind { kind: String },
    #[error("loss became non-finite ({loss}) at step {step}; lower the learning rate")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Shape(#[from] GradError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

/// Everything a training run depends on. Identical configs give identical
/// results bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub quantizer: QuantizerKind,
    pub latent_dim: usize,
    pub bits: usize,
    pub tau: f64,
    pub gamma: f64,
    pub weight_entropy: f64,
    pub weight_commit: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// The reference configuration used by the regression tests: BSQ with
    /// d=16, L=8, no commit term, and the default entropy weights.
    pub fn reference() -> Self {
        TrainConfig {
            quantizer: QuantizerKind::Bsq,
            latent_dim: 16,
            bits: 8,
            tau: 1.0,
            gamma: 1.0,
            weight_entropy: 0.1,
            weight_commit: 0.0,
            learning_rate: 0.3,
            batch_size: 32,
            steps: 2000,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |reason: String| Err(TrainError::BadConfig { reason });
        if self.bits < 1 || self.bits > MAX_BITS {
            return bad(format!("bits {} outside 1..={MAX_BITS}", self.bits));
        }
        if self.quantizer == QuantizerKind::Vq && self.bits > MAX_VQ_BITS {
            return bad(format!("vq bits {} outside 1..={MAX_VQ_BITS}", self.bits));
        }
        if self.latent_dim < self.bits {
            return bad(format!("latent_dim {} below bits {}", self.latent_dim, self.bits));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        for (name, w) in
            [("gamma", self.gamma), ("weight_entropy", self.weight_entropy), ("weight_commit", self.weight_commit)]
        {
            if !(w.is_finite() && w >= 0.0) {
                return bad(format!("{name} {w} must be nonnegative"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate {} must be nonnegative", self.learning_rate));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if self.steps < 1 {
            return bad("steps must be at least 1".into());
        }
        Ok(())
    }
}

/// Loss values for one step. `mse`, `entropy`, and `commit` are the raw term
/// values; `total` applies the configured weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub mse: f64,
    pub entropy: f64,
    pub commit: f64,
}

/// Outcome of a training run. `code_usage` is `None` for the pass-through
/// bottleneck, which emits no tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_curve: Vec<LossTerms>,
    pub final_mse: f64,
    pub code_usage: Option<f64>,
}

/// Whether the bottleneck keeps the hard quantized corner (normal operation)
/// or substitutes the smooth surrogate the gradients differentiate — the
/// latter exists so finite differences can validate the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Hard,
    Surrogate,
}

/// The autoencoder: fixed layer stack plus bottleneck configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub quantizer: QuantizerKind,
    pub latent_dim: usize,
    pub bits: usize,
    pub tau: f64,
    pub encoder: Vec<DenseLayer>,
    pub proj_down: DenseLayer,
    pub proj_up: DenseLayer,
    pub decoder: Vec<DenseLayer>,
    pub codebook: Option<VqCodebook>,
}

fn xavier_layer(
    rng: &mut ChaCha8Rng,
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
) -> DenseLayer {
    let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let weights = (0..in_dim * out_dim).map(|_| rng.gen_range(-a..a)).collect();
    DenseLayer::new(in_dim, out_dim, weights, vec![0.0; out_dim], activation)
        .expect("generated shapes agree")
}

impl ToyModel {
    /// Builds a freshly initialized model, drawing weights (and the frozen VQ
    /// codebook, if any) from `rng`.
    pub fn init(config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ToyModel, TrainError> {
        config.validate()?;
        let input = PATCH * PATCH;
        let (d, bits) = (config.latent_dim, config.bits);
        let encoder = vec![xavier_layer(rng, input, d, Activation::Tanh)];
        let proj_down = xavier_layer(rng, d, bits, Activation::Identity);
        let proj_up = xavier_layer(rng, bits, d, Activation::Identity);
        let decoder = vec![
            xavier_layer(rng, d, d, Activation::Tanh),
            xavier_layer(rng, d, input, Activation::Identity),
        ];
        let codebook = if config.quantizer == QuantizerKind::Vq {
            let rows = (0..1usize << bits)
                .map(|_| (0..bits).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            Some(VqCodebook::new(rows)?)
        } else {
            None
        };
        Ok(ToyModel {
            quantizer: config.quantizer,
            latent_dim: d,
            bits,
            tau: config.tau,
            encoder,
            proj_down,
            proj_up,
            decoder,
            codebook,
        })
    }

    /// All trainable layers in a fixed order; gradient vectors use the same
    /// ordering.
    fn layers(&self) -> Vec<&DenseLayer> {
        let mut v: Vec<&DenseLayer> = self.encoder.iter().collect();
        v.push(&self.proj_down);
        v.push(&self.proj_up);
        v.extend(self.decoder.iter());
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut v: Vec<&mut DenseLayer> = self.encoder.iter_mut().collect();
        v.push(&mut self.proj_down);
        v.push(&mut self.proj_up);
        v.extend(self.decoder.iter_mut());
        v
    }

    /// Runs the encoder and projection, returning the pre-quantization
    /// latent.
    fn encode_latent(&self, patch: &[f64]) -> Result<Vec<f64>, TrainError> {
        let mut h = patch.to_vec();
        for layer in &self.encoder {
            h = dense_forward(layer, &h)?;
        }
        Ok(dense_forward(&self.proj_down, &h)?)
    }

    /// Token for one patch under the model's bottleneck. The pass-through
    /// bottleneck has no codes.
    pub fn tokenize_patch(&self, patch: &[f64]) -> Result<TokenCode, TrainError> {
        let v = self.encode_latent(patch)?;
        match self.quantizer {
            QuantizerKind::Bsq | QuantizerKind::Lfq => Ok(encode_token(&v)?),
            QuantizerKind::Vq => {
                let cb = self.codebook.as_ref().expect("vq model carries a codebook");
                let (index, _) = vq_quantize(&v, cb)?;
                Ok(TokenCode::new(index as u64, self.bits)?)
            }
            QuantizerKind::None => Err(TrainError::BadConfig {
                reason: "pass-through bottleneck produces no tokens".into(),
            }),
        }
    }

    /// Reconstructs the patch a token decodes to. Bit-identical to the
    /// reconstruction the forward pass produced for any patch that maps to
    /// this token.
    pub fn decode_patch(&self, token: TokenCode) -> Result<Vec<f64>, TrainError> {
        if token.bits != self.bits {
            return Err(TrainError::BadConfig {
                reason: format!("token has {} bits, model expects {}", token.bits, self.bits),
            });
        }
        let q: Vec<f64> = match self.quantizer {
            QuantizerKind::Bsq => decode_token(token)?.into_values(),
            QuantizerKind::Lfq => {
                (0..self.bits).map(|d| if token.code >> d & 1 == 1 { 1.0 } else { -1.0 }).collect()
            }
            QuantizerKind::Vq => {
                let cb = self.codebook.as_ref().expect("vq model carries a codebook");
                let index = token.code as usize;
                if index >= cb.len() {
                    return Err(TrainError::Quant(QuantError::OutOfRange {
                        code: token.code,
                        bits: self.bits,
                    }));
                }
                cb.row(index).to_vec()
            }
            QuantizerKind::None => {
                return Err(TrainError::BadConfig {
                    reason: "pass-through bottleneck has no tokens to decode".into(),
                })
            }
        };
        self.decode_from_quantized(&q)
    }

    fn decode_from_quantized(&self, q: &[f64]) -> Result<Vec<f64>, TrainError> {
        let mut z = dense_forward(&self.proj_up, q)?;
        for layer in &self.decoder {
            z = dense_forward(layer, &z)?;
        }
        Ok(z)
    }

    /// Full forward pass for a batch, recording every intermediate the
    /// backward pass needs.
    pub fn forward_batch(
        &self,
        batch: &[&[f64]],
        mode: ForwardMode,
    ) -> Result<ForwardBatch, TrainError> {
        let mut traces = Vec::with_capacity(batch.len());
        for patch in batch {
            traces.push(self.forward_sample(patch, mode)?);
        }
        Ok(ForwardBatch { traces, patch_dims: PATCH * PATCH })
    }

    fn forward_sample(&self, patch: &[f64], mode: ForwardMode) -> Result<SampleTrace, TrainError> {
        if patch.len() != PATCH * PATCH {
            return Err(TrainError::Shape(GradError::ShapeMismatch {
                expected: PATCH * PATCH,
                got: patch.len(),
            }));
        }
        let mut enc_outs = Vec::with_capacity(self.encoder.len());
        let mut h = patch.to_vec();
        for layer in &self.encoder {
            h = dense_forward(layer, &h)?;
            enc_outs.push(h.clone());
        }
        let v = dense_forward(&self.proj_down, &h)?;

        let s = corner_coord(self.bits);
        let (unit, quantized, pre_commit, probs, token): (
            Option<Vec<f64>>,
            Vec<f64>,
            Vec<f64>,
            Option<Vec<f64>>,
            Option<TokenCode>,
        ) = match self.quantizer {
            QuantizerKind::Bsq => {
                let u = project_to_sphere(&v)?;
                let probs: Vec<f64> =
                    u.values().iter().map(|&ud| sigmoid(2.0 * self.tau * s * ud)).collect();
                let q = match mode {
                    ForwardMode::Hard => bsq_quantize(&u).into_values(),
                    ForwardMode::Surrogate => u.values().iter().map(|&ud| ud * s).collect(),
                };
                let token = encode_token(&v)?;
                let u_vals = u.values().to_vec();
                (Some(u_vals.clone()), q, u_vals, Some(probs), Some(token))
            }
            QuantizerKind::Lfq => {
                let probs: Vec<f64> =
                    v.iter().map(|&vd| sigmoid(2.0 * self.tau * vd)).collect();
                let q = match mode {
                    ForwardMode::Hard => lfq_quantize(&v),
                    ForwardMode::Surrogate => v.clone(),
                };
                let token = encode_token(&v)?;
                (None, q, v.clone(), Some(probs), Some(token))
            }
            QuantizerKind::Vq => {
                let cb = self.codebook.as_ref().expect("vq model carries a codebook");
                let (index, row) = vq_quantize(&v, cb)?;
                let q = match mode {
                    ForwardMode::Hard => row.to_vec(),
                    ForwardMode::Surrogate => v.clone(),
                };
                let token = TokenCode::new(index as u64, self.bits)?;
                (None, q, v.clone(), None, Some(token))
            }
            QuantizerKind::None => (None, v.clone(), v.clone(), None, None),
        };

        let up_out = dense_forward(&self.proj_up, &quantized)?;
        let mut dec_outs = Vec::with_capacity(self.decoder.len());
        let mut z = up_out.clone();
        for layer in &self.decoder {
            z = dense_forward(layer, &z)?;
            dec_outs.push(z.clone());
        }

        Ok(SampleTrace {
            input: patch.to_vec(),
            enc_outs,
            v,
            unit,
            quantized,
            pre_commit,
            probs,
            token,
            up_out,
            dec_outs,
        })
    }

    /// Loss terms and parameter gradients for a recorded forward batch.
    ///
    /// Gradients are ordered encoder layers, down projection, up projection,
    /// decoder layers — matching [`ToyModel::apply_sgd`].
    pub fn batch_gradients(
        &self,
        fwd: &ForwardBatch,
        weights: &LossWeights,
    ) -> Result<(LossTerms, Vec<LayerGrad>), TrainError> {
        let b = fwd.traces.len();
        assert!(b > 0, "empty forward batch");
        let d_out = fwd.patch_dims;
        let layers = self.layers();
        let mut grads: Vec<LayerGrad> = layers.iter().map(|l| LayerGrad::zeros_for(l)).collect();
        let n_enc = self.encoder.len();
        let (idx_down, idx_up) = (n_enc, n_enc + 1);
        let idx_dec0 = n_enc + 2;

        // Term values.
        let mse = fwd.mean_mse();
        let assignments: Option<Vec<SoftAssignment>> = fwd
            .traces
            .iter()
            .map(|t| t.probs.as_ref().map(|p| SoftAssignment::new(p.clone())))
            .collect();
        let entropy = match &assignments {
            Some(batch) => entropy_loss(batch, weights.gamma)?,
            None => 0.0,
        };
        let commit = fwd
            .traces
            .iter()
            .map(|t| {
                t.pre_commit
                    .iter()
                    .zip(&t.quantized)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / b as f64;
        let total = mse + weights.weight_entropy * entropy + weights.weight_commit * commit;
        let terms = LossTerms { total, mse, entropy, commit };
        if !total.is_finite() {
            return Ok((terms, grads));
        }

        // Batch-mean probabilities feed the dataset-entropy gradient.
        let mean_probs: Option<Vec<f64>> = fwd.traces[0].probs.as_ref().map(|first| {
            let mut mean = vec![0.0; first.len()];
            for t in &fwd.traces {
                for (m, &p) in mean.iter_mut().zip(t.probs.as_ref().unwrap()) {
                    *m += p;
                }
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            mean
        });

        let s = corner_coord(self.bits);
        let bf = b as f64;
        for trace in &fwd.traces {
            // Reconstruction error into the decoder stack.
            let recon = trace.recon();
            let mut g: Vec<f64> = recon
                .iter()
                .zip(&trace.input)
                .map(|(r, x)| 2.0 * (r - x) / (bf * d_out as f64))
                .collect();
            for (i, layer) in self.decoder.iter().enumerate().rev() {
                let input = if i == 0 { &trace.up_out } else { &trace.dec_outs[i - 1] };
                let dg = dense_backward(layer, input, &trace.dec_outs[i], &g)?;
                grads[idx_dec0 + i].add(&dg);
                g = dg.input;
            }
            let dg = dense_backward(&self.proj_up, &trace.quantized, &trace.up_out, &g)?;
            grads[idx_up].add(&dg);
            let g_q = dg.input;

            // Per-dimension entropy upstream d(total)/dp, if probabilities exist.
            let d_probs: Option<Vec<f64>> = match (&trace.probs, &mean_probs) {
                (Some(probs), Some(mean)) if weights.weight_entropy > 0.0 => Some(
                    probs
                        .iter()
                        .zip(mean)
                        .map(|(&p, &pm)| {
                            weights.weight_entropy
                                * (binary_entropy_slope(p) - weights.gamma * binary_entropy_slope(pm))
                                / bf
                        })
                        .collect(),
                ),
                _ => None,
            };

            let g_v: Vec<f64> = match self.quantizer {
                QuantizerKind::Bsq => {
                    // Reconstruction path through the sign surrogate.
                    let mut g_v = bsq_ste_backward(&trace.v, &g_q)?;
                    // Entropy and commit act on u and share the
                    // normalization Jacobian.
                    let u = trace.unit.as_ref().expect("bsq trace carries u");
                    let mut g_u = vec![0.0; u.len()];
                    if let Some(dp) = &d_probs {
                        let probs = trace.probs.as_ref().unwrap();
                        for ((gu, (&p, &dpd)), _ud) in
                            g_u.iter_mut().zip(probs.iter().zip(dp)).zip(u)
                        {
                            *gu += dpd * 2.0 * self.tau * s * p * (1.0 - p);
                        }
                    }
                    if weights.weight_commit > 0.0 {
                        for ((gu, &ud), &qd) in g_u.iter_mut().zip(u).zip(&trace.quantized) {
                            *gu += weights.weight_commit * 2.0 * (ud - qd) / bf;
                        }
                    }
                    if g_u.iter().any(|&x| x != 0.0) {
                        let extra = normalize_backward(&trace.v, &g_u)?;
                        for (gv, e) in g_v.iter_mut().zip(extra) {
                            *gv += e;
                        }
                    }
                    g_v
                }
                QuantizerKind::Lfq => {
                    let mut g_v = g_q.clone();
                    if let Some(dp) = &d_probs {
                        let probs = trace.probs.as_ref().unwrap();
                        for ((gv, &p), &dpd) in g_v.iter_mut().zip(probs).zip(dp) {
                            *gv += dpd * 2.0 * self.tau * p * (1.0 - p);
                        }
                    }
                    if weights.weight_commit > 0.0 {
                        for ((gv, &vd), &qd) in g_v.iter_mut().zip(&trace.v).zip(&trace.quantized)
                        {
                            *gv += weights.weight_commit * 2.0 * (vd - qd) / bf;
                        }
                    }
                    g_v
                }
                QuantizerKind::Vq => {
                    let mut g_v = g_q.clone();
                    if weights.weight_commit > 0.0 {
                        for ((gv, &vd), &qd) in g_v.iter_mut().zip(&trace.v).zip(&trace.quantized)
                        {
                            *gv += weights.weight_commit * 2.0 * (vd - qd) / bf;
                        }
                    }
                    g_v
                }
                QuantizerKind::None => g_q.clone(),
            };

            let enc_last = trace.enc_outs.last().expect("encoder has layers");
            let dg = dense_backward(&self.proj_down, enc_last, &trace.v, &g_v)?;
            grads[idx_down].add(&dg);
            let mut g = dg.input;
            for (i, layer) in self.encoder.iter().enumerate().rev() {
                let input = if i == 0 { &trace.input } else { &trace.enc_outs[i - 1] };
                let dg = dense_backward(layer, input, &trace.enc_outs[i], &g)?;
                grads[i].add(&dg);
                g = dg.input;
            }
        }
        Ok((terms, grads))
    }

    /// One SGD update with a constant learning rate.
    pub fn apply_sgd(&mut self, grads: &[LayerGrad], learning_rate: f64) {
        let mut layers = self.layers_mut();
        assert_eq!(layers.len(), grads.len(), "gradient list does not match layer stack");
        for (layer, grad) in layers.iter_mut().zip(grads) {
            for (w, g) in layer.weights.iter_mut().zip(&grad.weights) {
                *w -= learning_rate * g;
            }
            for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
                *b -= learning_rate * g;
            }
        }
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

/// d H_b(p) / dp in bits: log2((1-p)/p).
fn binary_entropy_slope(p: f64) -> f64 {
    ((1.0 - p).ln() - p.ln()) / std::f64::consts::LN_2
}

/// Loss weights split out of [`TrainConfig`] so gradient code cannot depend
/// on optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub weight_entropy: f64,
    pub weight_commit: f64,
    pub gamma: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        LossWeights {
            weight_entropy: c.weight_entropy,
            weight_commit: c.weight_commit,
            gamma: c.gamma,
        }
    }
}

/// Accumulated parameter gradients for one layer, same shapes as the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros_for(layer: &DenseLayer) -> Self {
        LayerGrad { weights: vec![0.0; layer.weights.len()], bias: vec![0.0; layer.bias.len()] }
    }

    fn add(&mut self, g: &DenseGrads) {
        for (a, b) in self.weights.iter_mut().zip(&g.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&g.bias) {
            *a += b;
        }
    }
}

/// Every intermediate of one sample's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub input: Vec<f64>,
    pub enc_outs: Vec<Vec<f64>>,
    /// Pre-quantization latent (output of the down projection).
    pub v: Vec<f64>,
    /// Unit-sphere projection of `v`; BSQ only.
    pub unit: Option<Vec<f64>>,
    /// Bottleneck output fed to the up projection.
    pub quantized: Vec<f64>,
    /// What the commit term compares against `quantized` (u for BSQ, v
    /// otherwise).
    pub pre_commit: Vec<f64>,
    /// Per-dimension soft assignment probabilities; BSQ and LFQ only.
    pub probs: Option<Vec<f64>>,
    pub token: Option<TokenCode>,
    pub up_out: Vec<f64>,
    pub dec_outs: Vec<Vec<f64>>,
}

impl SampleTrace {
    pub fn recon(&self) -> &[f64] {
        self.dec_outs.last().expect("decoder has layers")
    }
}

/// Forward results for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBatch {
    pub traces: Vec<SampleTrace>,
    patch_dims: usize,
}

impl ForwardBatch {
    /// Mean squared error per element across the batch.
    pub fn mean_mse(&self) -> f64 {
        let total: f64 = self
            .traces
            .iter()
            .map(|t| {
                t.recon().iter().zip(&t.input).map(|(r, x)| (r - x) * (r - x)).sum::<f64>()
            })
            .sum();
        total / (self.traces.len() * self.patch_dims) as f64
    }

    /// Token codes for the whole batch, if the bottleneck emits tokens.
    pub fn token_codes(&self) -> Option<Vec<u64>> {
        self.traces.iter().map(|t| t.token.map(|tok| tok.code)).collect()
    }
}

/// Fraction of the usable codebook observed: distinct codes over
/// `min(2^bits, token count)`.
pub fn code_usage(tokens: &[u64], bits: usize) -> f64 {
    assert!(!tokens.is_empty(), "code usage needs at least one token");
    assert!(bits >= 1 && bits <= MAX_BITS, "bits outside 1..={MAX_BITS}");
    let distinct = tokens.iter().collect::<HashSet<_>>().len() as u64;
    let capacity = if bits >= 63 { u64::MAX } else { 1u64 << bits };
    distinct as f64 / capacity.min(tokens.len() as u64) as f64
}

/// Trains a fresh model. Returns the trained model together with its report;
/// the report alone is enough for regression comparisons.
///
/// Steps draw `batch_size` samples with replacement, except that a batch
/// size covering the whole dataset switches to full-batch descent (every
/// sample once, in order) — the deterministic limit of minibatch training.
pub fn train(
    config: &TrainConfig,
    dataset: &[Vec<f64>],
) -> Result<(ToyModel, TrainReport), TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for sample in dataset {
        if sample.len() != PATCH * PATCH {
            return Err(TrainError::Shape(GradError::ShapeMismatch {
                expected: PATCH * PATCH,
                got: sample.len(),
            }));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ToyModel::init(config, &mut rng)?;
    let weights = LossWeights::from(config);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<&[f64]> = if config.batch_size >= dataset.len() {
            dataset.iter().map(|v| v.as_slice()).collect()
        } else {
            (0..config.batch_size)
                .map(|_| dataset[rng.gen_range(0..dataset.len())].as_slice())
                .collect()
        };
        let fwd = model.forward_batch(&batch, ForwardMode::Hard)?;
        let (terms, grads) = model.batch_gradients(&fwd, &weights)?;
        if !terms.total.is_finite() {
            return Err(TrainError::Diverged { step, loss: terms.total });
        }
        model.apply_sgd(&grads, config.learning_rate);
        curve.push(terms);
    }
    let all: Vec<&[f64]> = dataset.iter().map(|v| v.as_slice()).collect();
    let fwd = model.forward_batch(&all, ForwardMode::Hard)?;
    let final_mse = fwd.mean_mse();
    let usage = fwd.token_codes().map(|codes| code_usage(&codes, config.bits));
    Ok((model, TrainReport { loss_curve: curve, final_mse, code_usage: usage }))
}

// ---------------------------------------------------------------------------
// Synthetic datasets
// ---------------------------------------------------------------------------

/// Rank budget of the low-rank dataset: a constant basis vector plus three
/// orthonormalized Gaussian directions.
pub const LOW_RANK_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    LowRank,
    Gabor,
    Checker,
}

impl FromStr for DatasetKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "low-rank" => Ok(DatasetKind::LowRank),
            "gabor" => Ok(DatasetKind::Gabor),
            "checker" => Ok(DatasetKind::Checker),
            other => Err(TrainError::UnknownKind { kind: other.to_string() }),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::LowRank => "low-rank",
            DatasetKind::Gabor => "gabor",
            DatasetKind::Checker => "checker",
        })
    }
}

/// Deterministic synthetic 8x8 patches in [0, 1].
pub fn make_synthetic_dataset(kind: DatasetKind, n: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(n >= 1, "need at least one patch");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = PATCH * PATCH;
    match kind {
        DatasetKind::Checker => (0..n)
            .map(|_| {
                let phase = rng.gen_range(0..2usize);
                (0..dims)
                    .map(|i| {
                        let (r, c) = (i / PATCH, i % PATCH);
                        if (r + c + phase) % 2 == 0 {
                            0.2
                        } else {
                            0.8
                        }
                    })
                    .collect()
            })
            .collect(),
        DatasetKind::Gabor => (0..n)
            .map(|_| {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let freq: f64 = rng.gen_range(0.5..2.0);
                let phase: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                let sigma = 2.5f64;
                (0..dims)
                    .map(|i| {
                        let (r, c) = ((i / PATCH) as f64 - 3.5, (i % PATCH) as f64 - 3.5);
                        let envelope = (-(r * r + c * c) / (2.0 * sigma * sigma)).exp();
                        let carrier = (2.0 * std::f64::consts::PI * freq
                            * (c * theta.cos() + r * theta.sin())
                            / PATCH as f64
                            + phase)
                            .cos();
                        0.5 + 0.5 * envelope * carrier
                    })
                    .collect()
            })
            .collect(),
        DatasetKind::LowRank => {
            // Orthonormal basis: the constant direction plus Gram-Schmidt
            // Gaussian directions.
            let mut basis: Vec<Vec<f64>> = vec![vec![1.0 / PATCH as f64; dims]];
            while basis.len() < LOW_RANK_RANK {
                let mut g: Vec<f64> =
                    (0..dims).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                for b in &basis {
                    let dot: f64 = g.iter().zip(b).map(|(a, c)| a * c).sum();
                    for (gi, bi) in g.iter_mut().zip(b) {
                        *gi -= dot * bi;
                    }
                }
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    g.iter_mut().for_each(|x| *x /= norm);
                    basis.push(g);
                }
            }
            let coeffs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..LOW_RANK_RANK).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let deviations: Vec<Vec<f64>> = coeffs
                .iter()
                .map(|c| {
                    let mut dev = vec![0.0; dims];
                    for (ci, b) in c.iter().zip(&basis) {
                        for (d, bi) in dev.iter_mut().zip(b) {
                            *d += ci * bi;
                        }
                    }
                    dev
                })
                .collect();
            let peak = deviations
                .iter()
                .flat_map(|d| d.iter())
                .fold(0.0f64, |m, &x| m.max(x.abs()));
            let scale = if peak > 0.0 { 0.45 / peak } else { 0.0 };
            deviations
                .into_iter()
                .map(|dev| dev.into_iter().map(|x| 0.5 + scale * x).collect())
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BSQM";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic {found:02x?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checkpoint truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("bad header field: {reason}")]
    BadField { reason: String },
    #[error("missing tensor {name:?}")]
    MissingTensor { name: String },
    #[error("tensor {name:?}: {reason}")]
    BadTensor { name: String, reason: String },
    #[error("{extra} trailing bytes after the last tensor")]
    TrailingData { extra: usize },
}

/// Checkpoint layout (little-endian), magic `BSQM`, version 1:
///
/// | offset | size | field |
/// |-------:|-----:|-------|
/// | 0      | 4    | magic `BSQM` |
/// | 4      | 2    | version (u16) |
/// | 6      | 1    | quantizer kind: 0 bsq, 1 lfq, 2 vq, 3 none |
/// | 7      | 1    | patch side p (u8) |
/// | 8      | 2    | latent dim d (u16) |
/// | 10     | 1    | bits per token L (u8) |
/// | 11     | 8    | tau (f64) |
/// | 19     | 4    | tensor count (u32) |
/// | 23     | ...  | tensors |
///
/// Each tensor: name length (u8), UTF-8 name, rank (u8), dims (u32 each),
/// row-major f64 data. Expected tensors: `encoder.0.weight/.bias`,
/// `proj_down.*`, `proj_up.*`, `decoder.0.*`, `decoder.1.*`, and
/// `vq.codebook` for VQ models. Weight matrices are `out x in` row-major,
/// matching [`DenseLayer`].
impl ToyModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(match self.quantizer {
            QuantizerKind::Bsq => 0,
            QuantizerKind::Lfq => 1,
            QuantizerKind::Vq => 2,
            QuantizerKind::None => 3,
        });
        out.push(PATCH as u8);
        out.extend_from_slice(&(self.latent_dim as u16).to_le_bytes());
        out.push(self.bits as u8);
        out.extend_from_slice(&self.tau.to_le_bytes());
        let mut tensors: Vec<(String, Vec<u32>, &[f64])> = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            tensors.push((
                format!("encoder.{i}.weight"),
                vec![layer.out_dim as u32, layer.in_dim as u32],
                &layer.weights,
            ));
            tensors.push((format!("encoder.{i}.bias"), vec![layer.out_dim as u32], &layer.bias));
        }
        for (name, layer) in [("proj_down", &self.proj_down), ("proj_up", &self.proj_up)] {
            tensors.push((
                format!("{name}.weight"),
                vec![layer.out_dim as u32, layer.in_dim as u32],
                &layer.weights,
            ));
            tensors.push((format!("{name}.bias"), vec![layer.out_dim as u32], &layer.bias));
        }
        for (i, layer) in self.decoder.iter().enumerate() {
            tensors.push((
                format!("decoder.{i}.weight"),
                vec![layer.out_dim as u32, layer.in_dim as u32],
                &layer.weights,
            ));
            tensors.push((format!("decoder.{i}.bias"), vec![layer.out_dim as u32], &layer.bias));
        }
        let codebook_flat: Vec<f64>;
        if let Some(cb) = &self.codebook {
            codebook_flat = (0..cb.len()).flat_map(|k| cb.row(k).to_vec()).collect();
            tensors.push((
                "vq.codebook".to_string(),
                vec![cb.len() as u32, cb.dim() as u32],
                &codebook_flat,
            ));
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, dims, data) in tensors {
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            out.push(dims.len() as u8);
            for d in &dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ToyModel, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic { found: magic });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let quantizer = match r.take(1)?[0] {
            0 => QuantizerKind::Bsq,
            1 => QuantizerKind::Lfq,
            2 => QuantizerKind::Vq,
            3 => QuantizerKind::None,
            k => return Err(CheckpointError::BadField { reason: format!("quantizer kind {k}") }),
        };
        let patch = r.take(1)?[0] as usize;
        if patch != PATCH {
            return Err(CheckpointError::BadField {
                reason: format!("patch {patch} (this build supports {PATCH})"),
            });
        }
        let latent_dim = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let bits = r.take(1)?[0] as usize;
        let tau = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        if bits < 1 || bits > MAX_BITS || latent_dim < bits {
            return Err(CheckpointError::BadField {
                reason: format!("latent_dim {latent_dim} / bits {bits}"),
            });
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(CheckpointError::BadField { reason: format!("tau {tau}") });
        }
        let n_tensors = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for _ in 0..n_tensors {
            let name_len = r.take(1)?[0] as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| {
                CheckpointError::BadField { reason: "tensor name is not UTF-8".into() }
            })?;
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
            }
            let count: usize = dims.iter().product();
            if count > 1 << 28 {
                return Err(CheckpointError::BadTensor {
                    name,
                    reason: format!("implausible element count {count}"),
                });
            }
            let raw = r.take(count * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
                return Err(CheckpointError::BadTensor {
                    name,
                    reason: format!("non-finite value {bad}"),
                });
            }
            tensors.push((name, dims, data));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingData { extra: bytes.len() - r.pos });
        }

        let mut fetch = |name: &str, dims: &[usize]| -> Result<Vec<f64>, CheckpointError> {
            let idx = tensors
                .iter()
                .position(|(n, _, _)| n == name)
                .ok_or_else(|| CheckpointError::MissingTensor { name: name.to_string() })?;
            let (_, got_dims, data) = tensors.swap_remove(idx);
            if got_dims != dims {
                return Err(CheckpointError::BadTensor {
                    name: name.to_string(),
                    reason: format!("dims {got_dims:?}, expected {dims:?}"),
                });
            }
            Ok(data)
        };

        let input = PATCH * PATCH;
        let layer = |weights: Vec<f64>,
                     bias: Vec<f64>,
                     in_dim: usize,
                     out_dim: usize,
                     act: Activation| {
            DenseLayer::new(in_dim, out_dim, weights, bias, act).expect("dims were checked")
        };
        let encoder = vec![layer(
            fetch("encoder.0.weight", &[latent_dim, input])?,
            fetch("encoder.0.bias", &[latent_dim])?,
            input,
            latent_dim,
            Activation::Tanh,
        )];
        let proj_down = layer(
            fetch("proj_down.weight", &[bits, latent_dim])?,
            fetch("proj_down.bias", &[bits])?,
            latent_dim,
            bits,
            Activation::Identity,
        );
        let proj_up = layer(
            fetch("proj_up.weight", &[latent_dim, bits])?,
            fetch("proj_up.bias", &[latent_dim])?,
            bits,
            latent_dim,
            Activation::Identity,
        );
        let decoder = vec![
            layer(
                fetch("decoder.0.weight", &[latent_dim, latent_dim])?,
                fetch("decoder.0.bias", &[latent_dim])?,
                latent_dim,
                latent_dim,
                Activation::Tanh,
            ),
            layer(
                fetch("decoder.1.weight", &[input, latent_dim])?,
                fetch("decoder.1.bias", &[input])?,
                latent_dim,
                input,
                Activation::Identity,
            ),
        ];
        let codebook = if quantizer == QuantizerKind::Vq {
            if bits > MAX_VQ_BITS {
                return Err(CheckpointError::BadField {
                    reason: format!("vq bits {bits} outside 1..={MAX_VQ_BITS}"),
                });
            }
            let k = 1usize << bits;
            let flat = fetch("vq.codebook", &[k, bits])?;
            let rows: Vec<Vec<f64>> = flat.chunks_exact(bits).map(|c| c.to_vec()).collect();
            Some(VqCodebook::new(rows).map_err(|e| CheckpointError::BadTensor {
                name: "vq.codebook".into(),
                reason: e.to_string(),
            })?)
        } else {
            None
        };
        Ok(ToyModel {
            quantizer,
            latent_dim,
            bits,
            tau,
            encoder,
            proj_down,
            proj_up,
            decoder,
            codebook,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated {
            need: usize::MAX,
            have: self.bytes.len(),
        })?;
        let slice = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated {
            need: end,
            have: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_diff_grad, grad_check, FD_STEP};

    fn tiny_config(kind: QuantizerKind) -> TrainConfig {
        TrainConfig {
            quantizer: kind,
            latent_dim: 8,
            bits: 4,
            tau: 1.1,
            gamma: 0.8,
            weight_entropy: 0.07,
            weight_commit: 0.0,
            learning_rate: 0.1,
            batch_size: 4,
            steps: 10,
            seed: 3,
        }
    }

    fn small_batch(n: usize, seed: u64) -> Vec<Vec<f64>> {
        make_synthetic_dataset(DatasetKind::Gabor, n, seed)
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut c = TrainConfig::reference();
        c.latent_dim = 4;
        assert!(matches!(c.validate(), Err(TrainError::BadConfig { .. })));
        let mut c = TrainConfig::reference();
        c.steps = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::reference();
        c.weight_entropy = -0.1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::reference();
        c.quantizer = QuantizerKind::Vq;
        c.bits = 20;
        c.latent_dim = 32;
        assert!(c.validate().is_err());
        assert!(TrainConfig::reference().validate().is_ok());
    }

    #[test]
    fn bsq_bottleneck_output_has_unit_norm() {
        let config = tiny_config(QuantizerKind::Bsq);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = ToyModel::init(&config, &mut rng).unwrap();
        let data = small_batch(5, 2);
        let batch: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
        let fwd = model.forward_batch(&batch, ForwardMode::Hard).unwrap();
        for t in &fwd.traces {
            let norm = t.quantized.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-12, "corner norm {norm}");
        }
    }

    #[test]
    fn pass_through_bottleneck_runs_and_has_no_tokens() {
        let config = tiny_config(QuantizerKind::None);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = ToyModel::init(&config, &mut rng).unwrap();
        let data = small_batch(3, 5);
        let batch: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
        let fwd = model.forward_batch(&batch, ForwardMode::Hard).unwrap();
        assert!(fwd.token_codes().is_none());
        for t in &fwd.traces {
            assert_eq!(t.quantized, t.v);
            assert!(t.recon().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn stored_tokens_reproduce_the_forward_reconstruction() {
        for kind in [QuantizerKind::Bsq, QuantizerKind::Lfq, QuantizerKind::Vq] {
            let config = tiny_config(kind);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let model = ToyModel::init(&config, &mut rng).unwrap();
            let data = small_batch(6, 7);
            let batch: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
            let fwd = model.forward_batch(&batch, ForwardMode::Hard).unwrap();
            for (t, patch) in fwd.traces.iter().zip(&data) {
                let token = t.token.unwrap();
                assert_eq!(token, model.tokenize_patch(patch).unwrap());
                let recon = model.decode_patch(token).unwrap();
                assert_eq!(recon, t.recon().to_vec(), "{kind:?} decode path diverged");
            }
        }
    }

    #[test]
    fn commit_term_is_zero_when_quantized_equals_input() {
        let config = tiny_config(QuantizerKind::Bsq);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = ToyModel::init(&config, &mut rng).unwrap();
        let data = small_batch(2, 3);
        let batch: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
        let mut fwd = model.forward_batch(&batch, ForwardMode::Hard).unwrap();
        for t in &mut fwd.traces {
            t.quantized = t.pre_commit.clone();
        }
        let weights =
            LossWeights { weight_entropy: 0.0, weight_commit: 1.0, gamma: 1.0 };
        let (terms, _) = model.batch_gradients(&fwd, &weights).unwrap();
        assert_eq!(terms.commit, 0.0);
        // With all weights zero the total collapses to the MSE.
        let weights = LossWeights { weight_entropy: 0.0, weight_commit: 0.0, gamma: 1.0 };
        let (terms, _) = model.batch_gradients(&fwd, &weights).unwrap();
        assert_eq!(terms.total, terms.mse);
    }

    fn flatten_params(model: &ToyModel) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in model.layers() {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    fn unflatten_params(model: &mut ToyModel, flat: &[f64]) {
        let mut pos = 0;
        for layer in model.layers_mut() {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        assert_eq!(pos, flat.len());
    }

    fn flatten_grads(grads: &[LayerGrad]) -> Vec<f64> {
        let mut out = Vec::new();
        for g in grads {
            out.extend_from_slice(&g.weights);
            out.extend_from_slice(&g.bias);
        }
        out
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences_end_to_end() {
        // Surrogate forward mode makes the whole loss differentiable, and the
        // analytic backward is exactly its chain rule.
        for kind in [QuantizerKind::Bsq, QuantizerKind::Lfq, QuantizerKind::None] {
            let config = tiny_config(kind);
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let model = ToyModel::init(&config, &mut rng).unwrap();
            let data = small_batch(3, 13);
            let batch: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
            let weights = LossWeights::from(&config);

            let fwd = model.forward_batch(&batch, ForwardMode::Surrogate).unwrap();
            let (_, grads) = model.batch_gradients(&fwd, &weights).unwrap();
            let analytic = flatten_grads(&grads);

            let base = flatten_params(&model);
            let mut probe = model.clone();
            let loss = |params: &[f64]| -> f64 {
                unflatten_params(&mut probe, params);
                let fwd = probe.forward_batch(&batch, ForwardMode::Surrogate).unwrap();
                let (terms, _) = probe.batch_gradients(&fwd, &weights).unwrap();
                terms.total
            };
            let numeric = finite_diff_grad(loss, &base, FD_STEP).unwrap();
            let report = grad_check(&analytic, &numeric, 1e-4);
            assert!(report.passed, "{kind:?}: {report:?}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_the_full_batch_loss_constant() {
        let data = small_batch(16, 4);
        let mut config = tiny_config(QuantizerKind::Bsq);
        config.learning_rate = 0.0;
        config.batch_size = data.len();
        config.steps = 5;
        let (_, report) = train(&config, &data).unwrap();
        // Full-batch steps see the identical batch, and lr=0 never moves the
        // parameters, so every step reports the identical loss.
        assert_eq!(report.loss_curve.len(), 5);
        let first = report.loss_curve[0];
        for terms in &report.loss_curve {
            assert_eq!(*terms, first);
        }
    }

    #[test]
    fn training_is_deterministic_given_the_config() {
        let data = small_batch(32, 8);
        let mut config = tiny_config(QuantizerKind::Bsq);
        config.steps = 40;
        let (model_a, report_a) = train(&config, &data).unwrap();
        let (model_b, report_b) = train(&config, &data).unwrap();
        assert_eq!(report_a, report_b);
        assert_eq!(model_a, model_b);
    }

    #[test]
    fn short_training_run_reduces_the_loss() {
        let data = make_synthetic_dataset(DatasetKind::LowRank, 128, 5);
        let mut config = tiny_config(QuantizerKind::Bsq);
        config.steps = 300;
        config.batch_size = 16;
        let (_, report) = train(&config, &data).unwrap();
        let head: f64 =
            report.loss_curve[..50].iter().map(|t| t.total).sum::<f64>() / 50.0;
        let tail: f64 =
            report.loss_curve[250..].iter().map(|t| t.total).sum::<f64>() / 50.0;
        assert!(tail < head, "loss did not decrease: head {head}, tail {tail}");
    }

    #[test]
    fn empty_dataset_and_bad_patch_sizes_are_rejected() {
        let config = tiny_config(QuantizerKind::Bsq);
        assert_eq!(train(&config, &[]), Err(TrainError::EmptyDataset));
        let bad = vec![vec![0.5; 10]];
        assert!(matches!(train(&config, &bad), Err(TrainError::Shape(_))));
    }

    #[test]
    fn code_usage_matches_its_definition() {
        assert_eq!(code_usage(&[5, 5, 5, 5], 3), 1.0 / 4.0);
        let all: Vec<u64> = (0..8).collect();
        assert_eq!(code_usage(&all, 3), 1.0);
        assert_eq!(code_usage(&[0, 1, 2, 3, 0], 2), 1.0);
        assert_eq!(code_usage(&[1], 8), 1.0);
    }

    #[test]
    fn datasets_are_deterministic_per_seed() {
        for kind in [DatasetKind::LowRank, DatasetKind::Gabor, DatasetKind::Checker] {
            let a = make_synthetic_dataset(kind, 20, 123);
            let b = make_synthetic_dataset(kind, 20, 123);
            assert_eq!(a, b);
            let c = make_synthetic_dataset(kind, 20, 124);
            assert_ne!(a, c, "{kind:?} ignored its seed");
        }
    }

    #[test]
    fn datasets_stay_inside_the_unit_interval() {
        for kind in [DatasetKind::LowRank, DatasetKind::Gabor, DatasetKind::Checker] {
            for patch in make_synthetic_dataset(kind, 50, 77) {
                assert_eq!(patch.len(), PATCH * PATCH);
                for &x in &patch {
                    assert!((0.0..=1.0).contains(&x), "{kind:?} value {x}");
                }
            }
        }
    }

    #[test]
    fn checker_patches_use_exactly_two_values() {
        let data = make_synthetic_dataset(DatasetKind::Checker, 30, 9);
        let mut values: Vec<u64> =
            data.iter().flatten().map(|&x| x.to_bits()).collect();
        values.sort_unstable();
        values.dedup();
        assert_eq!(values.len(), 2);
    }

    /// Rank via Gaussian elimination with partial pivoting.
    fn matrix_rank(mut rows: Vec<Vec<f64>>, tol: f64) -> usize {
        let n_cols = rows[0].len();
        let mut rank = 0;
        for col in 0..n_cols {
            let Some(pivot) = (rank..rows.len())
                .max_by(|&a, &b| rows[a][col].abs().partial_cmp(&rows[b][col].abs()).unwrap())
            else {
                break;
            };
            if rows[pivot][col].abs() <= tol {
                continue;
            }
            rows.swap(rank, pivot);
            let (head, tail) = rows.split_at_mut(rank + 1);
            let lead = &head[rank];
            for row in tail {
                let f = row[col] / lead[col];
                for c in col..n_cols {
                    row[c] -= f * lead[c];
                }
            }
            rank += 1;
            if rank == rows.len() {
                break;
            }
        }
        rank
    }

    #[test]
    fn low_rank_patches_span_at_most_the_rank_budget() {
        let data = make_synthetic_dataset(DatasetKind::LowRank, 24, 31);
        assert_eq!(matrix_rank(data, 1e-9), LOW_RANK_RANK);
    }

    #[test]
    fn rank_oracle_sanity() {
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0],
        ];
        assert_eq!(matrix_rank(rows, 1e-12), 2);
    }

    #[test]
    fn checkpoints_round_trip_bit_for_bit() {
        for kind in
            [QuantizerKind::Bsq, QuantizerKind::Lfq, QuantizerKind::Vq, QuantizerKind::None]
        {
            let config = tiny_config(kind);
            let mut rng = ChaCha8Rng::seed_from_u64(51);
            let model = ToyModel::init(&config, &mut rng).unwrap();
            let bytes = model.to_bytes();
            let back = ToyModel::from_bytes(&bytes).unwrap();
            assert_eq!(back, model, "{kind:?} checkpoint drifted");
        }
    }

    #[test]
    fn checkpoint_header_layout_is_stable() {
        let config = tiny_config(QuantizerKind::Lfq);
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let model = ToyModel::init(&config, &mut rng).unwrap();
        let bytes = model.to_bytes();
        assert_eq!(&bytes[0..4], b"BSQM");
        assert_eq!(u16::from_le_bytes(bytes[4..6].try_into().unwrap()), 1);
        assert_eq!(bytes[6], 1, "lfq kind byte");
        assert_eq!(bytes[7], 8, "patch");
        assert_eq!(u16::from_le_bytes(bytes[8..10].try_into().unwrap()), 8, "latent dim");
        assert_eq!(bytes[10], 4, "bits");
        assert_eq!(f64::from_le_bytes(bytes[11..19].try_into().unwrap()), 1.1, "tau");
        assert_eq!(u32::from_le_bytes(bytes[19..23].try_into().unwrap()), 10, "tensor count");
    }

    #[test]
    fn checkpoint_parser_rejects_damage() {
        let config = tiny_config(QuantizerKind::Bsq);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let model = ToyModel::init(&config, &mut rng).unwrap();
        let good = model.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'Z';
        assert!(matches!(ToyModel::from_bytes(&bad), Err(CheckpointError::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 99;
        assert!(matches!(
            ToyModel::from_bytes(&bad),
            Err(CheckpointError::VersionMismatch { found: 99, .. })
        ));

        assert!(matches!(
            ToyModel::from_bytes(&good[..40]),
            Err(CheckpointError::Truncated { .. })
        ));

        let mut bad = good.clone();
        bad.extend_from_slice(&[0, 0, 0]);
        assert!(matches!(
            ToyModel::from_bytes(&bad),
            Err(CheckpointError::TrailingData { extra: 3 })
        ));

        // The first tensor's dims sit at fixed offsets: header 23 bytes,
        // name_len 1 + name "encoder.0.weight" 16 + rank 1 = dims at 41.
        // Swapping out_dim and in_dim keeps the element count but breaks the
        // expected shape.
        let mut bad = good.clone();
        bad.swap(41, 45);
        assert!(matches!(ToyModel::from_bytes(&bad), Err(CheckpointError::BadTensor { .. })));

        // Inflating a dim demands more payload than the file holds.
        let mut bad = good;
        bad[41] = 0xff;
        assert!(matches!(ToyModel::from_bytes(&bad), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn tokenize_rejects_the_pass_through_model() {
        let config = tiny_config(QuantizerKind::None);
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let model = ToyModel::init(&config, &mut rng).unwrap();
        let patch = vec![0.5; PATCH * PATCH];
        assert!(matches!(model.tokenize_patch(&patch), Err(TrainError::BadConfig { .. })));
        let token = TokenCode::new(0, 4).unwrap();
        assert!(model.decode_patch(token).is_err());
    }
}
