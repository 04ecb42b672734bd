//! Binary spherical quantization (BSQ) and the machinery around it.
//!
//! BSQ maps an encoder latent to the unit sphere and snaps it to the nearest
//! corner of the scaled hypercube `{-1/sqrt(L), +1/sqrt(L)}^L`. The corner
//! index is an `L`-bit token, so the codebook is implicit and costs nothing to
//! store. This crate implements that bottleneck end to end at desk scale:
//!
//! - [`quantizer`]: sphere projection, sign quantization, token packing, and
//!   the LFQ/VQ baselines.
//! - [`entropy`]: the temperature-relaxed soft assignment, whose factorized
//!   entropy terms make entropy regularization linear in `L`, together with
//!   brute-force oracles over all `2^L` codes.
//! - [`bounds`]: closed-form and integral bounds on the quantization error,
//!   checked by seeded Monte Carlo.
//! - [`grad`]: straight-through backward passes, dense-layer backprop, and
//!   finite-difference checking.
//! - [`autoencoder`]: a small trainable autoencoder with a pluggable
//!   quantization bottleneck, plus synthetic datasets and checkpoints.
//! - [`mask`]: the blockwise causal attention mask over frame-major token
//!   sequences.
//! - [`prob`] and [`coder`]: adaptive integer-frequency probability models and
//!   a bit-exact arithmetic coder over them.
//! - [`container`]: token and compressed-stream file formats and the stats
//!   derived from them.
//! - [`netpbm`]: minimal PGM/PPM/PBM image IO used for dataset ingestion and
//!   mask export.
//!
//! Everything is deterministic: RNG is always an explicitly seeded ChaCha8
//! stream, training is single-threaded with a fixed reduction order, and the
//! coder works in exact integer arithmetic.

pub mod autoencoder;
pub mod bounds;
pub mod coder;
pub mod container;
pub mod entropy;
pub mod grad;
pub mod mask;
pub mod netpbm;
pub mod prob;
pub mod quantizer;
