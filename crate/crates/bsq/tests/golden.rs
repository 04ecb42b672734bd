//! Byte-for-byte fixtures for the three file formats. The committed files
//! under `tests/golden/` pin the exact serialized layout; any unintentional
//! change to magic, header offsets, endianness, packing, or the coder's
//! output shows up here as a byte diff.
//!
//! To regenerate after a deliberate format change: `BLESS=1 cargo test -p bsq
//! --test golden`, then commit the new files alongside a version bump.

use std::fs;
use std::path::PathBuf;

use bsq::autoencoder::{QuantizerKind, ToyModel};
use bsq::container::{compress, decompress, CompressedFile, ModelChoice, TokenFile, TokenGeometry};
use bsq::grad::{Activation, DenseLayer};

fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares `bytes` against the committed fixture, or rewrites the fixture
/// when `BLESS` is set in the environment.
fn check_or_bless(name: &str, bytes: &[u8]) {
    let path = fixture_path(name);
    if std::env::var_os("BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, bytes).unwrap();
        return;
    }
    let committed = fs::read(&path)
        .unwrap_or_else(|e| panic!("missing fixture {name} ({e}); run with BLESS=1 to create it"));
    assert_eq!(
        committed, bytes,
        "{name} drifted from the committed layout; if the change is deliberate, \
         bless new fixtures and bump the format version"
    );
}

fn golden_tokens() -> TokenFile {
    let geometry = TokenGeometry { bits: 6, patch: 8, frames: 2, grid_h: 2, grid_w: 2 };
    TokenFile::new(geometry, vec![5, 63, 0, 17, 42, 7, 63, 1]).unwrap()
}

/// Exactly representable ramp values, so the expected bytes are easy to spell
/// out by hand when inspecting a hex dump.
fn ramp(n: usize, offset: usize) -> Vec<f64> {
    (0..n).map(|i| ((i + offset) % 16) as f64 / 16.0 - 0.5).collect()
}

fn golden_model() -> ToyModel {
    let (d, bits) = (3usize, 2usize);
    let layer = |in_dim: usize, out_dim: usize, offset: usize, act: Activation| {
        DenseLayer::new(
            in_dim,
            out_dim,
            ramp(in_dim * out_dim, offset),
            ramp(out_dim, offset + 7),
            act,
        )
        .unwrap()
    };
    ToyModel {
        quantizer: QuantizerKind::Bsq,
        latent_dim: d,
        bits,
        tau: 1.25,
        encoder: vec![layer(64, d, 0, Activation::Tanh)],
        proj_down: layer(d, bits, 1, Activation::Identity),
        proj_up: layer(bits, d, 2, Activation::Identity),
        decoder: vec![layer(d, d, 3, Activation::Tanh), layer(d, 64, 4, Activation::Identity)],
        codebook: None,
    }
}

#[test]
fn token_container_bytes_are_stable() {
    let tokens = golden_tokens();
    let bytes = tokens.to_bytes();
    check_or_bless("tiny.bsqt", &bytes);
    assert_eq!(TokenFile::from_bytes(&bytes).unwrap(), tokens);
}

#[test]
fn compressed_container_bytes_are_stable() {
    let tokens = golden_tokens();
    let compressed = compress(&tokens, ModelChoice::AdaptiveBit).unwrap();
    let bytes = compressed.to_bytes();
    check_or_bless("tiny.bsqc", &bytes);
    let parsed = CompressedFile::from_bytes(&bytes).unwrap();
    assert_eq!(parsed, compressed);
    assert_eq!(decompress(&parsed).unwrap(), tokens);
}

#[test]
fn checkpoint_bytes_are_stable() {
    let model = golden_model();
    let bytes = model.to_bytes();
    check_or_bless("tiny.bsqm", &bytes);
    assert_eq!(ToyModel::from_bytes(&bytes).unwrap(), model);
}
