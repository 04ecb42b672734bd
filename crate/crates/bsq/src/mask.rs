//! Blockwise causal attention masks for frame-structured token sequences.
//!
//! A sequence of `T` frames with `tokens_per_frame` tokens each gets an
//! `N x N` boolean mask (`N = T * tokens_per_frame`) in which token `i` may
//! attend to token `j` exactly when `j`'s frame is the same as or earlier
//! than `i`'s. Within a frame attention is unrestricted, so a single frame
//! degenerates to the all-true matrix, and one token per frame degenerates to
//! the ordinary lower-triangular causal mask.
//!
//! The mask is materialized as an explicit matrix so it can be compared
//! bit-for-bit and dumped as a bitmap; [`BlockMask::allows`] answers the same
//! question in O(1) from the indices alone.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("frame prefix {t} out of range 1..={max}")]
    OutOfRange { t: usize, max: usize },
}

/// Blockwise lower-triangular attention mask over `T * tokens_per_frame`
/// tokens. `allow` is row-major: `allow[i * n + j]` says whether query token
/// `i` may attend to key token `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    allow: Vec<bool>,
    frames: usize,
    tokens_per_frame: usize,
}

impl BlockMask {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    /// Total token count `N = T * tokens_per_frame`; the mask is N x N.
    pub fn len(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The materialized row-major matrix.
    pub fn matrix(&self) -> &[bool] {
        &self.allow
    }

    /// Predicate form: answers from the indices without touching the matrix.
    pub fn allows(&self, i: usize, j: usize) -> bool {
        let n = self.len();
        assert!(i < n && j < n, "token index out of range");
        j / self.tokens_per_frame <= i / self.tokens_per_frame
    }

    /// Copies out the leading submatrix covering the first `t` frames. The
    /// result is identical to building a fresh mask for `t` frames, which is
    /// what lets one trained mask serve every shorter sequence length.
    pub fn prefix_restriction(&self, t: usize) -> Result<BlockMask, MaskError> {
        if t < 1 || t > self.frames {
            return Err(MaskError::OutOfRange { t, max: self.frames });
        }
        let n = self.len();
        let m = t * self.tokens_per_frame;
        let mut allow = Vec::with_capacity(m * m);
        for i in 0..m {
            allow.extend_from_slice(&self.allow[i * n..i * n + m]);
        }
        Ok(BlockMask { allow, frames: t, tokens_per_frame: self.tokens_per_frame })
    }

    /// Renders the mask as an ASCII portable bitmap (PBM `P1`), one matrix
    /// row per line, `1` where attention is allowed. Handy for eyeballing the
    /// block structure in any image viewer.
    pub fn to_pbm(&self) -> String {
        let n = self.len();
        let mut out = String::with_capacity(n * (2 * n + 1) + 32);
        out.push_str("P1\n");
        out.push_str(&format!("{n} {n}\n"));
        for i in 0..n {
            for j in 0..n {
                if j > 0 {
                    out.push(' ');
                }
                out.push(if self.allow[i * n + j] { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the mask for `frames` frames of `tokens_per_frame` tokens each.
pub fn blockwise_causal_mask(frames: usize, tokens_per_frame: usize) -> BlockMask {
    assert!(frames >= 1, "need at least one frame");
    assert!(tokens_per_frame >= 1, "need at least one token per frame");
    let n = frames * tokens_per_frame;
    let mut allow = vec![false; n * n];
    for i in 0..n {
        let frame_i = i / tokens_per_frame;
        for j in 0..n {
            allow[i * n + j] = j / tokens_per_frame <= frame_i;
        }
    }
    BlockMask { allow, frames, tokens_per_frame }
}
