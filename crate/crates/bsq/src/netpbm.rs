//! Minimal binary netpbm support: just enough to get grayscale pixels in and
//! out without pulling in an image codec.
//!
//! Reads binary PGM (`P5`) directly and binary PPM (`P6`) through a Rec. 601
//! luma conversion, writes binary PGM, and converts between images and the
//! flat `p*p` patch vectors the autoencoder consumes. Pixels are canonical
//! 8-bit: sources with a smaller maxval are rescaled to 0..=255 at parse
//! time, and 16-bit sources are rejected.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetpbmError {
    #[error("not a binary PGM/PPM file (magic {found:?})")]
    BadMagic { found: String },
    #[error("malformed header: {reason}")]
    BadHeader { reason: String },
    #[error("maxval {maxval} unsupported (need 1..=255)")]
    UnsupportedMaxval { maxval: u32 },
    #[error("pixel data truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("image {width}x{height} not divisible into {patch}x{patch} patches")]
    BadDimensions { width: usize, height: usize, patch: usize },
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer does not match dimensions");
        GrayImage { width, height, pixels }
    }

    /// Serializes as binary PGM with maxval 255.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Cuts the image into a grid of `patch x patch` patches, each flattened
    /// row-major and scaled to [0, 1]. Patches come out in row-major grid
    /// order. Fails unless both dimensions divide evenly.
    pub fn to_patches(&self, patch: usize) -> Result<Vec<Vec<f64>>, NetpbmError> {
        assert!(patch >= 1, "patch size must be positive");
        if self.width % patch != 0 || self.height % patch != 0 {
            return Err(NetpbmError::BadDimensions {
                width: self.width,
                height: self.height,
                patch,
            });
        }
        let (rows, cols) = (self.height / patch, self.width / patch);
        let mut patches = Vec::with_capacity(rows * cols);
        for pr in 0..rows {
            for pc in 0..cols {
                let mut flat = Vec::with_capacity(patch * patch);
                for y in 0..patch {
                    let base = (pr * patch + y) * self.width + pc * patch;
                    flat.extend(self.pixels[base..base + patch].iter().map(|&v| v as f64 / 255.0));
                }
                patches.push(flat);
            }
        }
        Ok(patches)
    }

    /// Reassembles an image from a row-major grid of flattened patches,
    /// rounding each [0, 1] value to the nearest 8-bit level and clamping
    /// anything that strayed outside.
    pub fn from_patches(patches: &[Vec<f64>], rows: usize, cols: usize, patch: usize) -> Self {
        assert_eq!(patches.len(), rows * cols, "patch count does not match grid");
        let (width, height) = (cols * patch, rows * patch);
        let mut pixels = vec![0u8; width * height];
        for (idx, flat) in patches.iter().enumerate() {
            assert_eq!(flat.len(), patch * patch, "patch {idx} has wrong length");
            let (pr, pc) = (idx / cols, idx % cols);
            for y in 0..patch {
                for x in 0..patch {
                    let v = (flat[y * patch + x] * 255.0).round().clamp(0.0, 255.0);
                    pixels[(pr * patch + y) * width + pc * patch + x] = v as u8;
                }
            }
        }
        GrayImage::new(width, height, pixels)
    }
}

/// Parses binary PGM (`P5`) or PPM (`P6`) bytes into a grayscale image.
/// Color input is collapsed with integer-rounded Rec. 601 luma
/// (0.299 R + 0.587 G + 0.114 B).
pub fn parse_gray(bytes: &[u8]) -> Result<GrayImage, NetpbmError> {
    let mut cursor = Cursor { bytes, pos: 0 };
    let magic = cursor.take(2);
    let channels = match magic {
        Some(b"P5") => 1usize,
        Some(b"P6") => 3usize,
        _ => {
            let found = magic.map(|m| String::from_utf8_lossy(m).into_owned()).unwrap_or_default();
            return Err(NetpbmError::BadMagic { found });
        }
    };
    let width = cursor.header_number("width")?;
    let height = cursor.header_number("height")?;
    let maxval = cursor.header_number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(NetpbmError::UnsupportedMaxval { maxval });
    }
    // Exactly one whitespace byte separates the header from the raster.
    match cursor.take(1) {
        Some([b' ' | b'\t' | b'\n' | b'\r']) => {}
        _ => {
            return Err(NetpbmError::BadHeader {
                reason: "missing whitespace before pixel data".into(),
            })
        }
    }
    let (width, height) = (width as usize, height as usize);
    let need = width * height * channels;
    let raster = cursor
        .take(need)
        .ok_or(NetpbmError::Truncated { need, have: bytes.len() - cursor.pos })?;
    let rescale = |v: u8| -> u8 {
        if maxval == 255 {
            v
        } else {
            ((v as u32 * 255 + maxval / 2) / maxval).min(255) as u8
        }
    };
    let pixels = if channels == 1 {
        raster.iter().map(|&v| rescale(v)).collect()
    } else {
        raster
            .chunks_exact(3)
            .map(|rgb| {
                let (r, g, b) =
                    (rescale(rgb[0]) as f64, rescale(rgb[1]) as f64, rescale(rgb[2]) as f64);
                (0.299 * r + 0.587 * g + 0.114 * b).round().clamp(0.0, 255.0) as u8
            })
            .collect()
    };
    Ok(GrayImage::new(width, height, pixels))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let slice = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(slice)
    }

    /// Reads the next decimal header field, skipping whitespace and
    /// `#`-to-end-of-line comments before it.
    fn header_number(&mut self, what: &str) -> Result<u32, NetpbmError> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b' ' | b'\t' | b'\n' | b'\r') => self.pos += 1,
                Some(b'#') => {
                    while !matches!(self.bytes.get(self.pos), None | Some(b'\n')) {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = self.pos;
        while matches!(self.bytes.get(self.pos), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(NetpbmError::BadHeader { reason: format!("missing {what}") });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("digits are ASCII");
        text.parse::<u32>()
            .map_err(|_| NetpbmError::BadHeader { reason: format!("{what} out of range") })
    }
}
