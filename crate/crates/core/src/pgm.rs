//! Binary PGM (P5) reader/writer, 8- or 16-bit.
//!
//! Pixel values map to [0, 1] reals on load (`v / maxval`); 16-bit samples
//! are big-endian as the netpbm format requires. `#` comments in the header
//! are skipped.

use crate::error::{PgmError, Result};
use crate::plane::Plane;
use std::io::Write;
use std::path::Path;

const MAX_PIXELS: u64 = 1 << 28;

fn is_pgm_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

struct HeaderParser<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn skip_space_and_comments(&mut self) -> std::result::Result<(), PgmError> {
        loop {
            while self.pos < self.buf.len() && is_pgm_space(self.buf[self.pos]) {
                self.pos += 1;
            }
            if self.pos < self.buf.len() && self.buf[self.pos] == b'#' {
                while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return Ok(());
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<u64, PgmError> {
        self.skip_space_and_comments()?;
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(PgmError::MalformedHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .unwrap()
            .parse::<u64>()
            .map_err(|_| PgmError::MalformedHeader(format!("unparseable {what}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Plane> {
    if bytes.len() < 2 {
        return Err(PgmError::MalformedHeader("file shorter than magic".into()).into());
    }
    if &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..2]).into_owned();
        return Err(PgmError::UnsupportedMagic(magic).into());
    }
    let mut p = HeaderParser { buf: bytes, pos: 2 };
    let w = p.number("width")?;
    let h = p.number("height")?;
    let maxval = p.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(PgmError::MalformedHeader("zero width or height".into()).into());
    }
    if w.checked_mul(h).is_none_or(|n| n > MAX_PIXELS) {
        return Err(PgmError::DimensionOverflow(w, h).into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(PgmError::UnsupportedMaxval(maxval as u32).into());
    }
    // exactly one whitespace byte separates header and payload
    if p.pos >= bytes.len() || !is_pgm_space(bytes[p.pos]) {
        return Err(PgmError::MalformedHeader("missing separator before payload".into()).into());
    }
    p.pos += 1;

    let (h, w) = (h as usize, w as usize);
    let n = h * w;
    let wide = maxval > 255;
    let expected = if wide { 2 * n } else { n };
    let payload = &bytes[p.pos..];
    if payload.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            got: payload.len(),
        }
        .into());
    }
    let scale = 1.0f32 / maxval as f32;
    let data: Vec<f32> = if wide {
        payload[..expected]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 * scale)
            .collect()
    } else {
        payload[..expected].iter().map(|&b| b as f32 * scale).collect()
    };
    Ok(Plane::from_vec(h, w, data)?)
}

pub fn encode(plane: &Plane, bits: u8) -> Vec<u8> {
    assert!(bits == 8 || bits == 16, "only 8- or 16-bit PGM supported");
    let maxval: u32 = if bits == 8 { 255 } else { 65535 };
    let mut out = Vec::with_capacity(plane.len() * (bits as usize / 8) + 32);
    out.extend_from_slice(
        format!("P5\n{} {}\n{}\n", plane.width(), plane.height(), maxval).as_bytes(),
    );
    for &v in plane.data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f32).round() as u32;
        if bits == 8 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    out
}

pub fn load_image(path: &Path) -> Result<Plane> {
    let bytes = std::fs::read(path).map_err(PgmError::Io)?;
    decode(&bytes)
}

pub fn save_image(plane: &Plane, path: &Path, bits: u8) -> Result<()> {
    let bytes = encode(plane, bits);
    let mut f = std::fs::File::create(path).map_err(PgmError::Io)?;
    f.write_all(&bytes).map_err(PgmError::Io)?;
    Ok(())
}

/// Writes a binary mask as 8-bit PGM with values 0/255.
pub fn save_mask(mask: &Plane, path: &Path) -> Result<()> {
    if !mask.is_binary() {
        return Err(crate::error::Error::domain("mask is not binary"));
    }
    save_image(mask, path, 8)
}

/// Loads an 8-bit 0/255 mask back to binary 0/1 (any value >= 0.5 is 1).
pub fn load_mask(path: &Path) -> Result<Plane> {
    let p = load_image(path)?;
    let data = p.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    Plane::from_vec(p.height(), p.width(), data)
}
