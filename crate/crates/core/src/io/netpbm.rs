//! Binary PGM (`P5`) and PPM (`P6`) images with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit image with 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Format(format!("{channels} channels; only 1 or 3 are encodable")));
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::Format(format!("{width}x{height}x{channels} image is too large")))?;
        if data.len() != expected {
            return Err(Error::Format(format!(
                "{width}x{height}x{channels} image needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// `[C, H, W]` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, hw) = (self.channels, self.width * self.height);
        Tensor::from_fn(&[c, self.height, self.width], |i| {
            let (ch, px) = (i / hw, i % hw);
            f64::from(self.data[px * c + ch]) / 255.0
        })
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); values are clamped to
    /// `[0, 1]` and rounded to the nearest byte.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("image tensor must be [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let x = t.data();
        let data = (0..c * hw)
            .map(|i| {
                let (px, ch) = (i / c, i % c);
                (x[ch * hw + px].clamp(0.0, 1.0) * 255.0).round() as u8
            })
            .collect();
        Self::new(w, h, c, data)
    }
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    /// Skips whitespace and `#` comments, then reads one decimal token.
    fn number(&mut self, what: &str) -> Result<usize> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(fmt_err(format!("missing {what} in header")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| fmt_err(format!("{what} is out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(fmt_err("not a binary PGM/PPM file (magic must be P5 or P6)")),
    };
    let mut h = Header { bytes, pos: 2 };
    if !h.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(fmt_err("magic must be followed by whitespace"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(fmt_err(format!("maxval {maxval} unsupported; only 255 is accepted")));
    }
    if width == 0 || height == 0 {
        return Err(fmt_err(format!("empty {width}x{height} image")));
    }
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fmt_err("header must end with a single whitespace byte"));
    }
    let start = h.pos + 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| fmt_err(format!("{width}x{height} image is too large")))?;
    let body = &bytes[start..];
    if body.len() != need {
        return Err(fmt_err(format!(
            "{width}x{height} raster needs {need} bytes, file has {}",
            body.len()
        )));
    }
    Image::new(width, height, channels, body.to_vec())
}

/// Canonical encoding: `P5|P6`, `\n`, `W H`, `\n`, `255`, `\n`, raster.
pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_file(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_file(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}
