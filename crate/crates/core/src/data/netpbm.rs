//! Binary PGM (`P5`) and PPM (`P6`) images with maxval 255.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum NetpbmError {
    #[error("netpbm i/o failed")]
    Io(#[from] std::io::Error),
    #[error("unsupported netpbm format `{0}`")]
    UnsupportedFormat(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0}, only 255 is handled")]
    UnsupportedMaxval(u32),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("cannot encode tensor of shape {0} as netpbm")]
    BadShape(crate::tensor::Shape),
}

pub type Result<T> = std::result::Result<T, NetpbmError>;

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| NetpbmError::MalformedHeader(format!("missing or invalid {what}")))
    }
}

/// Parses an in-memory netpbm file into a `(1, C, H, W)` tensor in `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let magic = bytes.get(..2).ok_or_else(|| NetpbmError::MalformedHeader("file too short".into()))?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => return Err(NetpbmError::UnsupportedFormat(String::from_utf8_lossy(other).into_owned())),
    };
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")? as usize;
    let height = hdr.number("height")? as usize;
    let maxval = hdr.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(NetpbmError::MalformedHeader("zero image dimension".into()));
    }
    if maxval != 255 {
        return Err(NetpbmError::UnsupportedMaxval(maxval));
    }
    if !bytes.get(hdr.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(NetpbmError::MalformedHeader("no whitespace after maxval".into()));
    }
    let payload = &bytes[hdr.pos + 1..];
    let expected = width * height * channels;
    if payload.len() < expected {
        return Err(NetpbmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let mut data = vec![0.0f32; expected];
    let plane = width * height;
    for (i, px) in payload[..expected].chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + i] = v as f32 / 255.0;
        }
    }
    Tensor::new((1, channels, height, width), data).map_err(|_| NetpbmError::MalformedHeader("bad dimensions".into()))
}

/// Encodes a `(1, 1, H, W)` or `(1, 3, H, W)` tensor. Values are clamped to
/// `[0, 1]` and rounded to the nearest multiple of 1/255.
pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    let magic = match (s.n, s.c) {
        (1, 1) => "P5",
        (1, 3) => "P6",
        _ => return Err(NetpbmError::BadShape(s)),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    let plane = s.plane();
    out.reserve(s.numel());
    for i in 0..plane {
        for c in 0..s.c {
            let v = t.data()[c * plane + i];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_netpbm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

pub fn write_netpbm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}
