//! Binary NetPBM image I/O: P6 (8-bit RGB) for color frames and P5 (8-bit
//! grayscale) for label masks. Only `maxval = 255` is supported; floats are
//! quantized by `round(255 * v)` after clamping to `[0, 1]`, so 8-bit data
//! round-trips exactly.

use std::path::Path;

use crate::error::{Error, Result};

/// Reads ASCII header tokens, skipping whitespace and `#` comments.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderReader { bytes, pos: 0 }
    }

    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::ImageFormat("truncated header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let token = self.token()?;
        std::str::from_utf8(token)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::ImageFormat(format!("invalid header number {:?}", String::from_utf8_lossy(token)))
            })
    }

    /// Consumes the single whitespace byte that separates header from data.
    fn payload(self) -> Result<&'a [u8]> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(Error::ImageFormat("missing separator before pixel data".into()));
        }
        Ok(&self.bytes[self.pos + 1..])
    }
}

fn parse(bytes: &[u8], magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(Error::ImageFormat(format!("expected {magic} magic")));
    }
    let mut header = HeaderReader::new(&bytes[2..]);
    let width = header.number()?;
    let height = header.number()?;
    let maxval = header.number()?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("unsupported maxval {maxval} (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::ImageFormat(format!("degenerate image size {width}x{height}")));
    }
    let payload = header.payload()?;
    let expected = width * height * channels;
    if payload.len() < expected {
        return Err(Error::ImageFormat(format!(
            "pixel data truncated: {} of {expected} bytes",
            payload.len()
        )));
    }
    Ok((width, height, payload[..expected].to_vec()))
}

fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Encodes a row-major `[0,1]` RGB image as binary P6.
pub fn encode_ppm(width: usize, height: usize, rgb: &[f64]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} rgb image needs {} values, got {}",
            width,
            height,
            width * height * 3,
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Decodes binary P6 into `[0,1]` floats (row-major, 3 channels).
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let (width, height, raw) = parse(bytes, "P6", 3)?;
    Ok((width, height, raw.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

/// Encodes a label mask as binary P5. Labels above 255 are rejected.
pub fn encode_pgm(width: usize, height: usize, labels: &[u16]) -> Result<Vec<u8>> {
    if labels.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} mask needs {} values, got {}",
            width,
            height,
            width * height,
            labels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &label in labels {
        if label > 255 {
            return Err(Error::ImageFormat(format!("label {label} does not fit 8-bit mask")));
        }
        out.push(label as u8);
    }
    Ok(out)
}

/// Decodes binary P5 into labels.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let (width, height, raw) = parse(bytes, "P5", 1)?;
    Ok((width, height, raw.iter().map(|&b| u16::from(b)).collect()))
}

/// Encodes raw bytes as binary P5 (one byte per pixel, already quantized).
pub fn encode_pgm_bytes(width: usize, height: usize, values: &[u8]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} image needs {} bytes, got {}",
            width,
            height,
            width * height,
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    Ok(out)
}

pub fn write_image_ppm(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(width, height, rgb)?)?)
}

pub fn read_image_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_mask_pgm(path: &Path, width: usize, height: usize, labels: &[u16]) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm(width, height, labels)?)?)
}

pub fn read_mask_pgm(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    decode_pgm(&std::fs::read(path)?)
}
