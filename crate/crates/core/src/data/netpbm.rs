//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use super::{DataError, Result};
use crate::image::{ImageRgb, Mask};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_ppm(img: &ImageRgb) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = header("P6", w, h);
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for v in img.pixel(y, x) {
                out.push(quantize(v));
            }
        }
    }
    out
}

/// Foreground is stored as 255, background as 0.
pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = header("P5", mask.width(), mask.height());
    out.extend(mask.data().iter().map(|&v| if v == 1 { 255 } else { 0 }));
    out
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(DataError::Format(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(DataError::Format("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Format(format!("expected a number at byte {start}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|e| DataError::Format(format!("bad header number: {e}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(DataError::Format("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(DataError::Format(format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        offset: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let data = &bytes[h.offset..];
    if data.len() < need {
        return Err(DataError::Format(format!(
            "payload has {} bytes, expected {need}",
            data.len()
        )));
    }
    Ok(&data[..need])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRgb> {
    let h = parse_header(bytes, b"P6")?;
    let raw = payload(bytes, &h, 3)?;
    let n = h.width * h.height;
    let scale = h.maxval as f64;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = (px[c] as f64 / scale).min(1.0);
        }
    }
    Ok(ImageRgb::new(h.height, h.width, data)?)
}

/// Values at or above half of the full scale read as foreground.
pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    let h = parse_header(bytes, b"P5")?;
    let raw = payload(bytes, &h, 1)?;
    let data = raw
        .iter()
        .map(|&v| (v as usize * 255 >= 128 * h.maxval) as u8)
        .collect();
    Ok(Mask::new(h.height, h.width, data)?)
}

/// Rejects any value other than 0 and the maxval.
pub fn decode_pgm_strict(bytes: &[u8]) -> Result<Mask> {
    let h = parse_header(bytes, b"P5")?;
    let raw = payload(bytes, &h, 1)?;
    if let Some(bad) = raw.iter().find(|&&v| v != 0 && v as usize != h.maxval) {
        return Err(DataError::Format(format!("non-binary mask value {bad}")));
    }
    decode_pgm(bytes)
}

pub fn write_ppm(img: &ImageRgb, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| DataError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageRgb> {
    decode_ppm(&fs::read(path).map_err(|e| DataError::io(path, e))?)
}

pub fn write_pgm(mask: &Mask, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(mask)).map_err(|e| DataError::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    decode_pgm(&fs::read(path).map_err(|e| DataError::io(path, e))?)
}

/// Grayscale bytes (one per pixel, row-major) as a P5 file.
pub fn encode_gray(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    let mut out = header("P5", width, height);
    out.extend_from_slice(values);
    out
}
