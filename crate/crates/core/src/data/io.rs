//! Binary PPM (P6, 8-bit RGB) and PFM (single channel, little-endian).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

/// Parses whitespace-separated header tokens; returns them and the offset
/// of the first data byte (one whitespace byte after the last token).
fn header_tokens(bytes: &[u8], count: usize, path: &Path) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(format_err(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(format_err(path, "missing data after header"));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(s: &str, path: &Path) -> Result<usize> {
    s.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| format_err(path, format!("bad dimension `{s}`")))
}

/// Encodes interleaved RGB bytes (`H·W·3`) as P6.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!("ppm: {} bytes for {width}x{height}", rgb.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if !bytes.starts_with(b"P6") {
        return Err(format_err(path, "not a binary PPM (magic P6)"));
    }
    let (tok, start) = header_tokens(&bytes[2..], 3, path)?;
    let (w, h) = (parse_dim(&tok[0], path)?, parse_dim(&tok[1], path)?);
    if tok[2] != "255" {
        return Err(format_err(path, format!("unsupported maxval {}", tok[2])));
    }
    let data = &bytes[2 + start..];
    if data.len() != w * h * 3 {
        return Err(format_err(path, format!("expected {} data bytes, found {}", w * h * 3, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

/// Encodes a row-major (top row first) map as PFM; PFM stores rows bottom-up.
pub fn encode_pfm(width: usize, height: usize, values: &[f32]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::Shape(format!("pfm: {} values for {width}x{height}", values.len())));
    }
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(values.len() * 4);
    for row in values.chunks(width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    if !bytes.starts_with(b"Pf") {
        return Err(format_err(path, "not a single-channel PFM (magic Pf)"));
    }
    let (tok, start) = header_tokens(&bytes[2..], 3, path)?;
    let (w, h) = (parse_dim(&tok[0], path)?, parse_dim(&tok[1], path)?);
    let scale: f64 = tok[2].parse().map_err(|_| format_err(path, format!("bad scale `{}`", tok[2])))?;
    if scale == 0.0 {
        return Err(format_err(path, "zero scale"));
    }
    let little = scale < 0.0;
    let data = &bytes[2 + start..];
    if data.len() != w * h * 4 {
        return Err(format_err(path, format!("expected {} data bytes, found {}", w * h * 4, data.len())));
    }
    let mut values = vec![0f32; w * h];
    for (r, row) in data.chunks(w * 4).enumerate() {
        let dst = (h - 1 - r) * w;
        for (c, b) in row.chunks(4).enumerate() {
            let arr = [b[0], b[1], b[2], b[3]];
            values[dst + c] = if little { f32::from_le_bytes(arr) } else { f32::from_be_bytes(arr) };
        }
    }
    Ok((w, h, values))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    Ok(fs::write(path, encode_ppm(width, height, rgb)?)?)
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_ppm(&fs::read(path)?, path)
}

pub fn write_pfm(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    Ok(fs::write(path, encode_pfm(width, height, values)?)?)
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    decode_pfm(&fs::read(path)?, path)
}
