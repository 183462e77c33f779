//! Binary PPM (P6, 8-bit) frame export. Values are `round(255 * x)`
//! clamped to [0, 255]; re-reading a written file recovers the quantized
//! bytes exactly on every platform.

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use std::path::Path;

pub fn quantize(x: f64) -> u8 {
    (255.0 * x).round().clamp(0.0, 255.0) as u8
}

/// Writes one `c*h*w` frame (planar, c must be 3) as interleaved P6.
pub fn write_ppm(path: &Path, frame: &[f64], h: usize, w: usize) -> Result<()> {
    if frame.len() != 3 * h * w {
        return Err(Error::invalid(
            "ppm",
            format!("expected 3x{h}x{w} = {} values, got {}", 3 * h * w, frame.len()),
        ));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(quantize(frame[c * h * w + y * w + x]));
            }
        }
    }
    write_atomic(path, &bytes)
}

/// Reads a P6 file back into planar `3*h*w` bytes.
pub fn read_ppm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    // header: magic, width, height, maxval, then a single whitespace byte
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    pos += 1; // single whitespace after maxval
    if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::invalid("ppm", "not an 8-bit P6 file"));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::invalid("ppm", "bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| Error::invalid("ppm", "bad height"))?;
    let body = &bytes[pos..];
    if body.len() != 3 * h * w {
        return Err(Error::invalid("ppm", "truncated pixel data"));
    }
    let mut planar = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                planar[c * h * w + y * w + x] = body[(y * w + x) * 3 + c];
            }
        }
    }
    Ok((planar, h, w))
}
