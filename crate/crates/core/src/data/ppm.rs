//! Binary PPM (P6, maxval 255).

use std::fs;
use std::path::Path;

use super::ImageTensor;
use crate::error::{Error, Result};
use crate::quantize::io::write_atomic;

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Reads the next whitespace-delimited header token, skipping comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Result<(usize, usize)> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(fmt_err(*pos, "truncated header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    if start == *pos {
        return Err(fmt_err(start, "expected a decimal number"));
    }
    let s = std::str::from_utf8(&bytes[start..*pos]).expect("ascii digits");
    let v = s
        .parse()
        .map_err(|_| fmt_err(start, format!("number {s} out of range")))?;
    Ok((v, start))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(fmt_err(0, "missing P6 magic"));
    }
    let mut pos = 2;
    let (width, _) = header_token(bytes, &mut pos)?;
    let (height, _) = header_token(bytes, &mut pos)?;
    let (maxval, at) = header_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(fmt_err(
            at,
            format!("maxval {maxval} (only 255 is supported)"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(fmt_err(2, "zero image extent"));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(fmt_err(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let need = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(fmt_err(
            pos + payload.len(),
            format!(
                "truncated payload: need {need} bytes, have {}",
                payload.len()
            ),
        ));
    }
    let data = payload[..need].iter().map(|&b| b as f32 / 255.0).collect();
    ImageTensor::new(height, width, data)
}

pub fn encode_ppm(image: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<ImageTensor> {
    decode_ppm(&fs::read(path)?)
}

pub fn save_ppm(image: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_ppm(image))
}
