//! Binary PPM (`P6`) and PGM (`P5`) images with 8-bit samples.
//!
//! Pixels map to `[0, 1]` on read. On write, values are clamped to
//! `[0, 1]` and quantised as `round(v * 255)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// `round(clamp(v, 0, 1) * 255)`.
pub fn quantize<T: Scalar>(v: T) -> u8 {
    let v = v.as_f64();
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(format_err("file too short"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(format_err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err("bad header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err("missing separator after header"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(format_err(format!(
            "unsupported geometry {width}x{height}, maxval {maxval}"
        )));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        offset: pos + 1,
    })
}

fn decode<T: Scalar>(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Tensor<T>> {
    let h = parse_header(bytes)?;
    if &h.magic != magic {
        return Err(format_err(format!(
            "expected {} image",
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    let plane = h.width * h.height;
    let body = &bytes[h.offset..];
    if body.len() < plane * channels {
        return Err(format_err("pixel data is truncated"));
    }
    let scale = T::of_usize(h.maxval);
    let mut data = vec![T::zero(); plane * channels];
    for (i, px) in body[..plane * channels].chunks(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + i] = T::of_usize(v as usize) / scale;
        }
    }
    Tensor::new(vec![1, channels, h.height, h.width], data)
}

fn encode<T: Scalar>(img: &Tensor<T>, magic: &str, channels: usize) -> Result<Vec<u8>> {
    let (n, c, h, w) = img.dims4()?;
    if n != 1 || c != channels {
        return Err(Error::Shape(format!(
            "{magic} needs [1, {channels}, H, W], got {:?}",
            img.shape()
        )));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..c {
            out.push(quantize(img.data()[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    decode(bytes, b"P6", 3)
}

pub fn decode_pgm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    decode(bytes, b"P5", 1)
}

pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    encode(img, "P6", 3)
}

pub fn encode_pgm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    encode(img, "P5", 1)
}

/// Reads a `[1, 3, H, W]` RGB image.
pub fn read_ppm<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_ppm<T: Scalar>(path: impl AsRef<Path>, img: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

/// Reads a `[1, 1, H, W]` grayscale image.
pub fn read_pgm<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn write_pgm<T: Scalar>(path: impl AsRef<Path>, img: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_pgm(img)?)?;
    Ok(())
}

/// Rounds every value onto the 8-bit grid a PPM/PGM round trip produces.
pub fn quantize_tensor<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    img.map(|v| T::of_usize(quantize(v) as usize) / T::of(255.0))
}
