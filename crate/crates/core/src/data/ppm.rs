//! Binary PPM (P6) reading and writing.
//!
//! Header: ASCII `P6`, whitespace, width, whitespace, height, whitespace,
//! maxval, one whitespace byte, then raw RGB triplets. `#` comments are
//! accepted between header fields. Writing always uses maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triplets.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::dim(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    /// Channels-first tensor with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.pixels[p * 3 + c] as f32 / 255.0
        })
    }

    /// From a `[C, H, W]` tensor in `[0, 1]`; one channel is replicated to grey.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        if t.rank() != 3 || !(t.shape()[0] == 1 || t.shape()[0] == 3) {
            return Err(Error::dim(format!("expected [1|3, H, W] image tensor, got {:?}", t.shape())));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let plane = h * w;
        let mut pixels = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for ch in 0..3 {
                let v = t.data()[(ch % c) * plane + p];
                pixels.push(quantize(v as f64));
            }
        }
        Self::new(w, h, pixels)
    }
}

/// `[0, 1]` to a byte with rounding and clamping.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format(0, "missing P6 magic"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, format!("expected header field {}", i + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, "header number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(3, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(pos as u64, format!("invalid maxval {maxval}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos as u64, "expected single whitespace after maxval")),
    }
    let samples = width * height * 3;
    let wide = maxval > 255;
    let need = if wide { samples * 2 } else { samples };
    let raw = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::format(pos as u64, format!("truncated raster: need {need} bytes")))?;
    let pixels = if wide {
        raw.chunks_exact(2)
            .map(|c| {
                let v = u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64;
                quantize(v)
            })
            .collect()
    } else if maxval == 255 {
        raw.to_vec()
    } else {
        raw.iter().map(|&v| quantize(v as f64 / maxval as f64)).collect()
    };
    RgbImage::new(width, height, pixels)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let img = RgbImage::new(2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(encode_ppm(&img), b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06".to_vec());
    }

    #[test]
    fn comments_and_small_maxval() {
        let bytes = b"P6 # made by hand\n1 1\n# note\n15\n\x0f\x00\x05";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.pixels, vec![255, 0, 85]);
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\nabc"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\nabc"), Err(Error::Format { .. })));
    }

    #[test]
    fn white_is_one() {
        let img = RgbImage::new(3, 2, vec![255; 18]).unwrap();
        assert!(img.to_tensor().data().iter().all(|&v| v == 1.0));
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let pixels = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let img = RgbImage::new(w, h, pixels).unwrap();
            prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img.clone());
            prop_assert_eq!(RgbImage::from_tensor(&img.to_tensor()).unwrap(), img);
        }
    }
}
