//! Binary PPM (P6) images and PGM (P5) label maps, maxval 255.

use std::path::Path;

use crate::error::Error;
use crate::io::checkpoint::write_atomic;
use crate::tensor::{Shape, Tensor};
use crate::train::data::LabelMap;

/// Decoded netpbm raster: width, height, interleaved samples.
struct Raster {
    w: usize,
    h: usize,
    samples: Vec<u8>,
}

fn parse_pnm(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Raster, Error> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Image(format!("expected a {} file", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Whitespace and `#` comments may precede each header number.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("malformed header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image("header number out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Image("malformed header".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Image(format!("only maxval 255 is supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Image("empty image".into()));
    }
    let len = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| Error::Image(format!("image size {w}x{h} overflows")))?;
    let data = &bytes[pos..];
    if data.len() != len {
        return Err(Error::Image(format!("expected {len} data bytes, found {}", data.len())));
    }
    Ok(Raster { w, h, samples: data.to_vec() })
}

fn header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

/// `1 x 3 x H x W` image with values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>, Error> {
    let r = parse_pnm(bytes, b"P6", 3)?;
    Ok(Tensor::from_fn(Shape::new(1, 3, r.h, r.w), |[_, c, y, x]| r.samples[(y * r.w + x) * 3 + c] as f32 / 255.0))
}

/// Quantizes to 8 bits after clamping to `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>, Error> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Image(format!("expected a 1x3xHxW image, got {s}")));
    }
    let mut out = header("P6", s.w, s.h);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push((image.at([0, c, y, x]).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap, Error> {
    let r = parse_pnm(bytes, b"P5", 1)?;
    LabelMap::from_vec(r.h, r.w, r.samples)
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = header("P5", labels.w, labels.h);
    out.extend_from_slice(&labels.data);
    out
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>, Error> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<(), Error> {
    write_atomic(path, &encode_ppm(image)?)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap, Error> {
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<(), Error> {
    write_atomic(path, &encode_pgm(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_keeps_ignore_value() {
        let bytes = b"P5\n2 2\n255\n\x00\x01\x02\xff";
        let l = decode_pgm(bytes).unwrap();
        assert_eq!(l.data, vec![0, 1, 2, 255]);
        assert_eq!(encode_pgm(&l), bytes.to_vec());
    }

    #[test]
    fn ppm_round_trip_and_comments() {
        let bytes = b"P6 # comment\n2 1\n255\n\x00\x80\xff\x10\x20\x30".to_vec();
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(img.at([0, 1, 0, 0]), 128.0 / 255.0);
        let again = encode_ppm(&img).unwrap();
        assert_eq!(&again[again.len() - 6..], &bytes[bytes.len() - 6..]);
        assert_eq!(decode_ppm(&again).unwrap(), img);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        assert!(decode_pgm(b"P6\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n99999999999999999999 2\n255\n").is_err());
        assert!(decode_ppm(b"P6\n4294967296 4294967296\n255\n").is_err());
    }
}
