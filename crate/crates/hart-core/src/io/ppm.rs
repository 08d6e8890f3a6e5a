//! Binary PPM (P6, maxval 255) image I/O.
//!
//! Images travel through the stack as [3,H,W] tensors in [-1,1]. The byte
//! mapping is x = u/127.5 - 1 on read and u = round_half_up((x+1)*127.5)
//! (clamped) on write, so 0 <-> -1.0 and 255 <-> +1.0 and a read/write
//! round trip is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{HartError, Result};
use crate::num::Tensor;

#[inline]
pub fn pixel_to_unit(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

#[inline]
pub fn unit_to_pixel(x: f32) -> u8 {
    let v = ((x + 1.0) * 127.5 + 0.5).floor();
    v.clamp(0.0, 255.0) as u8
}

/// Encode a [3,H,W] tensor in [-1,1] as P6 bytes.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(HartError::format(
            "ppm",
            format!("expected [3,H,W] image, got {s:?}"),
        ));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(unit_to_pixel(d[c * h * w + y * w + x]));
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

/// Decode P6 bytes into a [3,H,W] tensor in [-1,1].
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;

    fn skip_ws(bytes: &[u8], pos: &mut usize) {
        while *pos < bytes.len() {
            match bytes[*pos] {
                b' ' | b'\t' | b'\r' | b'\n' => *pos += 1,
                b'#' => {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
        skip_ws(bytes, pos);
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(HartError::format("ppm", "truncated header".to_string()));
        }
        Ok(&bytes[start..*pos])
    }

    let magic = read_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(HartError::format(
            "ppm",
            format!("expected P6 magic, got {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let parse_usize = |tok: &[u8]| -> Result<usize> {
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| HartError::format("ppm", "malformed header number".to_string()))
    };
    let w = parse_usize(read_token(bytes, &mut pos)?)?;
    let h = parse_usize(read_token(bytes, &mut pos)?)?;
    let maxval = parse_usize(read_token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(HartError::format(
            "ppm",
            format!("unsupported maxval {maxval}; only 255 is supported"),
        ));
    }
    if w == 0 || h == 0 {
        return Err(HartError::format("ppm", "zero image extent".to_string()));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(HartError::format("ppm", "missing header terminator".to_string()));
    }
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() - pos < need {
        return Err(HartError::format(
            "ppm",
            format!("truncated payload: need {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    let payload = &bytes[pos..pos + need];
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * h * w + y * w + x] = pixel_to_unit(payload[(y * w + x) * 3 + c]);
            }
        }
    }
    Ok(Tensor::from_vec(data, &[3, h, w]))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode_ppm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_mapping() {
        assert_eq!(pixel_to_unit(0), -1.0);
        assert_eq!(pixel_to_unit(255), 1.0);
        assert_eq!(unit_to_pixel(-1.0), 0);
        assert_eq!(unit_to_pixel(1.0), 255);
    }

    #[test]
    fn all_byte_values_round_trip() {
        for u in 0..=255u8 {
            assert_eq!(unit_to_pixel(pixel_to_unit(u)), u, "byte {u}");
        }
    }

    #[test]
    fn encode_decode_round_trip_is_bit_exact() {
        let mut data = Vec::new();
        for i in 0..(3 * 4 * 5) {
            data.push(pixel_to_unit((i * 7 % 256) as u8));
        }
        let img = Tensor::from_vec(data, &[3, 4, 5]);
        let bytes = encode_ppm(&img).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        let bytes2 = encode_ppm(&back).unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(img.to_vec(), back.to_vec());
    }

    #[test]
    fn wide_maxval_is_rejected() {
        let bytes = b"P6\n2 2\n65535\n".to_vec();
        let err = decode_ppm(&bytes).unwrap_err().to_string();
        assert!(err.contains("unsupported maxval"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = b"P6\n2 2\n255\nabc".to_vec();
        let err = decode_ppm(&bytes).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(decode_ppm(b"P5\n2 2\n255\n").is_err());
    }
}
