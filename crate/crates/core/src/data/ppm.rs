//! Binary PPM ("P6", maxval 255) reader and writer.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a P6 image into a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| Error::parse("magic", "empty file"))?;
    if magic != b"P6" {
        return Err(Error::parse("magic", format!("expected P6, found {:?}", String::from_utf8_lossy(magic))));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::parse("maxval", format!("expected 255, found {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::parse("width", "zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::parse("payload", "missing separator after header"));
    }
    pos += 1;
    let n = width * height * 3;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::parse("payload", format!("truncated: need {n} bytes, have {}", bytes.len() - pos)))?;
    let plane = width * height;
    let mut data = vec![0f32; n];
    for (p, rgb) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = f32::from(rgb[c]) / 255.0;
        }
    }
    Tensor::new(&[3, height, width], data)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    let tok = next_token(bytes, pos).ok_or_else(|| Error::parse(field, "missing"))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(field, format!("not a number: {:?}", String::from_utf8_lossy(tok))))
}

/// Encodes a `[3, H, W]` tensor; values are clamped to `[0,1]` and rounded.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("PPM needs a [3,H,W] tensor, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for c in 0..3 {
            let v = image.data()[c * plane + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes)
}

pub fn save_ppm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_image() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend((0..12).map(|v| v as u8 * 20));
        let t = parse_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(t.at(&[1, 0, 0]), 20.0 / 255.0);
        assert_eq!(t.at(&[0, 1, 1]), 180.0 / 255.0);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6 # made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 0]);
        assert_eq!(parse_ppm(&bytes).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn errors_name_the_offending_field() {
        let err = parse_ppm(b"P5\n1 1\n255\n\0").unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        let err = parse_ppm(b"P6\n1 1\n65535\n\0\0\0").unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");
        let err = parse_ppm(b"P6\n2 2\n255\n\0\0\0").unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }

    #[test]
    fn quantized_round_trip_is_exact() {
        let data: Vec<f32> = (0..27).map(|v| (v * 9) as f32 / 255.0).collect();
        let t = Tensor::new(&[3, 3, 3], data).unwrap();
        let back = parse_ppm(&encode_ppm(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
