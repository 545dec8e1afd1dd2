//! 8-bit binary greymap (P5) I/O.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// `[0, 1]` intensity to an 8-bit level.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0
}

pub fn encode(width: usize, height: usize, pixels: &[f64]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::contract(format!("{} pixels for a {width}x{height} greymap", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn write(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    let bytes = encode(width, height, pixels)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parses a P5 greymap with maxval 255. Returns `(width, height, pixels)`.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |msg: &str| Error::Parse { path: path.to_path_buf(), msg: msg.to_string() };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary greymap (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated raster"))?;
    Ok((w, h, raster.iter().map(|&b| dequantize(b)).collect()))
}

pub fn read(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_of_quantized_values() {
        let px: Vec<f64> = (0..12).map(|i| dequantize((i * 21) as u8)).collect();
        let bytes = encode(4, 3, &px).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        let (w, h, back) = decode(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, px);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P5 # c\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        assert_eq!(decode(&bytes, Path::new("a")).unwrap().2, vec![0.0, 1.0]);
        assert!(decode(b"P2\n1 1\n255\n0", Path::new("a")).is_err());
        assert!(decode(b"P5\n2 2\n255\n\0", Path::new("a")).is_err());
        assert_eq!(quantize(0.5), 128);
    }
}
