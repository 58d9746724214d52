//! Binary (P5) PGM image I/O. Pixels map to [0,1] by division by 255.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale image as a `[1,1,H,W]` tensor in [0,1].
pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| Error::Data(format!("{}: {}", path.display(), msg)))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token()? != "P5" {
        return Err("not a binary PGM (P5) file".into());
    }
    let w: usize = token()?.parse().map_err(|_| "bad width")?;
    let h: usize = token()?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token()?.parse().map_err(|_| "bad maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates header from raster
    pos += 1;
    if bytes.len() < pos + w * h {
        return Err("truncated pixel data".into());
    }
    let scale = 1.0 / maxval as f32;
    let data = bytes[pos..pos + w * h]
        .iter()
        .map(|&b| b as f32 * scale)
        .collect();
    Tensor::from_vec(&[1, 1, h, w], data).map_err(|e| e.to_string())
}

/// Write a `[1,1,H,W]` tensor as 8-bit P5, clamping to [0,1].
pub fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 {
        return Err(Error::dim(
            "write_pgm",
            format!("expected [1,1,H,W] image, got {:?}", s),
        ));
    }
    let (h, w) = (s[2], s[3]);
    let mut out = Vec::with_capacity(64 + h * w);
    write!(out, "P5\n{} {}\n255\n", w, h).expect("in-memory write");
    for &v in image.data().iter() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Tensor::from_vec(
            &[1, 1, 2, 3],
            vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1],
        )
        .unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), &[1, 1, 2, 3]);
        for (a, b) in img.to_vec().iter().zip(back.to_vec()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let bytes = b"P5\n# a comment\n2 1\n255\n\x00\xff";
        let img = parse_pgm(bytes).unwrap();
        assert_eq!(img.to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn rejects_non_p5() {
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\nxx").is_err());
    }
}
