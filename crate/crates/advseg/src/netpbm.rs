//! Binary PPM (P6) and PGM (P5) reading and writing.
//!
//! PPM carries RGB images (tensors of shape (3, H, W) in [0, 1], quantized
//! to 8 bits); PGM carries label maps with the raw class index as the gray
//! value.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a (3, H, W) tensor in [0, 1] as a binary PPM.
pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let (n, c, h, w) = image.dims4();
    if n != 1 || c != 3 {
        return Err(Error::shape(
            "write_ppm",
            "(3, H, W) image",
            format!("{:?}", image.shape()),
        ));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", w, h)?;
    let d = image.data();
    let plane = h * w;
    for pix in 0..plane {
        out.write_all(&[
            quantize(d[pix]),
            quantize(d[plane + pix]),
            quantize(d[2 * plane + pix]),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes RGB triples directly (one per pixel, row-major) as a binary PPM.
pub fn write_ppm_rgb(path: impl AsRef<Path>, w: usize, h: usize, rgb: &[[u8; 3]]) -> Result<()> {
    if rgb.len() != w * h {
        return Err(Error::shape(
            "write_ppm_rgb",
            format!("{} pixels", w * h),
            format!("{} pixels", rgb.len()),
        ));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", w, h)?;
    for px in rgb {
        out.write_all(px)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a label map as a binary PGM with the class index as gray value.
pub fn write_pgm(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{} {}\n255\n", labels.width(), labels.height())?;
    out.write_all(labels.data())?;
    out.flush()?;
    Ok(())
}

/// Reads one whitespace-delimited ASCII token, skipping `#` comments.
fn read_token(r: &mut impl Read, path: &str, field: &str) -> Result<String> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_string(),
        field: field.to_string(),
        message,
    };
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(parse_err("unexpected end of file".into()));
            }
            return Ok(tok);
        }
        let ch = byte[0];
        if in_comment {
            if ch == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match ch {
            b'#' => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            _ => tok.push(ch as char),
        }
    }
}

fn read_header(r: &mut impl Read, path: &str, magic: &str) -> Result<(usize, usize)> {
    let got = read_token(r, path, "magic")?;
    if got != magic {
        return Err(Error::Parse {
            path: path.to_string(),
            field: "magic".to_string(),
            message: format!("expected {}, got {}", magic, got),
        });
    }
    let parse_dim = |tok: String, field: &str| -> Result<usize> {
        tok.parse::<usize>().map_err(|e| Error::Parse {
            path: path.to_string(),
            field: field.to_string(),
            message: e.to_string(),
        })
    };
    let w = parse_dim(read_token(r, path, "width")?, "width")?;
    let h = parse_dim(read_token(r, path, "height")?, "height")?;
    let maxval = parse_dim(read_token(r, path, "maxval")?, "maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            path: path.to_string(),
            field: "maxval".to_string(),
            message: format!("only maxval 255 supported, got {}", maxval),
        });
    }
    Ok((w, h))
}

/// Reads a binary PPM into a (3, H, W) tensor in [0, 1].
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);
    let (w, h) = read_header(&mut r, &name, "P6")?;
    let mut raw = vec![0u8; w * h * 3];
    r.read_exact(&mut raw).map_err(|e| Error::Parse {
        path: name.clone(),
        field: "pixels".to_string(),
        message: e.to_string(),
    })?;
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for pix in 0..plane {
        for ch in 0..3 {
            data[ch * plane + pix] = raw[pix * 3 + ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Reads a binary PGM into a label map (gray value = class index).
pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);
    let (w, h) = read_header(&mut r, &name, "P5")?;
    let mut raw = vec![0u8; w * h];
    r.read_exact(&mut raw).map_err(|e| Error::Parse {
        path: name.clone(),
        field: "pixels".to_string(),
        message: e.to_string(),
    })?;
    LabelMap::new(h, w, raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn ppm_round_trip_within_quantization() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        let img = Tensor::from_fn(&[3, 4, 5], |i| (i as f32 / 59.0).clamp(0.0, 1.0));
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.shape(), &[3, 4, 5]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn pgm_round_trip_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        let labels = LabelMap::new(3, 4, (0..12).map(|i| (i % 5) as u8).collect()).unwrap();
        write_pgm(&p, &labels).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), labels);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        std::fs::write(&p, b"P5\n# made by hand\n2 1\n255\n\x01\x02").unwrap();
        let m = read_pgm(&p).unwrap();
        assert_eq!(m.data(), &[1, 2]);
    }

    #[test]
    fn wrong_magic_is_parse_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        std::fs::write(&p, b"P5\n1 1\n255\n\x00").unwrap();
        assert!(read_ppm(&p).is_err());
    }
}
