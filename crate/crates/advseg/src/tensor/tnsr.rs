//! The `TNSR` binary tensor file format.
//!
//! Layout: 4-byte magic `TNSR`, one u8 rank, `rank` little-endian u32
//! extents, then the row-major f32 payload in little-endian byte order.
//! Used for perturbations, gradients, and checkpoint parameter blobs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TNSR";

pub fn write_tnsr(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[t.rank() as u8])?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tnsr(r: &mut impl Read, source: &str) -> Result<Tensor> {
    let parse_err = |field: &str, message: String| Error::Parse {
        path: source.to_string(),
        field: field.to_string(),
        message,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| parse_err("magic", e.to_string()))?;
    if &magic != MAGIC {
        return Err(parse_err("magic", format!("expected TNSR, got {:?}", magic)));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)
        .map_err(|e| parse_err("rank", e.to_string()))?;
    let rank = rank[0] as usize;
    if rank == 0 || rank > 4 {
        return Err(parse_err("rank", format!("rank {} out of 1..=4", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut ext = [0u8; 4];
        r.read_exact(&mut ext)
            .map_err(|e| parse_err("extents", format!("extent {}: {}", i, e)))?;
        shape.push(u32::from_le_bytes(ext) as usize);
    }
    let len: usize = shape.iter().product();
    let mut payload = vec![0u8; len * 4];
    r.read_exact(&mut payload)
        .map_err(|e| parse_err("payload", e.to_string()))?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(parse_err("payload", "non-finite value".to_string()));
    }
    Tensor::new(&shape, data)
}

pub fn save_tnsr(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tnsr(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tnsr(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    read_tnsr(&mut r, &path.display().to_string())
}
