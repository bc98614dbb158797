use std::fs;
use std::path::Path;

use super::DistanceMatrix;
use crate::error::{Error, Result};

/// Writes the values as a (Q: u32, G: u32) header followed by row-major
/// little-endian `f64`s.
pub fn write_distance_matrix(path: &Path, dm: &DistanceMatrix) -> Result<()> {
    let (q, g) = (dm.n_query(), dm.n_gallery());
    let (Ok(q32), Ok(g32)) = (u32::try_from(q), u32::try_from(g)) else {
        return Err(Error::InvalidInput(format!("{q}×{g} matrix does not fit the u32 header")));
    };
    let mut buf = Vec::with_capacity(8 + 8 * q * g);
    buf.extend_from_slice(&q32.to_le_bytes());
    buf.extend_from_slice(&g32.to_le_bytes());
    for v in dm.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a matrix written by [`write_distance_matrix`]; returns (Q, G, values).
pub fn read_distance_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "missing header"));
    }
    let q = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let g = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != q * g * 8 {
        return Err(Error::format(path, format!("expected {} value bytes, found {}", q * g * 8, body.len())));
    }
    let values = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    Ok((q, g, values))
}
