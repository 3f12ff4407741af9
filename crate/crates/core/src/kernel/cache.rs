//! On-disk cache of dense kernels.
//!
//! File layout (all integers and floats little-endian):
//!
//! | offset | size | field                                              |
//! |-------:|-----:|----------------------------------------------------|
//! | 0      | 8    | magic `TSKERNL\0`                                  |
//! | 8      | 4    | format version (`u32`)                             |
//! | 12     | 4    | dimension `d` (`u32`)                              |
//! | 16     | 8    | side length `L` (`f64`)                            |
//! | 24     | 8    | points per axis `N` (`u64`)                        |
//! | 32     | 8    | time `t` (`f64`)                                   |
//! | 40     | 8    | Crank–Nicolson substeps (`u64`, 0 for dense)       |
//! | 48     | 8    | key hash: potential fingerprint, stencil, method   |
//! | 56     | 8    | FNV-1a checksum of the payload (`u64`)             |
//! | 64     | ...  | `M*M` kernel entries, row-major, then `M` weights  |
//!
//! A file whose header or checksum does not match is ignored and rebuilt; the
//! cache is an optimisation only.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::TorusGrid;
use crate::potential::{Fnv1a, PotentialSpec};

use super::{KernelMethod, Stencil};

pub const MAGIC: &[u8; 8] = b"TSKERNL\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheKey {
    pub dim: u32,
    pub side: f64,
    pub points_per_axis: u64,
    pub time: f64,
    pub substeps: u64,
    pub key_hash: u64,
}

impl CacheKey {
    pub fn new(
        grid: &TorusGrid,
        v: &PotentialSpec,
        time: f64,
        substeps: usize,
        stencil: Stencil,
        method: KernelMethod,
    ) -> Self {
        let mut h = Fnv1a::new();
        h.write(&v.fingerprint().to_le_bytes());
        h.write(&[stencil as u8, method as u8]);
        Self {
            dim: grid.dim() as u32,
            side: grid.side(),
            points_per_axis: grid.points_per_axis() as u64,
            time,
            substeps: substeps as u64,
            key_hash: h.finish(),
        }
    }

    fn nodes(&self) -> usize {
        (self.points_per_axis as usize).pow(self.dim)
    }

    pub fn file_name(&self) -> String {
        let mut h = Fnv1a::new();
        h.write(&self.header_prefix());
        format!("kernel-{:016x}.bin", h.finish())
    }

    fn header_prefix(&self) -> [u8; 56] {
        let mut b = [0u8; 56];
        b[0..8].copy_from_slice(MAGIC);
        b[8..12].copy_from_slice(&VERSION.to_le_bytes());
        b[12..16].copy_from_slice(&self.dim.to_le_bytes());
        b[16..24].copy_from_slice(&self.side.to_le_bytes());
        b[24..32].copy_from_slice(&self.points_per_axis.to_le_bytes());
        b[32..40].copy_from_slice(&self.time.to_le_bytes());
        b[40..48].copy_from_slice(&self.substeps.to_le_bytes());
        b[48..56].copy_from_slice(&self.key_hash.to_le_bytes());
        b
    }
}

pub fn path_for(dir: &Path, key: &CacheKey) -> PathBuf {
    dir.join(key.file_name())
}

fn checksum(payload: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(payload);
    h.finish()
}

/// Returns `(entries, weights)` when a valid file for `key` exists.
pub fn load(dir: &Path, key: &CacheKey) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let bytes = match fs::read(path_for(dir, key)) {
        Ok(b) => b,
        Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let m = key.nodes();
    let expected = HEADER_LEN + 8 * (m * m + m);
    if bytes.len() != expected || bytes[..56] != key.header_prefix() {
        return Ok(None);
    }
    let stored = u64::from_le_bytes(bytes[56..64].try_into().unwrap());
    let payload = &bytes[HEADER_LEN..];
    if checksum(payload) != stored {
        return Ok(None);
    }
    let mut floats = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let entries: Vec<f64> = floats.by_ref().take(m * m).collect();
    let weights: Vec<f64> = floats.collect();
    Ok(Some((entries, weights)))
}

/// Writes atomically (temporary file + rename).
pub fn store(dir: &Path, key: &CacheKey, entries: &[f64], weights: &[f64]) -> Result<()> {
    let m = key.nodes();
    if entries.len() != m * m || weights.len() != m {
        return Err(Error::Cache("payload size does not match key".into()));
    }
    fs::create_dir_all(dir)?;
    let mut payload = Vec::with_capacity(8 * (m * m + m));
    for v in entries.iter().chain(weights) {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let mut bytes = Vec::with_capacity(HEADER_LEN + payload.len());
    bytes.extend_from_slice(&key.header_prefix());
    bytes.extend_from_slice(&checksum(&payload).to_le_bytes());
    bytes.extend_from_slice(&payload);
    let path = path_for(dir, key);
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, &path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> CacheKey {
        let g = TorusGrid::new(1, 1.0, 4).unwrap();
        CacheKey::new(
            &g,
            &PotentialSpec::Zero,
            0.5,
            0,
            Stencil::Fourth,
            KernelMethod::Dense,
        )
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let k = key();
        let entries: Vec<f64> = (0..16).map(|i| i as f64 * 0.25).collect();
        let weights = vec![0.25; 4];
        assert!(load(dir.path(), &k).unwrap().is_none());
        store(dir.path(), &k, &entries, &weights).unwrap();
        let (e, w) = load(dir.path(), &k).unwrap().unwrap();
        assert_eq!(e, entries);
        assert_eq!(w, weights);

        let path = path_for(dir.path(), &k);
        let mut bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 8 * 20);
        bytes[HEADER_LEN + 3] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(load(dir.path(), &k).unwrap().is_none());

        fs::write(&path, b"garbage").unwrap();
        assert!(load(dir.path(), &k).unwrap().is_none());
    }

    #[test]
    fn keys_separate_times_and_potentials() {
        let g = TorusGrid::new(1, 1.0, 4).unwrap();
        let a = CacheKey::new(
            &g,
            &PotentialSpec::Zero,
            0.5,
            0,
            Stencil::Fourth,
            KernelMethod::Dense,
        );
        let b = CacheKey::new(
            &g,
            &PotentialSpec::Zero,
            0.25,
            0,
            Stencil::Fourth,
            KernelMethod::Dense,
        );
        let c = CacheKey::new(
            &g,
            &PotentialSpec::Zero,
            0.5,
            0,
            Stencil::Second,
            KernelMethod::Dense,
        );
        assert_ne!(a.file_name(), b.file_name());
        assert_ne!(a.file_name(), c.file_name());
    }
}
