//! Row-major embedding matrix with per-row metadata and its binary file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{MmflError, Result};

pub const MAGIC: &[u8; 8] = b"MMFLEMB1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub row: usize,
    pub pid: u64,
    pub domain: Domain,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub matrix: Vec<f32>,
    pub meta: Vec<RowMeta>,
    pub normalized: bool,
}

impl EmbeddingStore {
    pub fn new(dim: usize, normalized: bool) -> Self {
        Self {
            dim,
            matrix: Vec::new(),
            meta: Vec::new(),
            normalized,
        }
    }

    /// Builds a store from rows; metadata defaults to consumer rows with the given pids.
    pub fn from_rows(rows: &[Vec<f32>], pids: &[u64], normalized: bool) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut s = Self::new(dim, normalized);
        for (i, (r, &pid)) in rows.iter().zip(pids).enumerate() {
            s.push(r, pid, Domain::Consumer, format!("row{i}"))?;
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.len()).map(|i| self.row(i))
    }

    pub fn pids(&self) -> Vec<u64> {
        self.meta.iter().map(|m| m.pid).collect()
    }

    pub fn push(&mut self, row: &[f32], pid: u64, domain: Domain, path: impl Into<String>) -> Result<()> {
        if row.len() != self.dim {
            return Err(MmflError::Shape(format!(
                "row of length {} pushed into a {}-d store",
                row.len(),
                self.dim
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(MmflError::Argument(format!("row {} is not finite", self.len())));
        }
        if self.normalized {
            let n = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(MmflError::Argument(format!("row {} has norm {n} in a normalized store", self.len())));
            }
        }
        self.matrix.extend_from_slice(row);
        let r = self.meta.len();
        self.meta.push(RowMeta {
            row: r,
            pid,
            domain,
            path: path.into(),
        });
        Ok(())
    }

    /// Checks finiteness and, for normalized stores, unit norms within 1e-5.
    pub fn validate(&self) -> Result<()> {
        if self.matrix.len() != self.dim * self.len() {
            return Err(MmflError::Shape("matrix size does not match row count".into()));
        }
        for (i, r) in self.rows().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(MmflError::Argument(format!("row {i} is not finite")));
            }
            if self.normalized {
                let n = r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-5 {
                    return Err(MmflError::Argument(format!("row {i} has norm {n}")));
                }
            }
        }
        Ok(())
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("meta.jsonl")
    }

    /// Writes the binary matrix and its `.meta.jsonl` sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| MmflError::io(dir, e))?;
        }
        let io = |e| MmflError::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.len() as u64).to_le_bytes()).map_err(io)?;
        for v in &self.matrix {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)?;

        let side = Self::sidecar_path(path);
        let io = |e| MmflError::io(&side, e);
        let mut w = BufWriter::new(File::create(&side).map_err(io)?);
        for m in &self.meta {
            serde_json::to_writer(&mut w, m)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let io = |e| MmflError::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(MmflError::Parse {
                line: 0,
                message: format!("{} is not an embedding store", path.display()),
            });
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(io)?;
        r.read_exact(&mut b8).map_err(io)?;
        let dim = u32::from_le_bytes(b4) as usize;
        let count = u64::from_le_bytes(b8) as usize;
        let mut bytes = vec![0u8; dim * count * 4];
        r.read_exact(&mut bytes).map_err(io)?;
        let matrix: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let side = Self::sidecar_path(path);
        let f = File::open(&side).map_err(|e| MmflError::io(&side, e))?;
        let mut meta = Vec::with_capacity(count);
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| MmflError::io(&side, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let m: RowMeta = serde_json::from_str(&line).map_err(|e| MmflError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            meta.push(m);
        }
        if meta.len() != count {
            return Err(MmflError::Parse {
                line: meta.len(),
                message: format!("sidecar has {} rows, matrix has {count}", meta.len()),
            });
        }
        let mut store = Self {
            dim,
            matrix,
            meta,
            normalized: false,
        };
        let normalized = store
            .rows()
            .all(|r| (r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() - 1.0).abs() <= 1e-5);
        store.normalized = normalized;
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.bin");
        let mut s = EmbeddingStore::new(3, true);
        s.push(&[0.6, 0.8, 0.0], 4, Domain::Shop, "a.png").unwrap();
        s.push(&[0.0, 0.0, 1.0], 7, Domain::Consumer, "b.png").unwrap();
        s.write(&p).unwrap();
        assert!(dir.path().join("emb.meta.jsonl").is_file());
        let back = EmbeddingStore::read(&p).unwrap();
        assert_eq!(back, s);
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[..8], MAGIC);
        assert_eq!(raw.len(), 8 + 4 + 8 + 6 * 4);
    }

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        EmbeddingStore::new(5, true).write(&p).unwrap();
        let back = EmbeddingStore::read(&p).unwrap();
        assert_eq!(back.dim, 5);
        assert!(back.is_empty());
    }

    #[test]
    fn rejects_bad_rows() {
        let mut s = EmbeddingStore::new(2, false);
        assert!(s.push(&[1.0], 0, Domain::Shop, "x").is_err());
        assert!(s.push(&[f32::NAN, 0.0], 0, Domain::Shop, "x").is_err());
    }
}
