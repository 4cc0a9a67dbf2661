//! Per-panorama visual feature maps (`C x H x W`, columns spanning 360°).
//!
//! On disk a store is one binary file of little-endian `f32` values plus a
//! JSONL index with one `{"id", "dims", "offset"}` record per panorama.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::graph::PanoId;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("no feature record for panorama {0}")]
    Missing(String),
    #[error("feature record {id}: {msg}")]
    Invalid { id: String, msg: String },
    #[error("feature index line {line}: {msg}")]
    Index { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRecord {
    id: String,
    dims: [usize; 3],
    offset: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    maps: IndexMap<PanoId, Tensor>,
}

impl FeatureStore {
    pub fn new() -> Self {
        FeatureStore::default()
    }

    /// Adds a `[C, H, W]` map. `W` must be a multiple of 8 and all values finite.
    pub fn insert(&mut self, id: PanoId, map: Tensor) -> Result<(), FeatureError> {
        let bad = |msg: String| FeatureError::Invalid { id: id.0.clone(), msg };
        match map.shape() {
            [_, _, w] if w % 8 == 0 => {}
            s => return Err(bad(format!("shape {s:?} is not [C, H, W] with W divisible by 8"))),
        }
        if !map.is_finite() {
            return Err(bad("non-finite value".into()));
        }
        if let Some((_, first)) = self.maps.first() {
            if first.shape() != map.shape() {
                return Err(bad(format!("shape {:?} differs from store shape {:?}", map.shape(), first.shape())));
            }
        }
        self.maps.insert(id, map);
        Ok(())
    }

    pub fn get(&self, id: &PanoId) -> Result<&Tensor, FeatureError> {
        self.maps.get(id).ok_or_else(|| FeatureError::Missing(id.0.clone()))
    }

    pub fn contains(&self, id: &PanoId) -> bool {
        self.maps.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// `(C, H, W)` shared by every record.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.maps.first().map(|(_, t)| {
            let s = t.shape();
            (s[0], s[1], s[2])
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = &PanoId> {
        self.maps.keys()
    }

    pub fn save(&self, bin: &Path, index: &Path) -> Result<(), FeatureError> {
        let mut b = BufWriter::new(std::fs::File::create(bin).map_err(io_err(bin))?);
        let mut ix = BufWriter::new(std::fs::File::create(index).map_err(io_err(index))?);
        let mut offset = 0u64;
        for (id, t) in &self.maps {
            let s = t.shape();
            let rec = IndexRecord { id: id.0.clone(), dims: [s[0], s[1], s[2]], offset };
            let line = serde_json::to_string(&rec).expect("index record serializes");
            writeln!(ix, "{line}").map_err(io_err(index))?;
            for &v in t.data() {
                b.write_all(&(v as f32).to_le_bytes()).map_err(io_err(bin))?;
            }
            offset += 4 * t.len() as u64;
        }
        b.flush().map_err(io_err(bin))?;
        ix.flush().map_err(io_err(index))
    }

    pub fn load(bin: &Path, index: &Path) -> Result<Self, FeatureError> {
        let mut bytes = Vec::new();
        std::fs::File::open(bin).map_err(io_err(bin))?.read_to_end(&mut bytes).map_err(io_err(bin))?;
        let reader = BufReader::new(std::fs::File::open(index).map_err(io_err(index))?);
        let mut store = FeatureStore::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(index))?;
            if line.trim().is_empty() {
                continue;
            }
            let ierr = |msg: String| FeatureError::Index { line: i + 1, msg };
            let rec: IndexRecord = serde_json::from_str(&line).map_err(|e| ierr(e.to_string()))?;
            let n: usize = rec.dims.iter().product();
            let start = rec.offset as usize;
            let end = start + 4 * n;
            if end > bytes.len() {
                return Err(ierr(format!("record {} runs past end of feature file", rec.id)));
            }
            let data = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(rec.dims.to_vec(), data).map_err(|e| ierr(e.to_string()))?;
            let id = PanoId(rec.id);
            if store.contains(&id) {
                return Err(ierr(format!("duplicate record {id}")));
            }
            store.insert(id, t)?;
        }
        Ok(store)
    }
}

/// Column whose centre faces `heading` (degrees clockwise from column 0).
pub fn heading_column(heading: f64, width: usize) -> usize {
    ((heading / 360.0 * width as f64).round() as i64).rem_euclid(width as i64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(seed: f64) -> Tensor {
        Tensor::new(vec![2, 3, 8], (0..48).map(|i| (i as f64 * 0.37 + seed).sin() as f32 as f64).collect()).unwrap()
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = FeatureStore::new();
        s.insert(PanoId("a".into()), map(0.0)).unwrap();
        s.insert(PanoId("b".into()), map(1.0)).unwrap();
        let (bin, ix) = (dir.path().join("f.bin"), dir.path().join("f.jsonl"));
        s.save(&bin, &ix).unwrap();
        assert_eq!(std::fs::metadata(&bin).unwrap().len(), 2 * 48 * 4);
        let back = FeatureStore::load(&bin, &ix).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.dims(), Some((2, 3, 8)));
        assert!(matches!(back.get(&PanoId("zz".into())), Err(FeatureError::Missing(_))));
    }

    #[test]
    fn invalid_records_are_rejected() {
        let mut s = FeatureStore::new();
        let t = Tensor::new(vec![1, 1, 6], vec![0.0; 6]).unwrap();
        assert!(s.insert(PanoId("a".into()), t).is_err());
        let t = Tensor::new(vec![1, 1, 8], vec![f64::NAN; 8]).unwrap();
        assert!(s.insert(PanoId("a".into()), t).is_err());
        s.insert(PanoId("a".into()), map(0.0)).unwrap();
        assert!(s.insert(PanoId("b".into()), Tensor::zeros(&[1, 1, 8])).is_err());
    }

    #[test]
    fn truncated_feature_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = FeatureStore::new();
        s.insert(PanoId("a".into()), map(0.0)).unwrap();
        let (bin, ix) = (dir.path().join("f.bin"), dir.path().join("f.jsonl"));
        s.save(&bin, &ix).unwrap();
        std::fs::write(&bin, [0u8; 10]).unwrap();
        assert!(matches!(FeatureStore::load(&bin, &ix), Err(FeatureError::Index { .. })));
    }

    #[test]
    fn heading_columns_wrap() {
        assert_eq!(heading_column(0.0, 64), 0);
        assert_eq!(heading_column(90.0, 64), 16);
        assert_eq!(heading_column(359.0, 64), 0);
        assert_eq!(heading_column(354.0, 64), 63);
    }
}
