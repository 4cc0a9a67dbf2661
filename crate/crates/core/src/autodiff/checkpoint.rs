//! Binary checkpoints.
//!
//! Layout (little endian): magic `VLNWBCKP`, `u32` version, `u64` seed,
//! `u64` step, `u32` length + UTF-8 config hash, `u32` tensor count, then per
//! tensor a `u32` length + UTF-8 name, `u32` rank, `rank` x `u32` dims and the
//! raw values. Version 1 stores values as `f32`; version 2 stores `f64` and
//! round-trips exactly.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use super::TensorError;

pub const MAGIC: &[u8; 8] = b"VLNWBCKP";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32 = 1,
    F64 = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
    pub tensors: IndexMap<String, Tensor>,
}

fn ckpt_err(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const ADAM_T: &str = "adam.t.";

impl Checkpoint {
    /// Snapshot of parameter values and, if requested, Adam state.
    pub fn from_store(store: &ParamStore, seed: u64, step: u64, config_hash: &str, with_optimizer: bool) -> Self {
        let mut tensors = IndexMap::new();
        for (name, p) in store.iter() {
            tensors.insert(name.to_string(), p.value.clone());
        }
        if with_optimizer {
            for (name, p) in store.iter() {
                let shape = p.value.shape().to_vec();
                tensors.insert(format!("{ADAM_M}{name}"), Tensor::new(shape.clone(), p.m.clone()).expect("same shape"));
                tensors.insert(format!("{ADAM_V}{name}"), Tensor::new(shape, p.v.clone()).expect("same shape"));
                tensors.insert(format!("{ADAM_T}{name}"), Tensor::scalar(p.t as f64));
            }
        }
        Checkpoint { seed, step, config_hash: config_hash.to_string(), tensors }
    }

    /// Writes values into `store`. Every parameter must be present with a
    /// matching shape; optimiser state is restored when present.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), TensorError> {
        for (name, p) in store.iter_mut() {
            let t = self.tensors.get(name).ok_or_else(|| ckpt_err(format!("missing tensor {name}")))?;
            if t.shape() != p.value.shape() {
                return Err(ckpt_err(format!("tensor {name}: shape {:?}, expected {:?}", t.shape(), p.value.shape())));
            }
            p.value = t.clone();
            p.grad.iter_mut().for_each(|g| *g = 0.0);
            if let (Some(m), Some(v), Some(t)) = (
                self.tensors.get(&format!("{ADAM_M}{name}")),
                self.tensors.get(&format!("{ADAM_V}{name}")),
                self.tensors.get(&format!("{ADAM_T}{name}")),
            ) {
                p.m = m.data().to_vec();
                p.v = v.data().to_vec();
                p.t = t.item() as u64;
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W, precision: Precision) -> Result<(), TensorError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(precision as u32).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut buf, &self.config_hash);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut buf, name);
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                match precision {
                    Precision::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        w.write_all(&buf).map_err(|e| ckpt_err(e.to_string()))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, TensorError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| ckpt_err(e.to_string()))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(ckpt_err("bad magic"));
        }
        let precision = match cur.u32()? {
            1 => Precision::F32,
            2 => Precision::F64,
            v => return Err(ckpt_err(format!("unsupported version {v}"))),
        };
        let seed = cur.u64()?;
        let step = cur.u64()?;
        let config_hash = cur.string()?;
        let count = cur.u32()?;
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let name = cur.string()?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| match precision {
                    Precision::F32 => cur.take(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64),
                    Precision::F64 => cur.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let t = Tensor::new(shape, data).map_err(|e| ckpt_err(format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(ckpt_err(format!("duplicate tensor {name}")));
            }
        }
        if cur.pos != bytes.len() {
            return Err(ckpt_err("trailing bytes"));
        }
        Ok(Checkpoint { seed, step, config_hash, tensors })
    }

    pub fn save(&self, path: &Path, precision: Precision) -> Result<(), TensorError> {
        let mut f = std::fs::File::create(path).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
        self.write_to(&mut f, precision)
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let mut f = std::fs::File::open(path).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
        Checkpoint::read_from(&mut f)
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| ckpt_err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, TensorError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ckpt_err("name is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        s.add_uniform("enc.w", &[3, 5], 3, ParamGroup::Main, &mut rng).unwrap();
        s.add_uniform("emb", &[7, 2], 2, ParamGroup::Embedder, &mut rng).unwrap();
        s.add_uniform("conv", &[2, 1, 3, 3], 9, ParamGroup::Main, &mut rng).unwrap();
        s
    }

    #[test]
    fn f64_roundtrip_is_exact() {
        let mut s = store();
        s.iter_mut().for_each(|(_, p)| {
            p.m.iter_mut().for_each(|m| *m = 0.125);
            p.t = 7;
        });
        let ck = Checkpoint::from_store(&s, 42, 99, "abc", true);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes, Precision::F64).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut fresh = store();
        fresh.iter_mut().for_each(|(_, p)| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
        back.restore_into(&mut fresh).unwrap();
        assert_eq!(fresh, s);
    }

    #[test]
    fn f32_roundtrip_is_close() {
        let s = store();
        let ck = Checkpoint::from_store(&s, 1, 2, "h", false);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes, Precision::F32).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.tensors.keys().collect::<Vec<_>>(), ck.tensors.keys().collect::<Vec<_>>());
        for (a, b) in back.tensors.values().zip(ck.tensors.values()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let ck = Checkpoint::from_store(&store(), 1, 2, "h", false);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes, Precision::F64).unwrap();
        for cut in [0, 4, 12, bytes.len() - 1] {
            assert!(Checkpoint::read_from(&mut &bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
        let mut v9 = bytes.clone();
        v9[8] = 9;
        assert!(Checkpoint::read_from(&mut v9.as_slice()).is_err());

        let mut other = ParamStore::new();
        other.add("enc.w", Tensor::zeros(&[5, 3]), ParamGroup::Main).unwrap();
        assert!(ck.restore_into(&mut other).is_err());
        let mut missing = ParamStore::new();
        missing.add("nope", Tensor::zeros(&[1, 1]), ParamGroup::Main).unwrap();
        assert!(ck.restore_into(&mut missing).is_err());
    }
}
