//! Binary checkpoint format, all little-endian:
//!
//! ```text
//! "CDMM" u32 version
//! u64 step  u64 optimizer_step  u32 d_in  u32 vocab
//! u32 n_tensors  { str name  u32 rank  u32 dims[rank]  f64 data[] }
//! u32 n_moments  { str name  u32 len  f64 m[len]  f64 v[len] }
//! u32 n_classes  { u32 id  str name }
//! str config_toml
//! u64 rng_seed  u64 rng_counter
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8. Values are stored as f64 so
//! a round trip is exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, RECTIFY_PREFIX};
use crate::optim::Optimizer;
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::train::Checkpoint;

pub const MAGIC: &[u8; 4] = b"CDMM";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u64(ckpt.step);
    w.u64(ckpt.optim.step);
    w.u32(ckpt.model.d_in);
    w.u32(ckpt.model.vocab);
    let store = &ckpt.model.store;
    w.u32(store.len());
    for (_, name, t) in store.iter() {
        w.str(name);
        w.u32(t.rank());
        for &d in t.shape() {
            w.u32(d);
        }
        w.f64s(t.data());
    }
    w.u32(ckpt.optim.moments.len());
    for (name, (m, v)) in &ckpt.optim.moments {
        w.str(name);
        w.u32(m.len());
        w.f64s(m);
        w.f64s(v);
    }
    w.u32(ckpt.base_classes.len());
    for (id, name) in &ckpt.base_classes {
        w.u32(*id as usize);
        w.str(name);
    }
    w.str(&ckpt.config.to_toml());
    w.u64(ckpt.config.seed);
    w.u64(ckpt.episodes);
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("missing CDMM magic".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let step = r.u64()?;
    let optim_step = r.u64()?;
    let d_in = r.u32()?;
    let vocab = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..r.u32()? {
        let name = r.str()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let data = r.f64s(shape.iter().product())?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let mut moments = std::collections::BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.str()?;
        let n = r.u32()?;
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        moments.insert(name, (m, v));
    }
    let mut base_classes = std::collections::BTreeMap::new();
    for _ in 0..r.u32()? {
        let id = r.u32()? as u32;
        base_classes.insert(id, r.str()?);
    }
    let config = RunConfig::parse(&r.str()?)?;
    let rng_seed = r.u64()?;
    let episodes = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if rng_seed != config.seed {
        return Err(Error::Checkpoint("RNG seed disagrees with the stored config".into()));
    }

    let mut model = Model::new(config.model.clone(), d_in, vocab, config.seed)?;
    let has_rectify = tensors.iter().any(|(n, _)| n.starts_with(RECTIFY_PREFIX));
    if model.rectify.is_some() && !has_rectify {
        model.discard_rectify();
    }
    if tensors.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model expects {}",
            tensors.len(),
            model.store.len()
        )));
    }
    for (name, t) in tensors {
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        let slot = model.store.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: stored shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    let mut optim = Optimizer::new(config.optim.clone());
    optim.step = optim_step;
    optim.moments = moments;
    Ok(Checkpoint {
        config,
        model,
        optim,
        step,
        episodes,
        base_classes,
    })
}

pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
