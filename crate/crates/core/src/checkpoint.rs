//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SMSCKPT\0" | version u32
//! config_hash u64 | phase u32 | replica u32 | seed u64
//! n_sizes u32 | sizes u64* | batch_norm u8 | model_seed u64 | bn_stale u8
//! n_tensors u32 | (name, rank u32, dims u64*, f32*)*
//! n_masks u32   | (param u32, name, len u64, bitmap)*
//! sha256 of everything above
//! ```
//!
//! Names are a `u32` byte length followed by UTF-8. Bitmaps pack eight
//! keep-flags per byte, least significant bit first.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{build_model, ArchSpec, ModelState};
use crate::pruning::{Mask, MaskTensor};

pub const MAGIC: &[u8; 8] = b"SMSCKPT\0";
pub const VERSION: u32 = 1;
/// Replica id recorded for merged (soup) models.
pub const MERGED: u32 = u32::MAX;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: u64,
    pub phase: u32,
    pub replica: u32,
    pub seed: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("count {v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }
    fn name(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflows usize".into()))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("invalid flag byte {b}"))),
        }
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

/// Serializes a model, its mask and provenance.
pub fn encode(model: &ModelState, mask: &Mask, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    mask.check_congruent(model)?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(meta.config_hash);
    w.u32(meta.phase);
    w.u32(meta.replica);
    w.u64(meta.seed);

    w.len(model.arch.sizes.len())?;
    for &s in &model.arch.sizes {
        w.u64(s as u64);
    }
    w.u8(u8::from(model.arch.batch_norm));
    w.u64(model.seed);
    w.u8(u8::from(model.bn_stale));

    w.len(model.params.len())?;
    for p in &model.params {
        w.name(&p.name)?;
        w.len(p.shape.len())?;
        for &d in &p.shape {
            w.u64(d as u64);
        }
        for &v in &p.data {
            w.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    w.len(mask.tensors.len())?;
    for t in &mask.tensors {
        w.len(t.param)?;
        w.name(&t.name)?;
        w.u64(t.keep.len() as u64);
        for chunk in t.keep.chunks(8) {
            w.u8(chunk.iter().enumerate().fold(0u8, |b, (i, &k)| b | (u8::from(k) << i)));
        }
    }

    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    Ok(w.0)
}

/// Parses and validates a checkpoint. Nothing is returned unless the whole
/// file checks out.
pub fn decode(bytes: &[u8]) -> Result<(ModelState, Mask, CheckpointMeta)> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Checkpoint(format!("truncated: only {} bytes", bytes.len())));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
    }
    let meta = CheckpointMeta { config_hash: r.u64()?, phase: r.u32()?, replica: r.u32()?, seed: r.u64()? };

    let n_sizes = r.u32()? as usize;
    let sizes = (0..n_sizes).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let batch_norm = r.flag()?;
    let arch = ArchSpec::new(sizes, batch_norm)?;
    let mut model = build_model(&arch, r.u64()?)?;
    model.bn_stale = r.flag()?;

    let n_params = r.u32()? as usize;
    if n_params != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{n_params} tensors stored, architecture has {}",
            model.params.len()
        )));
    }
    for p in &mut model.params {
        let name = r.name()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if name != p.name || shape != p.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` {shape:?} does not match `{}` {:?}",
                p.name, p.shape
            )));
        }
        let raw = r.take(p.data.len() * 4)?;
        for (v, b) in p.data.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    }

    let n_masks = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_masks);
    for _ in 0..n_masks {
        let param = r.u32()? as usize;
        let name = r.name()?;
        let len = r.usize()?;
        let bits = r.take(len.div_ceil(8))?;
        let keep = (0..len).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let shape = model.params.get(param).map(|p| p.shape.clone()).unwrap_or_default();
        tensors.push(MaskTensor { param, name, shape, keep });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let mask = Mask::from_tensors(tensors);
    mask.check_congruent(&model).map_err(|e| Error::Checkpoint(e.to_string()))?;
    for t in &mask.tensors {
        let data = &model.params[t.param].data;
        if let Some(j) = t.keep.iter().zip(data).position(|(&k, &w)| !k && w != 0.0) {
            return Err(Error::Checkpoint(format!("`{}`[{j}] is masked but holds a nonzero weight", t.name)));
        }
    }
    Ok((model, mask, meta))
}

pub fn save_checkpoint(model: &ModelState, mask: &Mask, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model, mask, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelState, Mask, CheckpointMeta)> {
    decode(&fs::read(path)?)
}
