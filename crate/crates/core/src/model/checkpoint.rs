//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "LUPC" | u32 version | u64 arch hash | u32 len, TOML config | u64 quantizer seed
//! u32 n_params, then per parameter:
//!     u32 len, name | u8 frozen | u32 rank | u32 dims.. | f64 values..
//! 32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{LupetConfig, LupetModel, QUANTIZER_CODEBOOK, QUANTIZER_PROJ};
use crate::numerics::{ParamStore, Tensor};
use crate::quantizer::RandomProjectionQuantizer;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LUPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hash of parameter names, shapes and frozen flags.
pub fn arch_hash(store: &ParamStore) -> u64 {
    let mut h = Sha256::new();
    for (_, p) in store.iter() {
        h.update((p.name.len() as u32).to_le_bytes());
        h.update(p.name.as_bytes());
        h.update([p.frozen as u8]);
        h.update((p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest is 32 bytes"))
}

pub fn checkpoint_bytes(model: &LupetModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&arch_hash(&model.store).to_le_bytes());
    let cfg = model.config.to_toml();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let qseed = model.quantizer().map_or(model.config.quantizer.seed, |q| q.seed());
    out.extend_from_slice(&qseed.to_le_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.frozen as u8);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint(model: &LupetModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<LupetModel> {
    if bytes.len() < 4 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hash = r.u64()?;
    let config = LupetConfig::from_toml(&r.string()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let qseed = r.u64()?;
    let mut model = LupetModel::new(config)?;
    if arch_hash(&model.store) != hash {
        return Err(Error::Checkpoint("architecture hash does not match the stored config".into()));
    }
    let n = r.u32()? as usize;
    if n != model.store.len() {
        return Err(Error::Checkpoint(format!("expected {} parameters, found {n}", model.store.len())));
    }
    for _ in 0..n {
        let name = r.string()?;
        let frozen = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let p = model.store.get_mut(id);
        if p.frozen != frozen || p.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!("parameter {name} does not match the architecture")));
        }
        p.value = Tensor::new(shape, data)?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    restore_quantizer(&mut model, qseed)?;
    Ok(model)
}

fn restore_quantizer(model: &mut LupetModel, seed: u64) -> Result<()> {
    if let (Some(p), Some(c)) = (model.store.id(QUANTIZER_PROJ), model.store.id(QUANTIZER_CODEBOOK)) {
        let q = RandomProjectionQuantizer::from_stored(
            model.store.value(p).clone(),
            model.store.value(c).clone(),
            seed,
        )?;
        model.set_quantizer(q);
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LupetModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    parse_checkpoint(&bytes)
}

/// Elementwise mean of every trainable parameter; frozen ones are copied
/// from the first model.
pub fn average_models(models: &[LupetModel]) -> Result<LupetModel> {
    let first = models.first().ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
    let hash = arch_hash(&first.store);
    if models.iter().any(|m| arch_hash(&m.store) != hash) {
        return Err(Error::Checkpoint("architecture mismatch between checkpoints".into()));
    }
    let mut out = first.clone();
    let k = models.len() as f64;
    let ids: Vec<_> = out.store.ids().collect();
    for id in ids {
        if out.store.get(id).frozen {
            continue;
        }
        let p = out.store.get_mut(id);
        let sum = p.value.data_mut();
        for m in &models[1..] {
            for (a, b) in sum.iter_mut().zip(m.store.value(id).data()) {
                *a += b;
            }
        }
        sum.iter_mut().for_each(|a| *a /= k);
    }
    Ok(out)
}

pub fn average_checkpoints(paths: &[&Path]) -> Result<LupetModel> {
    let models = paths.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    average_models(&models)
}
