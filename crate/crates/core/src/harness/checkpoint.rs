//! Checkpoint file: `MMCK`, u32 version, u32-length-prefixed config text,
//! u64 step, u64 total steps, u64 optimizer step, a tensor table (online
//! parameters, `adam.m.*`, `adam.v.*`, `key.*`, `moco.queue`), and a
//! SHA-256 trailer over every preceding byte.
//!
//! Random streams are derived from the configured seed and the step
//! counter, so these two values fully determine the generator state.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::train::Trainer;
use crate::error::{MmptError, Result};
use crate::tensor::{read_tensor_table, write_tensor_table, NamedTensor};

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn ck(msg: impl Into<String>) -> MmptError {
    MmptError::Checkpoint(msg.into())
}

pub fn to_bytes(t: &Trainer) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = t.cfg.to_text();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    for x in [t.step as u64, t.total_steps as u64, t.opt.t] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut tensors = t.store.to_named();
    for (i, (_, p)) in t.store.iter().enumerate() {
        for (prefix, data) in [("adam.m.", &t.opt.m[i]), ("adam.v.", &t.opt.v[i])] {
            tensors.push(NamedTensor {
                name: format!("{prefix}{}", p.name),
                shape: p.shape.clone(),
                data: data.clone(),
            });
        }
    }
    tensors.extend(t.keys.store.to_named().into_iter().map(|k| NamedTensor {
        name: format!("key.{}", k.name),
        ..k
    }));
    tensors.push(NamedTensor {
        name: "moco.queue".into(),
        shape: vec![t.keys.len(), t.keys.dim],
        data: t.keys.queue_flat(),
    });
    write_tensor_table(&mut buf, &tensors)?;
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..4] != MAGIC {
        return Err(ck("not a checkpoint (bad magic or truncated)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(ck("checksum mismatch"));
    }
    let mut r = &body[4..];
    let mut take = |n: usize| -> Result<&[u8]> {
        if r.len() < n {
            return Err(ck("truncated header"));
        }
        let (a, b) = r.split_at(n);
        r = b;
        Ok(a)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(ck(format!("unsupported version {version}")));
    }
    let cfg_len = u32_at(take(4)?) as usize;
    let cfg_text = std::str::from_utf8(take(cfg_len)?).map_err(|e| ck(format!("config text: {e}")))?;
    let cfg = TrainConfig::from_text(cfg_text).map_err(|e| ck(format!("config: {e}")))?;
    let step = u64_at(take(8)?) as usize;
    let total_steps = u64_at(take(8)?) as usize;
    let adam_t = u64_at(take(8)?);
    let tensors = read_tensor_table(&mut r)?;
    if !r.is_empty() {
        return Err(ck(format!("{} trailing bytes after tensor table", r.len())));
    }

    let mut t = Trainer::new(cfg, 1)?;
    t.step = step;
    t.total_steps = total_steps;
    t.opt.t = adam_t;
    t.store.load_named(&tensors, "")?;
    t.keys.store.load_named(&tensors, "key.")?;
    let lookup = |name: &str| {
        tensors
            .iter()
            .find(|x| x.name == name)
            .ok_or_else(|| ck(format!("missing tensor {name}")))
    };
    for (i, (_, p)) in t.store.iter().enumerate() {
        for (prefix, dst) in [("adam.m.", &mut t.opt.m[i]), ("adam.v.", &mut t.opt.v[i])] {
            let x = lookup(&format!("{prefix}{}", p.name))?;
            if x.data.len() != dst.len() {
                return Err(ck(format!(
                    "tensor {prefix}{} has {} values, expected {}",
                    p.name,
                    x.data.len(),
                    dst.len()
                )));
            }
            dst.clone_from(&x.data);
        }
    }
    t.keys.set_queue(&lookup("moco.queue")?.data)?;
    Ok(t)
}

pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(t)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    from_bytes(&fs::read(path)?)
}
