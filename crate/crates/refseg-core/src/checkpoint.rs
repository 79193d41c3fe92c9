//! Versioned checkpoint container.
//!
//! Layout: an 8-byte magic, a JSON metadata block (model kind, config
//! snapshot, vocabulary, epoch, global step), then a tensor section of
//! `name -> shape -> little-endian f32 payload` entries. Optimizer moments
//! are stored as tensors under the reserved `opt.m/` and `opt.v/` prefixes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"RSEGCKP1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: RunConfig,
    vocab: Vec<String>,
    epoch: usize,
    global_step: usize,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: RunConfig,
    pub vocab: Vec<String>,
    pub epoch: usize,
    pub global_step: usize,
    pub params: ParamStore,
    pub opt_m: BTreeMap<String, ArrayD<f64>>,
    pub opt_v: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    /// Rebuild an optimizer with the stored moments.
    pub fn restore_optimizer(&self, mut opt: AdamW) -> AdamW {
        opt.restore_state(self.opt_m.clone(), self.opt_v.clone(), self.global_step);
        opt
    }

    /// Error unless the stored snapshot agrees with `cfg` on the structural
    /// keys (hidden width, down-sampling ratio, encoder kind).
    pub fn check_structural(&self, cfg: &RunConfig) -> Result<()> {
        let stored = self.config.to_json();
        for (key, expected) in cfg.structural_keys() {
            if stored[key] != expected {
                return Err(Error::Checkpoint(format!(
                    "checkpoint config disagrees on '{key}': checkpoint has {}, run config has {expected} (pass --force to override)",
                    stored[key]
                )));
            }
        }
        Ok(())
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, tensor: &ArrayD<f64>) {
    let name_bytes = name.as_bytes();
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(name_bytes);
    out.push(tensor.ndim() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Save parameters, optional optimizer state, and the config snapshot.
#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    cfg: &RunConfig,
    vocab: &[String],
    store: &ParamStore,
    optimizer: Option<&AdamW>,
    epoch: usize,
    global_step: usize,
) -> Result<()> {
    let meta = Meta {
        kind: kind.to_string(),
        config: cfg.clone(),
        vocab: vocab.to_vec(),
        epoch,
        global_step,
    };
    let meta_json = serde_json::to_vec(&meta)?;

    let mut tensors: Vec<(String, &ArrayD<f64>)> = store
        .iter()
        .map(|(n, t)| (n.clone(), t))
        .collect();
    if let Some(opt) = optimizer {
        let (m, v) = opt.state();
        for (n, t) in m {
            tensors.push((format!("opt.m/{n}"), t));
        }
        for (n, t) in v {
            tensors.push((format!("opt.v/{n}"), t));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        write_tensor(&mut out, &name, tensor);
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let meta: Meta = serde_json::from_slice(take(&mut pos, meta_len)?)?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

    let mut params = ParamStore::new();
    let mut opt_m = BTreeMap::new();
    let mut opt_v = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid tensor name".into()))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 4)?;
        let mut data = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        if let Some(rest) = name.strip_prefix("opt.m/") {
            opt_m.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("opt.v/") {
            opt_v.insert(rest.to_string(), tensor);
        } else {
            params.insert(name, tensor);
        }
    }

    Ok(Checkpoint {
        kind: meta.kind,
        config: meta.config,
        vocab: meta.vocab,
        epoch: meta.epoch,
        global_step: meta.global_step,
        params,
        opt_m,
        opt_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::scalar_param;

    #[test]
    fn round_trips_params_and_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = RunConfig::desk();
        let mut store = ParamStore::new();
        store.insert("a.weight", ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![
            1.0, -2.5, 0.125, 3.75, 0.0, 9.5,
        ])
        .unwrap());
        store.insert("b", scalar_param(2.659));
        let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, cfg.lr_poly_power, 100);
        let mut grads = BTreeMap::new();
        grads.insert("a.weight".to_string(), ArrayD::from_elem(IxDyn(&[2, 3]), 0.5));
        opt.apply(&mut store, &grads);

        let vocab = vec!["<unk>".to_string(), "red".to_string()];
        save_checkpoint(&path, "step1", &cfg, &vocab, &store, Some(&opt), 3, 17).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.kind, "step1");
        assert_eq!(ck.epoch, 3);
        assert_eq!(ck.global_step, 17);
        assert_eq!(ck.vocab, vocab);
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.params.len(), 2);
        // f32 round trip: exact for values representable in f32
        for (&a, &b) in store.get("a.weight").iter().zip(ck.params.get("a.weight").iter()) {
            assert!((a as f32 - b as f32).abs() == 0.0);
        }
        assert!(ck.opt_m.contains_key("a.weight"));
        assert!(ck.opt_v.contains_key("a.weight"));
    }

    #[test]
    fn structural_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = RunConfig::desk();
        let store = ParamStore::new();
        save_checkpoint(&path, "step1", &cfg, &[], &store, None, 0, 0).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert!(ck.check_structural(&cfg).is_ok());
        let mut other = cfg.clone();
        other.c_d = 128;
        assert!(ck.check_structural(&other).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
