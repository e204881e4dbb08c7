//! Model checkpoints.
//!
//! Layout (little-endian): magic `SRNM`, format version `u32`, header
//! length `u32`, a TOML header holding the model configuration, input
//! dimension and vocabulary, tensor count `u32`, then per tensor: name
//! length `u32`, UTF-8 name, rank `u32`, each dimension as `u32`, and the
//! values as `f64`. Tensors appear in name order, so equal models give
//! equal bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_file};
use crate::autodiff::Tensor;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lattice::Vocabulary;
use crate::model::Model;
use crate::params::ModelParams;

const MAGIC: &[u8; 4] = b"SRNM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    input_dim: usize,
    vocab: Vec<String>,
    model: ModelConfig,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(u32::try_from(v).expect("checkpoint field fits in u32")).to_le_bytes());
}

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let header = Header {
        input_dim: model.input_dim,
        vocab: model.vocab.tokens().to_vec(),
        model: model.config.clone(),
    };
    let header = toml::to_string(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, header.len());
    out.extend_from_slice(header.as_bytes());
    put_u32(&mut out, model.params.len());
    for (name, t) in model.params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    write_file(path, &checkpoint_bytes(model))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.path,
                format!("truncated: needed {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        let path = self.path;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::format(path, "string is not UTF-8"))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = read_file(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a model checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()?;
    let header: Header = toml::from_str(r.str(n)?).map_err(|e| Error::format(path, e.to_string()))?;
    header.model.validate()?;
    let vocab = Vocabulary::new(header.vocab)?;
    let count = r.u32()?;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()?;
        let name = r.str(n)?.to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let payload = r.take(len.checked_mul(8).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("tensor {name} holds non-finite values")));
        }
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = ModelParams::from_map(tensors);
    params.check_shapes(&header.model, header.input_dim, vocab.len())?;
    Ok(Model {
        config: header.model,
        input_dim: header.input_dim,
        vocab,
        params,
    })
}

/// Rejects a loaded model whose hyperparameters or vocabulary differ from
/// what the caller runs with, unless `allow_override` is set. The
/// vocabulary size is always enforced since parameter shapes depend on it.
pub fn check_compatible(
    model: &Model,
    config: &ModelConfig,
    vocab: Option<&Vocabulary>,
    allow_override: bool,
) -> Result<()> {
    if let Some(v) = vocab {
        if v.len() != model.vocab.len() {
            return Err(Error::Mismatch(format!(
                "checkpoint has {} labels, data vocabulary has {}",
                model.vocab.len(),
                v.len()
            )));
        }
        if v != &model.vocab && !allow_override {
            return Err(Error::Mismatch("checkpoint vocabulary differs from data vocabulary".into()));
        }
    }
    if &model.config != config && !allow_override {
        return Err(Error::Mismatch(format!(
            "checkpoint hyperparameters differ from the running configuration:\n--- checkpoint\n{}--- running\n{}",
            toml::to_string(&model.config).unwrap_or_default(),
            toml::to_string(config).unwrap_or_default()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecodeMode;
    use crate::lattice::FrameSequence;

    fn model(v: usize) -> Model {
        let mut cfg = ModelConfig::small();
        cfg.encoder.num_layers = 2;
        cfg.encoder.hidden = 4;
        cfg.features.d_h = 3;
        cfg.features.d_w = 5;
        cfg.features.d_dur = 2;
        cfg.encoder.dropout_rate = 0.1;
        cfg.clamp.ms = Some(35.0);
        let vocab = Vocabulary::new((0..v).map(|i| format!("t{i}"))).unwrap();
        Model::new(cfg, 3, vocab, 0.2, 9).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical_and_decodes_identically() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let m = model(3);
        save_checkpoint(&a, &m).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, m);
        save_checkpoint(&b, &loaded).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let frames = FrameSequence::new((0..21).map(|i| (i as f64).cos()).collect(), 7, 3).unwrap();
        assert_eq!(
            m.decode(&frames, DecodeMode::Joint).unwrap(),
            loaded.decode(&frames, DecodeMode::Joint).unwrap()
        );
    }

    #[test]
    fn compatibility_checks() {
        let m = model(3);
        let other_vocab = Vocabulary::new(["x", "y"]).unwrap();
        assert!(check_compatible(&m, &m.config, Some(&other_vocab), true).is_err());
        assert!(check_compatible(&m, &m.config, Some(&m.vocab), false).is_ok());
        let mut cfg = m.config.clone();
        cfg.features.d_w = 7;
        assert!(check_compatible(&m, &cfg, None, false).is_err());
        assert!(check_compatible(&m, &cfg, None, true).is_ok());
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let bytes = checkpoint_bytes(&model(2));
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_checkpoint(&p).unwrap_err().to_string().contains("truncated"));
        let mut bad = bytes.clone();
        bad[0] = 0;
        std::fs::write(&p, &bad).unwrap();
        assert!(load_checkpoint(&p).is_err());
        let mut bad = bytes;
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::INFINITY.to_le_bytes());
        std::fs::write(&p, &bad).unwrap();
        assert!(load_checkpoint(&p).unwrap_err().to_string().contains("non-finite"));
    }
}
