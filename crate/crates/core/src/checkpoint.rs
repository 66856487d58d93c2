//! Single-file checkpoints.
//!
//! Layout: the magic bytes `ACMILCKP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every
//! parameter as little-endian `f64` in header order. When optimizer state
//! is present the Adam first and second moments follow in the same order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::params::{Matrix, ParamStore};
use crate::room::{PreprocessConfig, Vocabulary};
use crate::train::AdamW;

pub const MAGIC: &[u8; 8] = b"ACMILCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub vocab_size: usize,
    /// Parameter groups in storage order; data follows group by group.
    pub groups: Vec<ParamGroup>,
    pub best_val_pr_auc: f64,
    /// Validation-selected decision threshold on scores.
    pub threshold: f64,
    pub epochs_done: usize,
    pub optimizer: Option<OptimizerState>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
    pub optimizer: Option<AdamW>,
}

fn groups_of(params: &ParamStore) -> Vec<ParamGroup> {
    let mut groups: Vec<ParamGroup> = Vec::new();
    for id in params.ids() {
        let name = params.name(id);
        let group = ParamStore::group_of(name);
        let (rows, cols) = params.get(id).dim();
        let entry = ParamEntry {
            name: name.to_string(),
            rows,
            cols,
        };
        match groups.last_mut() {
            Some(g) if g.name == group => g.params.push(entry),
            _ => groups.push(ParamGroup {
                name: group.to_string(),
                params: vec![entry],
            }),
        }
    }
    groups
}

fn write_matrices<'a>(out: &mut Vec<u8>, ms: impl Iterator<Item = &'a Matrix>) {
    for m in ms {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub struct SaveRequest<'a> {
    pub model: &'a Model,
    pub preprocess: &'a PreprocessConfig,
    pub best_val_pr_auc: f64,
    pub threshold: f64,
    pub epochs_done: usize,
    pub optimizer: Option<&'a AdamW>,
}

pub fn save(path: &Path, req: &SaveRequest<'_>) -> Result<()> {
    let params = &req.model.params;
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: req.model.kind,
        model: req.model.config.clone(),
        preprocess: req.preprocess.clone(),
        vocab_size: Vocabulary::standard().len(),
        groups: groups_of(params),
        best_val_pr_auc: req.best_val_pr_auc,
        threshold: req.threshold,
        epochs_done: req.epochs_done,
        optimizer: req.optimizer.map(|o| OptimizerState {
            step: o.step,
            learning_rate: o.learning_rate,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 8 * params.num_scalars() + 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    write_matrices(&mut out, params.ids().map(|id| params.get(id)));
    if let Some(o) = req.optimizer {
        write_matrices(&mut out, o.m.iter());
        write_matrices(&mut out, o.v.iter());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let raw = self.take(rows * cols * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Matrix::from_shape_vec((rows, cols), values).expect("sized above"))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
    if header.vocab_size != Vocabulary::standard().len() {
        return Err(Error::Checkpoint(format!(
            "vocabulary mismatch: checkpoint has {} action types, this build has {}",
            header.vocab_size,
            Vocabulary::standard().len()
        )));
    }

    let mut model = Model::new(header.kind, header.model.clone())?;
    let saved: Vec<&ParamEntry> = header.groups.iter().flat_map(|g| &g.params).collect();
    let expected = groups_of(&model.params);
    let expected: Vec<&ParamEntry> = expected.iter().flat_map(|g| &g.params).collect();
    if saved != expected {
        return Err(Error::Checkpoint(
            "parameter layout does not match the stored configuration".into(),
        ));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for (&id, e) in ids.iter().zip(&saved) {
        *model.params.get_mut(id) = r.matrix(e.rows, e.cols)?;
    }
    let optimizer = match &header.optimizer {
        Some(state) => {
            let mut opt = AdamW::new(&model.params, state.learning_rate, state.weight_decay);
            opt.step = state.step;
            opt.beta1 = state.beta1;
            opt.beta2 = state.beta2;
            opt.eps = state.eps;
            for (m, e) in opt.m.iter_mut().zip(&saved) {
                *m = r.matrix(e.rows, e.cols)?;
            }
            for (v, e) in opt.v.iter_mut().zip(&saved) {
                *v = r.matrix(e.rows, e.cols)?;
            }
            Some(opt)
        }
        None => None,
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(
            "trailing bytes after parameter data".into(),
        ));
    }
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}

impl Checkpoint {
    /// Errors when `cfg` would build a differently shaped model.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let a = &self.header.model;
        let fields = [
            ("d_embed", a.d_embed, cfg.d_embed),
            ("d_k", a.d_k, cfg.d_k),
            ("num_heads", a.num_heads, cfg.num_heads),
            ("encoder_layers", a.encoder_layers, cfg.encoder_layers),
            ("graph_layers", a.graph_layers, cfg.graph_layers),
            ("recurrent_layers", a.recurrent_layers, cfg.recurrent_layers),
            ("ff_mult", a.ff_mult, cfg.ff_mult),
            ("d_text", a.d_text, cfg.d_text),
            ("vocab_size", a.vocab_size, cfg.vocab_size),
            ("max_actions", a.max_actions, cfg.max_actions),
        ];
        for (name, stored, given) in fields {
            if stored != given {
                return Err(Error::Checkpoint(format!(
                    "checkpoint/config mismatch: {name} is {stored} in the checkpoint but {given} in the config"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_embed: 4,
            d_k: 4,
            num_heads: 2,
            recurrent_layers: 1,
            max_actions: 20,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::new(ModelKind::AcMil, tiny()).unwrap();
        let mut opt = AdamW::new(&model.params, 1e-3, 1e-4);
        opt.step = 7;
        opt.m[3].fill(0.25);
        save(
            &path,
            &SaveRequest {
                model: &model,
                preprocess: &PreprocessConfig::default(),
                best_val_pr_auc: 0.75,
                threshold: 0.4,
                epochs_done: 3,
                optimizer: Some(&opt),
            },
        )
        .unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.header.best_val_pr_auc, 0.75);
        assert_eq!(back.header.epochs_done, 3);
        for id in model.params.ids() {
            assert_eq!(model.params.get(id), back.model.params.get(id));
        }
        let o = back.optimizer.unwrap();
        assert_eq!(o.step, 7);
        assert_eq!(o.m, opt.m);
        assert!(back.header.groups.iter().any(|g| g.name == "reasoner"));
    }

    #[test]
    fn rejects_garbage_and_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));

        let model = Model::new(ModelKind::MeanPool, tiny()).unwrap();
        save(
            &path,
            &SaveRequest {
                model: &model,
                preprocess: &PreprocessConfig::default(),
                best_val_pr_auc: 0.5,
                threshold: 0.5,
                epochs_done: 1,
                optimizer: None,
            },
        )
        .unwrap();
        let ckpt = load(&path).unwrap();
        ckpt.check_compatible(&tiny()).unwrap();
        let err = ckpt
            .check_compatible(&ModelConfig { d_k: 8, ..tiny() })
            .unwrap_err();
        assert!(err.to_string().contains("d_k"), "{err}");

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(load(&path).is_err());
    }
}
