use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensorfile::TensorFile;
use super::{LayerWeights, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Pairing};

pub const CHECKPOINT_KIND: &str = "model";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    rope_pairing: Pairing,
}

/// Per-head projections are stored stacked: `q_proj` is (H·d_H) × d,
/// `k_proj`/`v_proj` are (n_kv·d_H) × d and `o_proj` is d × (H·d_H).
pub fn to_tensor_file(weights: &ModelWeights, cfg: &ModelConfig) -> Result<TensorFile> {
    weights.validate(cfg)?;
    let mut tensors = vec![("embed".to_string(), weights.embed.clone())];
    for (l, layer) in weights.layers.iter().enumerate() {
        let name = |s: &str| format!("layers.{l}.{s}");
        tensors.push((name("attn_norm"), layer.attn_norm.clone()));
        tensors.push((name("q_proj"), Matrix::vstack(&layer.wq)?));
        tensors.push((name("k_proj"), Matrix::vstack(&layer.wk)?));
        tensors.push((name("v_proj"), Matrix::vstack(&layer.wv)?));
        tensors.push((name("o_proj"), Matrix::hstack(&layer.wo)?));
        tensors.push((name("ffn_norm"), layer.ffn_norm.clone()));
        tensors.push((name("gate_proj"), layer.w_gate.clone()));
        tensors.push((name("up_proj"), layer.w_up.clone()));
        tensors.push((name("down_proj"), layer.w_down.clone()));
    }
    tensors.push(("final_norm".into(), weights.final_norm.clone()));
    tensors.push(("lm_head".into(), weights.lm_head.clone()));
    let meta = CheckpointMeta {
        config: cfg.clone(),
        rope_pairing: cfg.rope_pairing,
    };
    Ok(TensorFile {
        kind: CHECKPOINT_KIND.into(),
        metadata: serde_json::to_value(meta)
            .map_err(|e| Error::CorruptHeader(format!("cannot encode config: {e}")))?,
        tensors,
    })
}

pub fn from_tensor_file(file: &TensorFile) -> Result<(ModelWeights, ModelConfig)> {
    let meta: CheckpointMeta = serde_json::from_value(file.metadata.clone())
        .map_err(|e| Error::CorruptHeader(format!("bad model metadata: {e}")))?;
    let cfg = meta.config;
    if meta.rope_pairing != cfg.rope_pairing {
        return Err(Error::CorruptHeader("conflicting RoPE pairing tags".into()));
    }
    cfg.validate()
        .map_err(|e| Error::CorruptHeader(format!("invalid stored config: {e}")))?;
    let split_rows = |m: &Matrix, heads: usize, what: &str| -> Result<Vec<Matrix>> {
        if m.rows() != heads * cfg.head_dim {
            return Err(Error::Shape(format!(
                "{what}: {} rows for {heads} heads of width {}",
                m.rows(),
                cfg.head_dim
            )));
        }
        Ok((0..heads)
            .map(|h| m.row_block(h * cfg.head_dim, cfg.head_dim))
            .collect())
    };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let get = |s: &str| file.get(&format!("layers.{l}.{s}")).cloned();
        let o = get("o_proj")?;
        if o.cols() != cfg.n_heads * cfg.head_dim {
            return Err(Error::Shape(format!("layer {l} o_proj has {} columns", o.cols())));
        }
        layers.push(LayerWeights {
            attn_norm: get("attn_norm")?,
            wq: split_rows(&get("q_proj")?, cfg.n_heads, "q_proj")?,
            wk: split_rows(&get("k_proj")?, cfg.n_kv_heads, "k_proj")?,
            wv: split_rows(&get("v_proj")?, cfg.n_kv_heads, "v_proj")?,
            wo: (0..cfg.n_heads)
                .map(|h| o.col_block(h * cfg.head_dim, cfg.head_dim))
                .collect(),
            ffn_norm: get("ffn_norm")?,
            w_gate: get("gate_proj")?,
            w_up: get("up_proj")?,
            w_down: get("down_proj")?,
        });
    }
    let weights = ModelWeights {
        embed: file.get("embed")?.clone(),
        layers,
        final_norm: file.get("final_norm")?.clone(),
        lm_head: file.get("lm_head")?.clone(),
    };
    weights.validate(&cfg)?;
    Ok((weights, cfg))
}

pub fn save_checkpoint(weights: &ModelWeights, cfg: &ModelConfig, path: &Path) -> Result<()> {
    to_tensor_file(weights, cfg)?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelWeights, ModelConfig)> {
    from_tensor_file(&TensorFile::read_kind(path, CHECKPOINT_KIND)?)
}
