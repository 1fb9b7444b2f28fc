//! Minimal LLaMA-style decoder: RMS norm, rotary attention (MHA or GQA),
//! SiLU-gated FFN, no biases. Everything runs in float64.

mod checkpoint;
pub(crate) mod forward;
mod kv;
mod rope;
pub mod tensorfile;
mod tokens;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Pairing};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_KIND};
pub use forward::{forward, forward_positions, forward_with_observer, AttentionObserver};
pub use kv::{collect_kv, load_kv_cache, save_kv_cache, KVCacheSet, LayerCache, KV_CACHE_KIND};
pub use rope::RopeTable;
pub use tokens::{read_token_file, write_token_file};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_kv_heads: usize,
    pub rope_base: f64,
    #[serde(default)]
    pub rope_pairing: Pairing,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    /// Desk-scale MHA configuration used throughout the tests.
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            n_heads: 8,
            head_dim: 8,
            n_layers: 2,
            d_ff: 128,
            vocab_size: 256,
            n_kv_heads: 8,
            rope_base: 10_000.0,
            rope_pairing: Pairing::HalfSplit,
            norm_eps: default_norm_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_heads == 0 || self.head_dim == 0 || self.n_layers == 0 || self.vocab_size == 0 {
            return bad("model dimensions must be non-zero".into());
        }
        if self.d_model != self.n_heads * self.head_dim {
            return bad(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if self.head_dim % 2 != 0 {
            return bad(format!("head_dim {} must be even for RoPE", self.head_dim));
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return bad(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return bad("rope_base must be positive".into());
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.group_size()
    }

    pub fn is_mha(&self) -> bool {
        self.n_kv_heads == self.n_heads
    }

    /// Same model with `n_kv_heads` shared KV heads.
    pub fn with_kv_heads(&self, n_kv_heads: usize) -> Self {
        Self {
            n_kv_heads,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    /// 1 × d.
    pub attn_norm: Matrix,
    /// Per query head, d_H × d.
    pub wq: Vec<Matrix>,
    /// Per KV head, d_H × d.
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    /// Per query head, d × d_H.
    pub wo: Vec<Matrix>,
    pub ffn_norm: Matrix,
    /// d_ff × d.
    pub w_gate: Matrix,
    pub w_up: Matrix,
    /// d × d_ff.
    pub w_down: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    /// vocab × d.
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Matrix,
    /// vocab × d.
    pub lm_head: Matrix,
}

impl ModelWeights {
    /// Gaussian initialization scaled by fan-in; norm gains start at one.
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let proj = 1.0 / (d as f64).sqrt();
        let ones = || Matrix::from_fn(1, d, |_, _| 1.0);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_norm: ones(),
                wq: (0..cfg.n_heads)
                    .map(|_| Matrix::random_normal(cfg.head_dim, d, proj, rng))
                    .collect(),
                wk: (0..cfg.n_kv_heads)
                    .map(|_| Matrix::random_normal(cfg.head_dim, d, proj, rng))
                    .collect(),
                wv: (0..cfg.n_kv_heads)
                    .map(|_| Matrix::random_normal(cfg.head_dim, d, proj, rng))
                    .collect(),
                wo: (0..cfg.n_heads)
                    .map(|_| {
                        Matrix::random_normal(d, cfg.head_dim, 1.0 / (cfg.d_model as f64).sqrt(), rng)
                    })
                    .collect(),
                ffn_norm: ones(),
                w_gate: Matrix::random_normal(cfg.d_ff, d, proj, rng),
                w_up: Matrix::random_normal(cfg.d_ff, d, proj, rng),
                w_down: Matrix::random_normal(d, cfg.d_ff, 1.0 / (cfg.d_ff as f64).sqrt(), rng),
            })
            .collect();
        Ok(Self {
            embed: Matrix::random_normal(cfg.vocab_size, d, 1.0, rng),
            layers,
            final_norm: ones(),
            lm_head: Matrix::random_normal(cfg.vocab_size, d, proj, rng),
        })
    }

    /// Checks every tensor shape against `cfg` and rejects non-finite values.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.d_model;
        let expect = |name: String, m: &Matrix, shape: (usize, usize)| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    m.shape()
                )));
            }
            m.ensure_finite(&name)
        };
        expect("embed".into(), &self.embed, (cfg.vocab_size, d))?;
        expect("lm_head".into(), &self.lm_head, (cfg.vocab_size, d))?;
        expect("final_norm".into(), &self.final_norm, (1, d))?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "expected {} layers, found {}",
                cfg.n_layers,
                self.layers.len()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let count = |name: &str, n: usize, want: usize| -> Result<()> {
                if n == want {
                    Ok(())
                } else {
                    Err(Error::Shape(format!(
                        "layer {l} {name}: expected {want} heads, found {n}"
                    )))
                }
            };
            count("wq", layer.wq.len(), cfg.n_heads)?;
            count("wo", layer.wo.len(), cfg.n_heads)?;
            count("wk", layer.wk.len(), cfg.n_kv_heads)?;
            count("wv", layer.wv.len(), cfg.n_kv_heads)?;
            let head = (cfg.head_dim, d);
            for m in layer.wq.iter().chain(&layer.wk).chain(&layer.wv) {
                expect(format!("layer {l} projection"), m, head)?;
            }
            for m in &layer.wo {
                expect(format!("layer {l} wo"), m, (d, cfg.head_dim))?;
            }
            expect(format!("layer {l} attn_norm"), &layer.attn_norm, (1, d))?;
            expect(format!("layer {l} ffn_norm"), &layer.ffn_norm, (1, d))?;
            expect(format!("layer {l} w_gate"), &layer.w_gate, (cfg.d_ff, d))?;
            expect(format!("layer {l} w_up"), &layer.w_up, (cfg.d_ff, d))?;
            expect(format!("layer {l} w_down"), &layer.w_down, (d, cfg.d_ff))?;
        }
        Ok(())
    }

    /// Every tensor in a fixed order; pairs with [`Self::params_mut`].
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embed];
        for l in &self.layers {
            out.push(&l.attn_norm);
            out.extend(l.wq.iter());
            out.extend(l.wk.iter());
            out.extend(l.wv.iter());
            out.extend(l.wo.iter());
            out.extend([&l.ffn_norm, &l.w_gate, &l.w_up, &l.w_down]);
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.extend(l.wq.iter_mut());
            out.extend(l.wk.iter_mut());
            out.extend(l.wv.iter_mut());
            out.extend(l.wo.iter_mut());
            out.push(&mut l.ffn_norm);
            out.push(&mut l.w_gate);
            out.push(&mut l.w_up);
            out.push(&mut l.w_down);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for m in z.params_mut() {
            m.data_mut().fill(0.0);
        }
        z
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &ModelWeights) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.axpy(alpha, b);
        }
    }

    /// Number of scalars in the key and value projections of one layer.
    pub fn kv_parameter_count(&self, layer: usize) -> usize {
        let l = &self.layers[layer];
        l.wk.iter().chain(&l.wv).map(|m| m.data().len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_config_is_valid() {
        let cfg = ModelConfig::toy();
        cfg.validate().unwrap();
        assert_eq!(cfg.group_size(), 1);
        let gqa = cfg.with_kv_heads(2);
        assert_eq!(gqa.group_size(), 4);
        assert_eq!(gqa.kv_head_of(5), 1);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.n_kv_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.head_dim = 7;
        cfg.d_model = 56;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.d_model = 63;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn params_cover_all_tensors() {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = ModelWeights::random(&cfg, &mut rng).unwrap();
        w.validate(&cfg).unwrap();
        let n = w.params().len();
        assert_eq!(n, w.params_mut().len());
        assert_eq!(n, 3 + cfg.n_layers * (5 + 4 * cfg.n_heads));
        assert_eq!(w.kv_parameter_count(0), 2 * cfg.n_heads * cfg.head_dim * cfg.d_model);
    }
}
