use std::path::Path;

use serde::{Deserialize, Serialize};

use super::forward::{check_tokens, forward_with_observer};
use super::tensorfile::TensorFile;
use super::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::par;

pub const KV_CACHE_KIND: &str = "kv-cache";

/// Keys (pre-RoPE) and values of one layer, one d_H × N matrix per head.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KVCacheSet {
    pub n_tokens: usize,
    pub head_dim: usize,
    pub layers: Vec<LayerCache>,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    n_tokens: usize,
    head_dim: usize,
    n_layers: usize,
    n_heads: usize,
}

impl KVCacheSet {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.len())
    }

    /// Reorders heads so that new head `i` is old head `perm[i]`.
    pub fn permute_heads(&self, perm: &[usize]) -> Result<KVCacheSet> {
        check_permutation(perm, self.n_heads())?;
        Ok(KVCacheSet {
            n_tokens: self.n_tokens,
            head_dim: self.head_dim,
            layers: self
                .layers
                .iter()
                .map(|l| LayerCache {
                    keys: perm.iter().map(|&p| l.keys[p].clone()).collect(),
                    values: perm.iter().map(|&p| l.values[p].clone()).collect(),
                })
                .collect(),
        })
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let meta = CacheMeta {
            n_tokens: self.n_tokens,
            head_dim: self.head_dim,
            n_layers: self.n_layers(),
            n_heads: self.n_heads(),
        };
        let mut tensors = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, k) in layer.keys.iter().enumerate() {
                tensors.push((format!("layers.{l}.keys.{h}"), k.clone()));
            }
            for (h, v) in layer.values.iter().enumerate() {
                tensors.push((format!("layers.{l}.values.{h}"), v.clone()));
            }
        }
        Ok(TensorFile {
            kind: KV_CACHE_KIND.into(),
            metadata: serde_json::to_value(meta)
                .map_err(|e| Error::CorruptHeader(e.to_string()))?,
            tensors,
        })
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let meta: CacheMeta = serde_json::from_value(file.metadata.clone())
            .map_err(|e| Error::CorruptHeader(format!("bad cache metadata: {e}")))?;
        let shape = (meta.head_dim, meta.n_tokens);
        let fetch = |name: String| -> Result<Matrix> {
            let m = file.get(&name)?;
            if m.shape() != shape {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    m.shape()
                )));
            }
            Ok(m.clone())
        };
        let layers = (0..meta.n_layers)
            .map(|l| {
                Ok(LayerCache {
                    keys: (0..meta.n_heads)
                        .map(|h| fetch(format!("layers.{l}.keys.{h}")))
                        .collect::<Result<_>>()?,
                    values: (0..meta.n_heads)
                        .map(|h| fetch(format!("layers.{l}.values.{h}")))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            n_tokens: meta.n_tokens,
            head_dim: meta.head_dim,
            layers,
        })
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::InvalidArgument(format!(
            "permutation of length {} for {n} heads",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Runs every calibration sequence and concatenates per-head keys and values
/// along the token axis, sequences in input order.
pub fn collect_kv(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    calib: &[Vec<u32>],
) -> Result<KVCacheSet> {
    if calib.is_empty() {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    weights.validate(cfg)?;
    for seq in calib {
        check_tokens(cfg, seq)?;
    }
    let n_kv = cfg.n_kv_heads;
    // per sequence: [layer][head] -> (keys rows, values rows), T × d_H each
    let per_seq = par::map(calib, |seq| {
        let mut rows: Vec<Vec<(Matrix, Matrix)>> = vec![Vec::with_capacity(n_kv); cfg.n_layers];
        let mut obs = |l: usize, _g: usize, k: &Matrix, v: &Matrix| {
            rows[l].push((k.clone(), v.clone()));
        };
        forward_with_observer(weights, cfg, seq, &mut obs).map(|_| rows)
    });
    let per_seq = per_seq.into_iter().collect::<Result<Vec<_>>>()?;

    let n_tokens = calib.iter().map(Vec::len).sum();
    let layers = (0..cfg.n_layers)
        .map(|l| {
            let gather = |pick: fn(&(Matrix, Matrix)) -> &Matrix, g: usize| -> Result<Matrix> {
                let blocks: Vec<Matrix> = per_seq.iter().map(|s| pick(&s[l][g]).clone()).collect();
                Ok(Matrix::vstack(&blocks)?.transpose())
            };
            Ok(LayerCache {
                keys: (0..n_kv).map(|g| gather(|p| &p.0, g)).collect::<Result<_>>()?,
                values: (0..n_kv).map(|g| gather(|p| &p.1, g)).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(KVCacheSet {
        n_tokens,
        head_dim: cfg.head_dim,
        layers,
    })
}

pub fn save_kv_cache(cache: &KVCacheSet, path: &Path) -> Result<()> {
    cache.to_tensor_file()?.write(path)
}

pub fn load_kv_cache(path: &Path) -> Result<KVCacheSet> {
    KVCacheSet::from_tensor_file(&TensorFile::read_kind(path, KV_CACHE_KIND)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (ModelConfig, ModelWeights) {
        let cfg = ModelConfig::toy();
        let w = ModelWeights::random(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        (cfg, w)
    }

    #[test]
    fn token_count_and_shapes() {
        let (cfg, w) = toy();
        let calib = vec![(0..8).collect::<Vec<u32>>(), (100..108).collect()];
        let cache = collect_kv(&w, &cfg, &calib).unwrap();
        assert_eq!(cache.n_tokens, 16);
        assert_eq!(cache.n_layers(), 2);
        assert_eq!(cache.n_heads(), 8);
        assert_eq!(cache.layers[1].keys[3].shape(), (8, 16));
    }

    #[test]
    fn zero_value_projection_gives_zero_values() {
        let (cfg, mut w) = toy();
        for l in &mut w.layers {
            for v in &mut l.wv {
                v.data_mut().fill(0.0);
            }
        }
        let cache = collect_kv(&w, &cfg, &[vec![1, 2, 3]]).unwrap();
        for l in &cache.layers {
            for v in &l.values {
                assert!(v.data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn second_sequence_columns_match_standalone_run() {
        let (cfg, w) = toy();
        let a: Vec<u32> = vec![4, 5, 6];
        let b: Vec<u32> = vec![7, 8];
        let both = collect_kv(&w, &cfg, &[a, b.clone()]).unwrap();
        let only_b = collect_kv(&w, &cfg, &[b]).unwrap();
        let k = &both.layers[1].keys[2];
        assert_eq!(k.col_block(3, 2), only_b.layers[1].keys[2]);
    }

    #[test]
    fn empty_calibration_rejected() {
        let (cfg, w) = toy();
        assert!(matches!(collect_kv(&w, &cfg, &[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn file_round_trip() {
        let (cfg, w) = toy();
        let cache = collect_kv(&w, &cfg, &[vec![1, 2, 3, 4]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.kv");
        save_kv_cache(&cache, &p).unwrap();
        assert_eq!(load_kv_cache(&p).unwrap(), cache);
        let perm = [7, 6, 5, 4, 3, 2, 1, 0];
        let flipped = cache.permute_heads(&perm).unwrap();
        assert_eq!(flipped.layers[0].keys[0], cache.layers[0].keys[7]);
        assert!(cache.permute_heads(&[0, 0, 1, 2, 3, 4, 5, 6]).is_err());
    }
}
