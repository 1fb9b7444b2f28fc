use super::rope::RopeTable;
use super::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Receives the pre-RoPE keys and the values (both T × d_H) of every KV
/// head as the forward pass produces them.
pub trait AttentionObserver {
    fn observe(&mut self, layer: usize, kv_head: usize, keys: &Matrix, values: &Matrix);
}

impl<F: FnMut(usize, usize, &Matrix, &Matrix)> AttentionObserver for F {
    fn observe(&mut self, layer: usize, kv_head: usize, keys: &Matrix, values: &Matrix) {
        self(layer, kv_head, keys, values)
    }
}

struct NoObserver;

impl AttentionObserver for NoObserver {
    fn observe(&mut self, _: usize, _: usize, _: &Matrix, _: &Matrix) {}
}

/// Logits laid out vocab × positions.
pub fn forward(weights: &ModelWeights, cfg: &ModelConfig, tokens: &[u32]) -> Result<Matrix> {
    Ok(forward_positions(weights, cfg, tokens)?.transpose())
}

/// Logits laid out positions × vocab (one row per input token).
pub fn forward_positions(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<Matrix> {
    forward_with_observer(weights, cfg, tokens, &mut NoObserver)
}

pub fn forward_with_observer(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[u32],
    observer: &mut dyn AttentionObserver,
) -> Result<Matrix> {
    check_tokens(cfg, tokens)?;
    let rope = RopeTable::new(cfg.head_dim, cfg.rope_base, cfg.rope_pairing);
    let d = cfg.d_model;
    let mut x = Matrix::from_fn(tokens.len(), d, |t, c| weights.embed[(tokens[t] as usize, c)]);

    for (l, layer) in weights.layers.iter().enumerate() {
        let u = rms_norm(&x, &layer.attn_norm, cfg.norm_eps);
        let mut kv_rot = Vec::with_capacity(cfg.n_kv_heads);
        for g in 0..cfg.n_kv_heads {
            let k = u.matmul_t(&layer.wk[g]);
            let v = u.matmul_t(&layer.wv[g]);
            observer.observe(l, g, &k, &v);
            kv_rot.push((rope.rotate_rows(&k, 0), v));
        }
        // attention output is the plain sum over heads of W_O,i · head_i
        for h in 0..cfg.n_heads {
            let (k, v) = &kv_rot[cfg.kv_head_of(h)];
            let q = rope.rotate_rows(&u.matmul_t(&layer.wq[h]), 0);
            let mut scores = q.matmul_t(k).scale(1.0 / (cfg.head_dim as f64).sqrt());
            causal_softmax_in_place(&mut scores);
            let head_out = scores.matmul(v);
            x.axpy(1.0, &head_out.matmul_t(&layer.wo[h]));
        }
        let u = rms_norm(&x, &layer.ffn_norm, cfg.norm_eps);
        let gate = u.matmul_t(&layer.w_gate);
        let up = u.matmul_t(&layer.w_up);
        let act = gate.zip_map(&up, |g, u| silu(g) * u);
        x.axpy(1.0, &act.matmul_t(&layer.w_down));
    }
    let h = rms_norm(&x, &weights.final_norm, cfg.norm_eps);
    Ok(h.matmul_t(&weights.lm_head))
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

pub(crate) fn rms_norm(x: &Matrix, gain: &Matrix, eps: f64) -> Matrix {
    let d = x.cols();
    let mut out = x.clone();
    for t in 0..x.rows() {
        let row = x.row(t);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for (o, (&v, &g)) in out.row_mut(t).iter_mut().zip(row.iter().zip(gain.data())) {
            *o = v * inv * g;
        }
    }
    out
}

pub(crate) fn causal_softmax_in_place(scores: &mut Matrix) {
    for t in 0..scores.rows() {
        let row = scores.row_mut(t);
        let visible = t + 1;
        let max = row[..visible].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row[..visible].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row[..visible].iter_mut() {
            *v /= sum;
        }
        row[visible..].fill(0.0);
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (ModelConfig, ModelWeights) {
        let cfg = ModelConfig::toy();
        let w = ModelWeights::random(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        (cfg, w)
    }

    #[test]
    fn deterministic_and_shaped() {
        let (cfg, w) = toy();
        let tokens = [5, 17, 200, 3, 3, 99];
        let a = forward(&w, &cfg, &tokens).unwrap();
        let b = forward(&w, &cfg, &tokens).unwrap();
        assert_eq!(a.shape(), (cfg.vocab_size, tokens.len()));
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(forward(&w, &cfg, &[42]).unwrap().shape(), (cfg.vocab_size, 1));
    }

    #[test]
    fn out_of_range_token_rejected() {
        let (cfg, w) = toy();
        assert!(matches!(
            forward(&w, &cfg, &[1, 256]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(forward(&w, &cfg, &[]).is_err());
    }

    #[test]
    fn causal_prefix_consistency() {
        let (cfg, w) = toy();
        let tokens = [9, 8, 7, 6, 5];
        let full = forward_positions(&w, &cfg, &tokens).unwrap();
        let prefix = forward_positions(&w, &cfg, &tokens[..3]).unwrap();
        assert!(full.row_block(0, 3).max_abs_diff(&prefix) < 1e-12);
    }

    #[test]
    fn head_permutation_is_invisible() {
        let (cfg, w) = toy();
        let mut p = w.clone();
        for l in &mut p.layers {
            l.wq.swap(0, 5);
            l.wk.swap(0, 5);
            l.wv.swap(0, 5);
            l.wo.swap(0, 5);
        }
        let tokens = [1, 2, 3, 4, 5, 6, 7, 8];
        let a = forward(&w, &cfg, &tokens).unwrap();
        let b = forward(&p, &cfg, &tokens).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn singleton_groups_match_mha() {
        let (cfg, w) = toy();
        // n_kv_heads == n_heads is GQA with one query head per group
        let gqa_cfg = cfg.with_kv_heads(cfg.n_heads);
        let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
        let a = forward(&w, &cfg, &tokens).unwrap();
        let b = forward(&w, &gqa_cfg, &tokens).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn shared_kv_heads_equal_duplicated_mha() {
        let (cfg, w) = toy();
        let gqa_cfg = cfg.with_kv_heads(2);
        let mut gqa = w.clone();
        for l in &mut gqa.layers {
            l.wk = vec![l.wk[0].clone(), l.wk[4].clone()];
            l.wv = vec![l.wv[0].clone(), l.wv[4].clone()];
        }
        let mut mha = w.clone();
        for (lm, lg) in mha.layers.iter_mut().zip(&gqa.layers) {
            for h in 0..8 {
                lm.wk[h] = lg.wk[h / 4].clone();
                lm.wv[h] = lg.wv[h / 4].clone();
            }
        }
        let tokens = [10, 20, 30, 40, 50];
        let a = forward(&mha, &cfg, &tokens).unwrap();
        let b = forward(&gqa, &gqa_cfg, &tokens).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
