//! Regroup heads and fuse per-head orthogonal alignments into the attention
//! projections without changing what the model computes.
//!
//! Values: `W_V ← Q·W_V`, `W_O ← W_O·Qᵀ`, so `W_O·W_V` is untouched.
//! Keys: `W_Q ← R·W_Q`, `W_K ← R·W_K` with `R` rotating the same planes as
//! RoPE, so `R` commutes with every positional rotation and cancels in `qᵀk`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::GroupingPlan;
use crate::linalg::{
    generalized_procrustes, AlignmentKind, BlockRotation, GpaOptions, HeadAlignment, Matrix,
    OrthogonalTransform,
};
use crate::model::{forward_positions, KVCacheSet, ModelConfig, ModelWeights};
use crate::par;
use crate::similarity::Criterion;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTransforms {
    /// New slot `k` holds original head `permutation[k]`.
    pub permutation: Vec<usize>,
    /// Indexed by new slot.
    pub value: Vec<OrthogonalTransform>,
    pub key: Vec<BlockRotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadTransformSet {
    pub criterion: Criterion,
    pub layers: Vec<LayerTransforms>,
}

impl HeadTransformSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn check_plan(cfg: &ModelConfig, plan: &GroupingPlan) -> Result<()> {
    plan.validate()?;
    if !cfg.is_mha() {
        return Err(Error::InvalidArgument(
            "regrouping and alignment need an MHA model".into(),
        ));
    }
    if plan.n_heads != cfg.n_heads || plan.layers.len() != cfg.n_layers {
        return Err(Error::Shape(format!(
            "plan covers {} layers × {} heads, model has {} × {}",
            plan.layers.len(),
            plan.n_heads,
            cfg.n_layers,
            cfg.n_heads
        )));
    }
    Ok(())
}

fn permute<T: Clone>(items: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&p| items[p].clone()).collect()
}

/// Reorders each layer's heads so that every group of `plan` is contiguous.
pub fn regroup_heads(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    plan: &GroupingPlan,
) -> Result<ModelWeights> {
    check_plan(cfg, plan)?;
    weights.validate(cfg)?;
    let mut out = weights.clone();
    for (layer, lp) in out.layers.iter_mut().zip(&plan.layers) {
        let perm = lp.permutation();
        layer.wq = permute(&layer.wq, &perm);
        layer.wk = permute(&layer.wk, &perm);
        layer.wv = permute(&layer.wv, &perm);
        layer.wo = permute(&layer.wo, &perm);
    }
    Ok(out)
}

fn prepare(x: &Matrix, criterion: Criterion) -> Matrix {
    match criterion {
        Criterion::Cos => x.normalize_columns(),
        Criterion::Dist => x.clone(),
    }
}

/// Runs generalized Procrustes inside every group and fuses the result.
///
/// `weights` and `cache` must already be in group order (see
/// [`regroup_heads`] and [`KVCacheSet::permute_heads`]): group `g` occupies
/// slots `g·D .. (g+1)·D`.
pub fn align_groups(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    cache: &KVCacheSet,
    plan: &GroupingPlan,
    criterion: Criterion,
    opts: GpaOptions,
) -> Result<(ModelWeights, HeadTransformSet)> {
    check_plan(cfg, plan)?;
    weights.validate(cfg)?;
    if cache.n_layers() != cfg.n_layers
        || cache.n_heads() != cfg.n_heads
        || cache.head_dim != cfg.head_dim
    {
        return Err(Error::Shape(format!(
            "cache holds {} layers × {} heads of dim {}, model needs {} × {} of dim {}",
            cache.n_layers(),
            cache.n_heads(),
            cache.head_dim,
            cfg.n_layers,
            cfg.n_heads,
            cfg.head_dim
        )));
    }
    let d = plan.group_size();
    let key_kind = AlignmentKind::BlockRotation(cfg.rope_pairing);
    let layer_ids: Vec<usize> = (0..cfg.n_layers).collect();

    let fitted = par::map(&layer_ids, |&l| -> Result<(Vec<OrthogonalTransform>, Vec<BlockRotation>)> {
        let lc = &cache.layers[l];
        let mut value = Vec::with_capacity(cfg.n_heads);
        let mut key = Vec::with_capacity(cfg.n_heads);
        for g in 0..plan.n_groups {
            let members = g * d..(g + 1) * d;
            if d == 1 {
                value.push(OrthogonalTransform::identity(cfg.head_dim));
                key.push(BlockRotation::identity(cfg.head_dim, cfg.rope_pairing));
                continue;
            }
            let vs: Vec<Matrix> = lc.values[members.clone()].iter().map(|x| prepare(x, criterion)).collect();
            let ks: Vec<Matrix> = lc.keys[members].iter().map(|x| prepare(x, criterion)).collect();
            for t in generalized_procrustes(&vs, AlignmentKind::Orthogonal, opts)?.transforms {
                match t {
                    HeadAlignment::Orthogonal(q) => value.push(q),
                    HeadAlignment::Rotation(_) => unreachable!(),
                }
            }
            for t in generalized_procrustes(&ks, key_kind, opts)?.transforms {
                match t {
                    HeadAlignment::Rotation(r) => key.push(r),
                    HeadAlignment::Orthogonal(_) => unreachable!(),
                }
            }
        }
        Ok((value, key))
    });

    let mut out = weights.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for ((layer, fit), lp) in out.layers.iter_mut().zip(fitted).zip(&plan.layers) {
        let (value, key) = fit?;
        fuse_layer(layer, &value, &key);
        layers.push(LayerTransforms {
            permutation: lp.permutation(),
            value,
            key,
        });
    }
    Ok((out, HeadTransformSet { criterion, layers }))
}

fn fuse_layer(
    layer: &mut crate::model::LayerWeights,
    value: &[OrthogonalTransform],
    key: &[BlockRotation],
) {
    for h in 0..layer.wq.len() {
        let q = &value[h].q;
        layer.wv[h] = q.matmul(&layer.wv[h]);
        layer.wo[h] = layer.wo[h].matmul_t(q);
        layer.wq[h] = key[h].apply(&layer.wq[h]);
        layer.wk[h] = key[h].apply(&layer.wk[h]);
    }
}

/// Regroup, permute the cache to match, then align. `cache` is the one
/// collected from the original (un-permuted) model.
pub fn transform_model(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    cache: &KVCacheSet,
    plan: &GroupingPlan,
    criterion: Criterion,
    opts: GpaOptions,
) -> Result<(ModelWeights, HeadTransformSet)> {
    let regrouped = regroup_heads(weights, cfg, plan)?;
    let mut layers = Vec::with_capacity(cache.n_layers());
    for (l, lp) in plan.layers.iter().enumerate() {
        let one = KVCacheSet {
            n_tokens: cache.n_tokens,
            head_dim: cache.head_dim,
            layers: vec![cache
                .layers
                .get(l)
                .ok_or_else(|| Error::Shape(format!("cache has no layer {l}")))?
                .clone()],
        };
        layers.extend(one.permute_heads(&lp.permutation())?.layers);
    }
    let permuted = KVCacheSet {
        n_tokens: cache.n_tokens,
        head_dim: cache.head_dim,
        layers,
    };
    align_groups(&regrouped, cfg, &permuted, plan, criterion, opts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub n_seq: usize,
    pub seq_len: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            n_seq: 32,
            seq_len: 16,
            tol: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub n_seq: usize,
    pub seq_len: usize,
    pub max_abs: f64,
    /// `max_abs` divided by the largest reference logit magnitude.
    pub max_rel: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Random token sequences shared by both models.
pub fn random_sequences(n_seq: usize, seq_len: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_seq)
        .map(|_| (0..seq_len).map(|_| rng.random_range(0..vocab as u32)).collect())
        .collect()
}

pub fn verify_invariance(
    before: (&ModelWeights, &ModelConfig),
    after: (&ModelWeights, &ModelConfig),
    opts: VerifyOptions,
) -> Result<InvarianceReport> {
    let (wa, ca) = before;
    let (wb, cb) = after;
    let same = ca.d_model == cb.d_model
        && ca.n_heads == cb.n_heads
        && ca.head_dim == cb.head_dim
        && ca.n_layers == cb.n_layers
        && ca.d_ff == cb.d_ff
        && ca.vocab_size == cb.vocab_size
        && ca.rope_base == cb.rope_base
        && ca.rope_pairing == cb.rope_pairing
        && ca.norm_eps == cb.norm_eps;
    if !same {
        return Err(Error::Shape(
            "models differ in configuration beyond the KV head count".into(),
        ));
    }
    if opts.n_seq == 0 || opts.seq_len == 0 {
        return Err(Error::InvalidArgument("verification needs at least one token".into()));
    }
    wa.validate(ca)?;
    wb.validate(cb)?;
    let seqs = random_sequences(opts.n_seq, opts.seq_len, ca.vocab_size, opts.seed);
    let diffs = par::map(&seqs, |s| -> Result<(f64, f64)> {
        let a = forward_positions(wa, ca, s)?;
        let b = forward_positions(wb, cb, s)?;
        Ok((a.max_abs_diff(&b), a.max_abs()))
    });
    let mut max_abs: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for d in diffs {
        let (diff, mag) = d?;
        // NaN must fail the check rather than vanish in max()
        max_abs = if diff.is_nan() { f64::NAN } else { max_abs.max(diff) };
        scale = scale.max(mag);
    }
    let max_rel = if scale > 0.0 { max_abs / scale } else { max_abs };
    Ok(InvarianceReport {
        n_seq: opts.n_seq,
        seq_len: opts.seq_len,
        max_abs,
        max_rel,
        tol: opts.tol,
        passed: max_abs <= opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::{default_grouping, GroupingMode, LayerGrouping};
    use crate::model::collect_kv;
    use crate::model::RopeTable;

    fn toy() -> (ModelWeights, ModelConfig) {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        (ModelWeights::random(&cfg, &mut rng).unwrap(), cfg)
    }

    fn plan_with(cfg: &ModelConfig, groups: Vec<Vec<usize>>) -> GroupingPlan {
        GroupingPlan {
            mode: GroupingMode::Value,
            criterion: Criterion::Cos,
            n_heads: cfg.n_heads,
            n_groups: groups.len(),
            layers: vec![LayerGrouping { groups, score: 0.0 }; cfg.n_layers],
        }
    }

    fn opts(tol: f64) -> VerifyOptions {
        VerifyOptions { n_seq: 8, seq_len: 12, tol, seed: 3 }
    }

    #[test]
    fn default_plan_regroup_is_identity() {
        let (w, cfg) = toy();
        let plan = GroupingPlan::adjacent(cfg.n_layers, cfg.n_heads, 4, Criterion::Cos).unwrap();
        assert_eq!(regroup_heads(&w, &cfg, &plan).unwrap(), w);
    }

    #[test]
    fn swapping_heads_keeps_logits() {
        let (w, cfg) = toy();
        let mut groups = default_grouping(8, 4).unwrap().groups;
        groups[0] = vec![1, 0];
        let p = regroup_heads(&w, &cfg, &plan_with(&cfg, groups)).unwrap();
        assert_eq!(p.layers[0].wq[0], w.layers[0].wq[1]);
        assert_eq!(p.layers[0].wo[1], w.layers[0].wo[0]);
        let r = verify_invariance((&w, &cfg), (&p, &cfg), opts(1e-12)).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn invalid_plan_rejected() {
        let (w, cfg) = toy();
        let plan = plan_with(&cfg, vec![vec![0, 1, 2], vec![3, 4, 5]]);
        assert!(regroup_heads(&w, &cfg, &plan).is_err());
    }

    #[test]
    fn singleton_groups_leave_weights_alone() {
        let (w, cfg) = toy();
        let calib = random_sequences(2, 10, cfg.vocab_size, 1);
        let cache = collect_kv(&w, &cfg, &calib).unwrap();
        let plan = GroupingPlan::adjacent(cfg.n_layers, 8, 8, Criterion::Cos).unwrap();
        let (out, set) = align_groups(&w, &cfg, &cache, &plan, Criterion::Cos, GpaOptions::default()).unwrap();
        assert_eq!(out, w);
        assert!(set.layers[0].value.iter().all(|t| t.q == Matrix::identity(8)));
    }

    #[test]
    fn full_pipeline_is_invariant_and_fuses_cleanly() {
        let (w, cfg) = toy();
        let calib = random_sequences(4, 16, cfg.vocab_size, 2);
        let cache = collect_kv(&w, &cfg, &calib).unwrap();
        let plan = plan_with(&cfg, vec![vec![0, 5], vec![1, 7], vec![2, 3], vec![4, 6]]);
        for criterion in [Criterion::Cos, Criterion::Dist] {
            let (out, set) =
                transform_model(&w, &cfg, &cache, &plan, criterion, GpaOptions::default()).unwrap();
            let r = verify_invariance((&w, &cfg), (&out, &cfg), opts(1e-8)).unwrap();
            assert!(r.passed, "{criterion}: {r:?}");
            let p = regroup_heads(&w, &cfg, &plan).unwrap();
            for h in 0..8 {
                let before = p.layers[1].wo[h].matmul(&p.layers[1].wv[h]);
                let after = out.layers[1].wo[h].matmul(&out.layers[1].wv[h]);
                assert!(before.max_abs_diff(&after) < 1e-13);
                assert!(set.layers[1].value[h].q.orthogonality_error() < 1e-12);
            }
        }
    }

    #[test]
    fn key_rotation_commutes_with_rope() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rope = RopeTable::new(8, 10_000.0, Default::default());
        for _ in 0..10 {
            let angles: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let r = BlockRotation { angles, pairing: Default::default() }.to_matrix();
            let off = rng.random_range(-50.0..50.0);
            let rt = rope.rotation(off).to_matrix();
            let lhs = r.t_matmul(&rt).matmul(&r);
            assert!(lhs.max_abs_diff(&rt) < 1e-12);
        }
    }

    #[test]
    fn corrupted_output_projection_fails() {
        let (w, cfg) = toy();
        let mut bad = w.clone();
        bad.layers[0].wo[3][(0, 0)] += 1e-3;
        let r = verify_invariance((&w, &cfg), (&bad, &cfg), opts(1e-8)).unwrap();
        assert!(!r.passed);
        assert!(r.max_abs > 1e-8);
    }

    #[test]
    fn config_mismatch_rejected() {
        let (w, cfg) = toy();
        let mut other = cfg.clone();
        other.d_ff = 64;
        assert!(verify_invariance((&w, &cfg), (&w, &other), opts(1e-8)).is_err());
    }

    #[test]
    fn transform_set_round_trip() {
        let (w, cfg) = toy();
        let cache = collect_kv(&w, &cfg, &random_sequences(1, 8, 256, 0)).unwrap();
        let plan = GroupingPlan::adjacent(2, 8, 2, Criterion::Dist).unwrap();
        let (_, set) = align_groups(&w, &cfg, &cache, &plan, Criterion::Dist, GpaOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        set.save(&p).unwrap();
        assert_eq!(HeadTransformSet::load(&p).unwrap(), set);
    }
}
