//! Pairwise head similarity within a layer, before and after the best
//! orthogonal alignment of one head's cache onto the other's.
//!
//! Values may be aligned by any orthogonal matrix. Keys only by per-plane
//! rotations sharing the RoPE pairing, which commute with the position
//! rotations and can therefore be folded into `W_Q`/`W_K`.

mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fit_alignment, AlignmentKind, HeadAlignment, Matrix, Pairing};
use crate::model::KVCacheSet;
use crate::par;

pub use report::{export_similarity_report, read_similarity_report};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Key,
    Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Mean cosine similarity; alignment fit on unit-normalized tokens.
    Cos,
    /// Negative mean Euclidean distance; alignment fit on raw tokens.
    Dist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Original,
    After,
}

macro_rules! impl_label {
    ($ty:ty { $($variant:ident => $s:literal),+ }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $s),+ }
            }
        }

        impl std::str::FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        "unknown {} {other:?}", stringify!($ty).to_lowercase()
                    ))),
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

impl_label!(Target { Key => "key", Value => "value" });
impl_label!(Criterion { Cos => "cos", Dist => "dist" });
impl_label!(Stage { Original => "original", After => "after" });

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub layer: usize,
    pub target: Target,
    pub criterion: Criterion,
    pub stage: Stage,
    /// H × H, symmetric. The diagonal holds the self score (1 or 0).
    pub scores: Matrix,
    /// Token slots excluded from cosine averages because a vector was zero,
    /// summed over all unordered pairs.
    pub skipped_tokens: usize,
}

impl SimilarityMatrix {
    pub fn n_heads(&self) -> usize {
        self.scores.rows()
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[(i, j)]
    }
}

/// Aligning transforms for every ordered pair: `get(i, j)` maps head `j`'s
/// cache onto head `i`'s.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTransformTable {
    pub layer: usize,
    pub target: Target,
    pub criterion: Criterion,
    transforms: Vec<Vec<HeadAlignment>>,
}

impl PairTransformTable {
    pub fn get(&self, i: usize, j: usize) -> &HeadAlignment {
        &self.transforms[i][j]
    }

    pub fn n_heads(&self) -> usize {
        self.transforms.len()
    }
}

pub fn alignment_kind(target: Target, pairing: Pairing) -> AlignmentKind {
    match target {
        Target::Value => AlignmentKind::Orthogonal,
        Target::Key => AlignmentKind::BlockRotation(pairing),
    }
}

fn layer_heads(cache: &KVCacheSet, layer: usize, target: Target) -> Result<&[Matrix]> {
    let l = cache.layers.get(layer).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "layer {layer} out of range ({} layers)",
            cache.n_layers()
        ))
    })?;
    let heads = match target {
        Target::Key => &l.keys,
        Target::Value => &l.values,
    };
    if cache.n_tokens == 0 || heads.is_empty() {
        return Err(Error::InvalidArgument("similarity needs at least one token".into()));
    }
    if heads.iter().all(|h| h.data().iter().all(|&v| v == 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} {target} cache is entirely zero"
        )));
    }
    for h in heads {
        h.ensure_finite("kv cache")?;
    }
    Ok(heads)
}

/// Score of `x` against `y`, column by column. Returns (score, skipped).
fn score_columns(y: &Matrix, x: &Matrix, criterion: Criterion) -> (f64, usize) {
    let (d, n) = y.shape();
    let mut total = 0.0;
    let mut used = 0usize;
    for t in 0..n {
        let mut dot = 0.0;
        let mut yy = 0.0;
        let mut xx = 0.0;
        let mut dist = 0.0;
        for r in 0..d {
            let a = y[(r, t)];
            let b = x[(r, t)];
            dot += a * b;
            yy += a * a;
            xx += b * b;
            dist += (a - b) * (a - b);
        }
        match criterion {
            Criterion::Cos => {
                if yy > 0.0 && xx > 0.0 {
                    total += dot / (yy.sqrt() * xx.sqrt());
                    used += 1;
                }
            }
            Criterion::Dist => {
                total -= dist.sqrt();
                used += 1;
            }
        }
    }
    let skipped = n - used;
    if used == 0 {
        (0.0, skipped)
    } else {
        (total / used as f64, skipped)
    }
}

fn self_score(criterion: Criterion) -> f64 {
    match criterion {
        Criterion::Cos => 1.0,
        Criterion::Dist => 0.0,
    }
}

fn upper_pairs(h: usize) -> Vec<(usize, usize)> {
    (0..h).flat_map(|i| (i + 1..h).map(move |j| (i, j))).collect()
}

/// Unaligned similarity: mean cosine (or negative mean distance) between the
/// two heads' token vectors.
pub fn original_similarity(
    cache: &KVCacheSet,
    layer: usize,
    target: Target,
    criterion: Criterion,
) -> Result<SimilarityMatrix> {
    let heads = layer_heads(cache, layer, target)?;
    let h = heads.len();
    let mut scores = Matrix::identity(h).scale(self_score(criterion));
    let mut skipped_tokens = 0;
    for (i, j) in upper_pairs(h) {
        let (s, skipped) = score_columns(&heads[i], &heads[j], criterion);
        scores[(i, j)] = s;
        scores[(j, i)] = s;
        skipped_tokens += skipped;
    }
    Ok(SimilarityMatrix {
        layer,
        target,
        criterion,
        stage: Stage::Original,
        scores,
        skipped_tokens,
    })
}

/// Best alignment of head `j` onto head `i` and the resulting score.
///
/// For `Dist` the Procrustes fit minimizes the summed *squared* distance;
/// if that ever scores worse than leaving the head alone on the mean
/// (unsquared) distance, the identity is kept instead.
pub fn aligned_pair(
    heads: &[Matrix],
    i: usize,
    j: usize,
    target: Target,
    criterion: Criterion,
    pairing: Pairing,
) -> Result<(f64, usize, HeadAlignment)> {
    let kind = alignment_kind(target, pairing);
    let (y, x) = (&heads[i], &heads[j]);
    let t = match criterion {
        Criterion::Cos => fit_alignment(&x.normalize_columns(), &y.normalize_columns(), kind)?,
        Criterion::Dist => fit_alignment(x, y, kind)?,
    };
    let (score, skipped) = score_columns(y, &t.apply(x), criterion);
    if criterion == Criterion::Dist {
        let (plain, _) = score_columns(y, x, criterion);
        if plain > score {
            return Ok((plain, skipped, HeadAlignment::identity(y.rows(), kind)));
        }
    }
    Ok((score, skipped, t))
}

pub fn aligned_similarity(
    cache: &KVCacheSet,
    layer: usize,
    target: Target,
    criterion: Criterion,
    pairing: Pairing,
) -> Result<(SimilarityMatrix, PairTransformTable)> {
    let heads = layer_heads(cache, layer, target)?;
    let h = heads.len();
    let kind = alignment_kind(target, pairing);
    let pairs = upper_pairs(h);
    let fitted = par::map(&pairs, |&(i, j)| aligned_pair(heads, i, j, target, criterion, pairing));

    let mut scores = Matrix::identity(h).scale(self_score(criterion));
    let mut transforms: Vec<Vec<HeadAlignment>> = (0..h)
        .map(|_| (0..h).map(|_| HeadAlignment::identity(cache.head_dim, kind)).collect())
        .collect();
    let mut skipped_tokens = 0;
    for (&(i, j), fit) in pairs.iter().zip(fitted) {
        let (s, skipped, t) = fit?;
        scores[(i, j)] = s;
        scores[(j, i)] = s;
        skipped_tokens += skipped;
        // the optimal reverse alignment is the inverse transform
        transforms[j][i] = inverse(&t);
        transforms[i][j] = t;
    }
    Ok((
        SimilarityMatrix {
            layer,
            target,
            criterion,
            stage: Stage::After,
            scores,
            skipped_tokens,
        },
        PairTransformTable {
            layer,
            target,
            criterion,
            transforms,
        },
    ))
}

fn inverse(t: &HeadAlignment) -> HeadAlignment {
    match t {
        HeadAlignment::Orthogonal(o) => HeadAlignment::Orthogonal(o.transpose()),
        HeadAlignment::Rotation(r) => HeadAlignment::Rotation(r.inverse()),
    }
}

/// Original and aligned matrices for every layer and both targets under one
/// criterion, in report order.
pub fn analyze_cache(
    cache: &KVCacheSet,
    criterion: Criterion,
    pairing: Pairing,
) -> Result<Vec<SimilarityMatrix>> {
    let mut out = Vec::new();
    for layer in 0..cache.n_layers() {
        for target in [Target::Key, Target::Value] {
            out.push(original_similarity(cache, layer, target, criterion)?);
            out.push(aligned_similarity(cache, layer, target, criterion, pairing)?.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{BlockRotation, OrthogonalTransform};
    use crate::model::LayerCache;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cache_of(keys: Vec<Matrix>, values: Vec<Matrix>) -> KVCacheSet {
        KVCacheSet {
            n_tokens: keys[0].cols(),
            head_dim: keys[0].rows(),
            layers: vec![LayerCache { keys, values }],
        }
    }

    fn random_cache(h: usize, d: usize, n: usize, seed: u64) -> KVCacheSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys = (0..h).map(|_| Matrix::random_normal(d, n, 1.0, &mut rng)).collect();
        let values = (0..h).map(|_| Matrix::random_normal(d, n, 1.0, &mut rng)).collect();
        cache_of(keys, values)
    }

    #[test]
    fn copies_and_negations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::random_normal(4, 10, 1.0, &mut rng);
        let c = cache_of(vec![a.clone(), a.clone(), a.scale(-1.0)], vec![a.clone(), a.clone(), a.scale(-1.0)]);
        let s = original_similarity(&c, 0, Target::Value, Criterion::Cos).unwrap();
        assert!((s.score(0, 1) - 1.0).abs() < 1e-15);
        assert!((s.score(0, 2) + 1.0).abs() < 1e-15);
        let d = original_similarity(&c, 0, Target::Key, Criterion::Dist).unwrap();
        assert_eq!(d.score(0, 1), 0.0);
    }

    #[test]
    fn hand_computed_two_token_mean() {
        // token 0: (1,0) vs (1,1) -> 1/√2 ; token 1: (0,2) vs (3,0) -> 0
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![1.0, 3.0], vec![1.0, 0.0]]).unwrap();
        let c = cache_of(vec![x.clone(), y.clone()], vec![x, y]);
        let s = original_similarity(&c, 0, Target::Key, Criterion::Cos).unwrap();
        let want = (1.0 / 2f64.sqrt() + 0.0) / 2.0;
        assert!((s.score(0, 1) - want).abs() < 1e-15);
    }

    #[test]
    fn zero_tokens_skipped_and_all_zero_rejected() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let c = cache_of(vec![x.clone(), y.clone()], vec![x, y]);
        let s = original_similarity(&c, 0, Target::Value, Criterion::Cos).unwrap();
        assert_eq!(s.skipped_tokens, 1);
        assert!((s.score(0, 1) - 1.0).abs() < 1e-15);
        let z = cache_of(vec![Matrix::zeros(2, 3); 2], vec![Matrix::zeros(2, 3); 2]);
        assert!(original_similarity(&z, 0, Target::Key, Criterion::Cos).is_err());
    }

    #[test]
    fn rotated_value_head_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Matrix::random_normal(6, 30, 1.0, &mut rng);
        let q = crate::linalg::svd(&Matrix::random_normal(6, 6, 1.0, &mut rng)).unwrap();
        let r = OrthogonalTransform { q: q.u.matmul(&q.vt) };
        let c = cache_of(vec![a.clone(), a.clone()], vec![a.clone(), r.apply(&a)]);
        let (s, _) = aligned_similarity(&c, 0, Target::Value, Criterion::Cos, Pairing::HalfSplit).unwrap();
        assert!((s.score(0, 1) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rotated_key_head_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::random_normal(6, 30, 1.0, &mut rng);
        let rot = BlockRotation { angles: vec![0.3, 1.9, -2.2], pairing: Pairing::HalfSplit };
        let c = cache_of(vec![a.clone(), rot.apply(&a)], vec![a.clone(), a.clone()]);
        for crit in [Criterion::Cos, Criterion::Dist] {
            let (s, t) = aligned_similarity(&c, 0, Target::Key, crit, Pairing::HalfSplit).unwrap();
            assert!((s.score(0, 1) - self_score(crit)).abs() < 1e-10);
            assert!(t.get(0, 1).matrix().max_abs_diff(&rot.inverse().to_matrix()) < 1e-10);
        }
    }

    #[test]
    fn identical_heads_have_zero_aligned_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Matrix::random_normal(4, 12, 1.0, &mut rng);
        let c = cache_of(vec![a.clone(), a.clone()], vec![a.clone(), a]);
        let (s, _) = aligned_similarity(&c, 0, Target::Value, Criterion::Dist, Pairing::HalfSplit).unwrap();
        assert!(s.score(0, 1).abs() < 1e-12);
    }

    #[test]
    fn alignment_never_hurts_and_is_symmetric() {
        let c = random_cache(5, 6, 40, 5);
        let heads = &c.layers[0].values;
        for target in [Target::Key, Target::Value] {
            for crit in [Criterion::Cos, Criterion::Dist] {
                let ori = original_similarity(&c, 0, target, crit).unwrap();
                let (after, _) = aligned_similarity(&c, 0, target, crit, Pairing::HalfSplit).unwrap();
                for i in 0..5 {
                    for j in 0..5 {
                        assert!(after.score(i, j) >= ori.score(i, j) - 1e-12);
                    }
                }
            }
        }
        for crit in [Criterion::Cos, Criterion::Dist] {
            for (i, j) in upper_pairs(5) {
                let (a, _, _) = aligned_pair(heads, i, j, Target::Value, crit, Pairing::HalfSplit).unwrap();
                let (b, _, _) = aligned_pair(heads, j, i, Target::Value, crit, Pairing::HalfSplit).unwrap();
                assert!((a - b).abs() < 1e-10, "{crit} ({i},{j}): {a} vs {b}");
            }
        }
    }
}
