//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function takes plain numbers and returns a JSON string, so
//! the page needs no glue beyond `JSON.parse`.

use gqa_core::grouping::{search_grouping, SearchConfig};
use gqa_core::linalg::{orthogonal_procrustes, Matrix};
use gqa_core::model::{KVCacheSet, LayerCache};
use gqa_core::pruning::{HardConcrete, TrainSchedule};
use gqa_core::similarity::{aligned_similarity, original_similarity, Criterion, Target};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct AlignmentDemo {
    pub source: Vec<[f64; 2]>,
    pub target: Vec<[f64; 2]>,
    pub aligned: Vec<[f64; 2]>,
    pub true_angle: f64,
    pub recovered_angle: f64,
    pub rmse_before: f64,
    pub rmse_after: f64,
}

/// A random 2D point cloud, a rotated noisy copy of it, and the Procrustes
/// rotation that maps the first back onto the second.
pub fn alignment(n_points: usize, angle: f64, noise: f64, seed: u64) -> Result<AlignmentDemo, String> {
    if n_points < 2 {
        return Err("need at least two points".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(2, n_points, |r, _| {
        let s = if r == 0 { 1.0 } else { 0.45 };
        s * (rng.random::<f64>() * 2.0 - 1.0)
    });
    let (c, s) = (angle.cos(), angle.sin());
    let rot = Matrix::new(2, 2, vec![c, -s, s, c]).map_err(|e| e.to_string())?;
    let mut y = rot.matmul(&x);
    for v in y.data_mut() {
        *v += noise * (rng.random::<f64>() * 2.0 - 1.0);
    }
    let q = orthogonal_procrustes(&x, &y).map_err(|e| e.to_string())?;
    let aligned = q.apply(&x);
    let rmse = |a: &Matrix| (a.sub(&y).frobenius_norm_sq() / n_points as f64).sqrt();
    let cols = |m: &Matrix| (0..n_points).map(|t| [m[(0, t)], m[(1, t)]]).collect();
    Ok(AlignmentDemo {
        source: cols(&x),
        target: cols(&y),
        aligned: cols(&aligned),
        true_angle: angle,
        recovered_angle: q.q[(1, 0)].atan2(q.q[(0, 0)]),
        rmse_before: rmse(&x),
        rmse_after: rmse(&aligned),
    })
}

#[derive(Debug, Serialize)]
pub struct GroupingDemo {
    pub original: Vec<Vec<f64>>,
    pub after: Vec<Vec<f64>>,
    pub groups: Vec<Vec<usize>>,
    /// Which prototype each head was rotated from.
    pub families: Vec<usize>,
    pub score: f64,
}

/// Synthetic value caches where heads are random rotations of a few
/// prototypes. Raw cosine similarity cannot see the families; aligned
/// similarity can, and the grouping search recovers them.
pub fn grouping(n_heads: usize, n_groups: usize, noise: f64, seed: u64) -> Result<GroupingDemo, String> {
    if n_groups == 0 || n_heads % n_groups != 0 {
        return Err(format!("{n_groups} groups do not split {n_heads} heads evenly"));
    }
    let (d, n) = (4, 96);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| {
        // Box-Muller keeps the demo free of extra distributions
        let u: f64 = rng.random::<f64>().max(1e-300);
        let v: f64 = rng.random();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    };
    let protos: Vec<Matrix> = (0..n_groups)
        .map(|_| Matrix::from_fn(d, n, |_, _| gauss(&mut rng)))
        .collect();
    let mut families: Vec<usize> = (0..n_heads).map(|h| h % n_groups).collect();
    for i in (1..n_heads).rev() {
        families.swap(i, rng.random_range(0..=i));
    }
    let values = families
        .iter()
        .map(|&f| {
            let a = Matrix::from_fn(d, d, |_, _| gauss(&mut rng));
            let q = orthogonal_procrustes(&a, &Matrix::identity(d)).map_err(|e| e.to_string())?;
            let mut v = q.apply(&protos[f]);
            for x in v.data_mut() {
                *x += noise * gauss(&mut rng);
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>, String>>()?;
    let cache = KVCacheSet {
        n_tokens: n,
        head_dim: d,
        layers: vec![LayerCache {
            keys: values.clone(),
            values,
        }],
    };
    let err = |e: gqa_core::Error| e.to_string();
    let orig = original_similarity(&cache, 0, Target::Value, Criterion::Cos).map_err(err)?;
    let (after, _) =
        aligned_similarity(&cache, 0, Target::Value, Criterion::Cos, Default::default()).map_err(err)?;
    let cfg = SearchConfig {
        epochs: 8,
        max_iter: 400,
        rng_seed: seed,
        temperature: None,
    };
    let found = search_grouping(&after, n_groups, &cfg).map_err(err)?;
    let table = |m: &Matrix| (0..n_heads).map(|i| m.row(i).to_vec()).collect();
    Ok(GroupingDemo {
        original: table(&orig.scores),
        after: table(&after.scores),
        groups: found.groups,
        families,
        score: found.score,
    })
}

#[derive(Debug, Serialize)]
pub struct GateCurve {
    pub log_alpha: Vec<f64>,
    pub expected: Vec<f64>,
    pub deterministic: Vec<f64>,
    pub prob_nonzero: Vec<f64>,
    pub samples: Vec<f64>,
}

/// Hard-concrete gate statistics across a sweep of log-alpha.
pub fn gate_curve(lo: f64, hi: f64, points: usize, seed: u64) -> GateCurve {
    let hc = HardConcrete::default();
    let points = points.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let la: Vec<f64> = (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect();
    GateCurve {
        expected: la.iter().map(|&a| hc.expected(a).0).collect(),
        deterministic: la.iter().map(|&a| hc.deterministic(a).0).collect(),
        prob_nonzero: la.iter().map(|&a| hc.prob_nonzero(a)).collect(),
        samples: la.iter().map(|&a| hc.sample(a, &mut rng).0).collect(),
        log_alpha: la,
    }
}

#[derive(Debug, Serialize)]
pub struct ScheduleCurve {
    pub target: Vec<f64>,
    pub lr_factor: Vec<f64>,
    pub freeze_step: usize,
}

pub fn schedule_curve(total_steps: usize, warmup_frac: f64, freeze_frac: f64) -> Result<ScheduleCurve, String> {
    let s = TrainSchedule {
        total_steps,
        warmup_frac,
        freeze_frac,
        ..TrainSchedule::default()
    };
    s.validate().map_err(|e| e.to_string())?;
    Ok(ScheduleCurve {
        target: (0..=total_steps).map(|t| s.target(t)).collect(),
        lr_factor: (0..=total_steps).map(|t| s.lr_factor(t)).collect(),
        freeze_step: (0..=total_steps).find(|&t| s.masks_frozen(t)).unwrap_or(total_steps),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = alignmentDemo)]
pub fn alignment_js(n_points: usize, angle: f64, noise: f64, seed: u32) -> Result<String, JsValue> {
    to_js(alignment(n_points, angle, noise, seed as u64))
}

#[wasm_bindgen(js_name = groupingDemo)]
pub fn grouping_js(n_heads: usize, n_groups: usize, noise: f64, seed: u32) -> Result<String, JsValue> {
    to_js(grouping(n_heads, n_groups, noise, seed as u64))
}

#[wasm_bindgen(js_name = gateDemo)]
pub fn gate_js(lo: f64, hi: f64, points: usize, total_steps: usize, warmup: f64, freeze: f64) -> Result<String, JsValue> {
    #[derive(Serialize)]
    struct Both {
        gate: GateCurve,
        schedule: ScheduleCurve,
    }
    to_js(schedule_curve(total_steps, warmup, freeze).map(|schedule| Both {
        gate: gate_curve(lo, hi, points, 7),
        schedule,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alignment_recovers_noise_free_angle() {
        let a = alignment(20, 0.9, 0.0, 3).unwrap();
        assert!((a.recovered_angle - 0.9).abs() < 1e-10);
        assert!(a.rmse_after < 1e-10);
        assert!(a.rmse_before > 0.1);
    }

    #[test]
    fn grouping_finds_rotated_families() {
        let g = grouping(8, 4, 0.05, 11).unwrap();
        for grp in &g.groups {
            assert!(grp.iter().all(|&h| g.families[h] == g.families[grp[0]]), "{:?}", g.groups);
        }
        assert!(grouping(6, 4, 0.1, 0).is_err());
    }

    #[test]
    fn gate_curve_is_bounded_and_monotone() {
        let c = gate_curve(-6.0, 6.0, 25, 0);
        assert!(c.deterministic.iter().all(|z| (0.0..=1.0).contains(z)));
        assert!(c.expected.windows(2).all(|w| w[0] <= w[1]));
        let s = schedule_curve(100, 0.3, 0.8).unwrap();
        assert_eq!(s.freeze_step, 80);
        assert_eq!(s.target[30], 0.0);
        assert!(schedule_curve(10, 0.9, 0.5).is_err());
    }
}
