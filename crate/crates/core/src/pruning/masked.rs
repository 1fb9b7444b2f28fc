//! The student during mask transfer: an MHA model whose per-head key and
//! value projections are blended with one shared projection per group,
//! `W_apply = z·W + (1 − z)·W̃`.

use serde::{Deserialize, Serialize};

use super::hard_concrete::HardConcrete;
use super::loss::distill_loss;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::grouping::GroupingPlan;
use crate::linalg::Matrix;
use crate::model::{ModelConfig, ModelWeights, RopeTable};

#[derive(Clone, Debug, PartialEq)]
pub struct GroupLayer {
    /// Per group, d_H × d.
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupHeads {
    pub group_size: usize,
    pub layers: Vec<GroupLayer>,
}

impl GroupHeads {
    pub fn n_groups(&self) -> usize {
        self.layers.first().map_or(0, |l| l.wk.len())
    }

    pub fn zeros_like(&self) -> Self {
        let z = |ms: &[Matrix]| ms.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            group_size: self.group_size,
            layers: self
                .layers
                .iter()
                .map(|l| GroupLayer { wk: z(&l.wk), wv: z(&l.wv) })
                .collect(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &GroupHeads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.wk.iter_mut().zip(&b.wk).chain(a.wv.iter_mut().zip(&b.wv)) {
                x.axpy(alpha, y);
            }
        }
    }
}

fn running_mean(ms: &[Matrix]) -> Matrix {
    // incremental form keeps a group of identical heads bit-exact
    let mut mean = ms[0].clone();
    for (k, m) in ms.iter().enumerate().skip(1) {
        let step = m.sub(&mean).scale(1.0 / (k + 1) as f64);
        mean.axpy(1.0, &step);
    }
    mean
}

/// Shared head of each group initialized as the mean of its members. Heads
/// must already be in group order (group `g` = slots `g·D .. (g+1)·D`).
pub fn mean_pool_init(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    plan: &GroupingPlan,
) -> Result<GroupHeads> {
    plan.validate()?;
    if !cfg.is_mha() || plan.n_heads != cfg.n_heads || plan.layers.len() != cfg.n_layers {
        return Err(Error::Shape(format!(
            "plan for {} layers × {} heads does not fit an MHA model with {} × {}",
            plan.layers.len(),
            plan.n_heads,
            cfg.n_layers,
            cfg.n_heads
        )));
    }
    weights.validate(cfg)?;
    let d = plan.group_size();
    let layers = weights
        .layers
        .iter()
        .map(|l| GroupLayer {
            wk: l.wk.chunks(d).map(running_mean).collect(),
            wv: l.wv.chunks(d).map(running_mean).collect(),
        })
        .collect();
    Ok(GroupHeads { group_size: d, layers })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    /// Layer × head.
    pub log_alpha: Vec<Vec<f64>>,
    pub hc: HardConcrete,
}

impl MaskState {
    /// Comfortably inside the region where the deterministic gate is 1.
    pub const INIT_LOG_ALPHA: f64 = 3.0;

    pub fn new(n_layers: usize, n_heads: usize) -> Self {
        Self {
            log_alpha: vec![vec![Self::INIT_LOG_ALPHA; n_heads]; n_layers],
            hc: HardConcrete::default(),
        }
    }

    pub fn n_gates(&self) -> usize {
        self.log_alpha.iter().map(Vec::len).sum()
    }

    pub fn deterministic(&self) -> Vec<Vec<f64>> {
        self.log_alpha
            .iter()
            .map(|l| l.iter().map(|&a| self.hc.deterministic(a).0).collect())
            .collect()
    }

    pub fn layer_means(&self) -> Vec<f64> {
        self.deterministic()
            .iter()
            .map(|l| l.iter().sum::<f64>() / l.len() as f64)
            .collect()
    }

    pub fn mean_gate(&self) -> f64 {
        self.deterministic().iter().flatten().sum::<f64>() / self.n_gates() as f64
    }

    /// Mean expected gate and its derivative with respect to each log-alpha.
    pub fn expected_mean(&self) -> (f64, Vec<Vec<f64>>) {
        let n = self.n_gates() as f64;
        let mut mean = 0.0;
        let grads = self
            .log_alpha
            .iter()
            .map(|l| {
                l.iter()
                    .map(|&a| {
                        let (e, de) = self.hc.expected(a);
                        mean += e;
                        de / n
                    })
                    .collect()
            })
            .collect();
        (mean / n, grads)
    }
}

/// Effective key and value projections of one head for gate value `z`.
pub fn apply_masks(
    weights: &ModelWeights,
    heads: &GroupHeads,
    z: f64,
    layer: usize,
    head: usize,
) -> Result<(Matrix, Matrix)> {
    let l = weights
        .layers
        .get(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} out of range")))?;
    if head >= l.wk.len() || heads.group_size == 0 {
        return Err(Error::InvalidArgument(format!("head {head} out of range")));
    }
    let g = head / heads.group_size;
    let gl = &heads.layers[layer];
    let blend = |w: &Matrix, shared: &Matrix| w.scale(z).add(&shared.scale(1.0 - z));
    Ok((blend(&l.wk[head], &gl.wk[g]), blend(&l.wv[head], &gl.wv[g])))
}

/// The masked student materialized as an ordinary MHA model.
pub fn effective_weights(
    weights: &ModelWeights,
    heads: &GroupHeads,
    z: &[Vec<f64>],
) -> Result<ModelWeights> {
    let mut out = weights.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        for h in 0..layer.wk.len() {
            let (k, v) = apply_masks(weights, heads, z[l][h], l, h)?;
            layer.wk[h] = k;
            layer.wv[h] = v;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FinalizeReport {
    pub mean_gate: f64,
    pub max_gate: f64,
    pub warnings: Vec<String>,
}

/// Gates above this are reported when the original heads are dropped.
pub const RESIDUAL_GATE_THRESHOLD: f64 = 0.01;

/// Drops the original key and value heads, keeping one shared head per group.
pub fn finalize_gqa(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    heads: &GroupHeads,
    masks: &MaskState,
) -> Result<(ModelWeights, ModelConfig, FinalizeReport)> {
    weights.validate(cfg)?;
    let g = heads.n_groups();
    if heads.layers.len() != cfg.n_layers || g * heads.group_size != cfg.n_heads {
        return Err(Error::Shape("group heads do not match the model".into()));
    }
    let gates = masks.deterministic();
    let mut warnings = Vec::new();
    let mut max_gate: f64 = 0.0;
    for (l, layer) in gates.iter().enumerate() {
        for (h, &z) in layer.iter().enumerate() {
            max_gate = max_gate.max(z);
            if z > RESIDUAL_GATE_THRESHOLD {
                warnings.push(format!("layer {l} head {h} gate {z:.4} discarded"));
            }
        }
    }
    let mut out = weights.clone();
    for (layer, gl) in out.layers.iter_mut().zip(&heads.layers) {
        layer.wk = gl.wk.clone();
        layer.wv = gl.wv.clone();
    }
    let gqa = cfg.with_kv_heads(g);
    out.validate(&gqa)?;
    Ok((
        out,
        gqa,
        FinalizeReport {
            mean_gate: masks.mean_gate(),
            max_gate,
            warnings,
        },
    ))
}

/// Leaf variables of one student graph.
pub(crate) struct Leaves {
    pub params: Vec<Var>,
    pub group_k: Vec<Vec<Var>>,
    pub group_v: Vec<Vec<Var>>,
    pub gates: Vec<Vec<Var>>,
}

/// Records the forward pass; returns positions × vocab logits. Without
/// `masked`, keys and values come straight from the (MHA or GQA) weights.
pub(crate) fn build_forward<'a>(
    tape: &mut Tape<'a>,
    w: &'a ModelWeights,
    cfg: &ModelConfig,
    masked: Option<(&'a GroupHeads, &[Vec<f64>])>,
    tokens: &[u32],
) -> (Var, Leaves) {
    let mut params = Vec::new();
    let mut leaf = |tape: &mut Tape<'a>, m: &'a Matrix| {
        let v = tape.leaf(m);
        params.push(v);
        v
    };
    let embed = leaf(tape, &w.embed);
    let mut layer_leaves = Vec::with_capacity(w.layers.len());
    for l in &w.layers {
        let attn_norm = leaf(tape, &l.attn_norm);
        let wq: Vec<Var> = l.wq.iter().map(|m| leaf(tape, m)).collect();
        let wk: Vec<Var> = l.wk.iter().map(|m| leaf(tape, m)).collect();
        let wv: Vec<Var> = l.wv.iter().map(|m| leaf(tape, m)).collect();
        let wo: Vec<Var> = l.wo.iter().map(|m| leaf(tape, m)).collect();
        let ffn = [
            leaf(tape, &l.ffn_norm),
            leaf(tape, &l.w_gate),
            leaf(tape, &l.w_up),
            leaf(tape, &l.w_down),
        ];
        layer_leaves.push((attn_norm, wq, wk, wv, wo, ffn));
    }
    let final_norm = leaf(tape, &w.final_norm);
    let lm_head = leaf(tape, &w.lm_head);

    let mut group_k: Vec<Vec<Var>> = Vec::new();
    let mut group_v: Vec<Vec<Var>> = Vec::new();
    let mut gates: Vec<Vec<Var>> = Vec::new();
    if let Some((gh, z)) = masked {
        for (gl, zl) in gh.layers.iter().zip(z) {
            group_k.push(gl.wk.iter().map(|m| tape.leaf(m)).collect());
            group_v.push(gl.wv.iter().map(|m| tape.leaf(m)).collect());
            gates.push(zl.iter().map(|&v| tape.leaf_owned(Matrix::from_fn(1, 1, |_, _| v))).collect());
        }
    }

    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let mut x = tape.gather(embed, tokens);
    for (l, (attn_norm, wq, wk, wv, wo, ffn)) in layer_leaves.iter().enumerate() {
        let u = tape.rms_norm(x, *attn_norm, cfg.norm_eps);
        let mut kv = Vec::new();
        let n_kv = if masked.is_some() { cfg.n_heads } else { cfg.n_kv_heads };
        for g in 0..n_kv {
            let (k_w, v_w) = match masked {
                Some((gh, _)) => {
                    let z = gates[l][g];
                    let nz = tape.one_minus(z);
                    let shared = g / gh.group_size;
                    let blend = |tape: &mut Tape<'a>, own: Var, grp: Var| {
                        let a = tape.scale_by(z, own);
                        let b = tape.scale_by(nz, grp);
                        tape.add(a, b)
                    };
                    (
                        blend(tape, wk[g], group_k[l][shared]),
                        blend(tape, wv[g], group_v[l][shared]),
                    )
                }
                None => (wk[g], wv[g]),
            };
            let k = tape.matmul_t(u, k_w);
            let k = tape.rope(k);
            let v = tape.matmul_t(u, v_w);
            kv.push((k, v));
        }
        for h in 0..cfg.n_heads {
            let (k, v) = if masked.is_some() { kv[h] } else { kv[cfg.kv_head_of(h)] };
            let q = tape.matmul_t(u, wq[h]);
            let q = tape.rope(q);
            let s = tape.matmul_t(q, k);
            let s = tape.scale(s, scale);
            let a = tape.causal_softmax(s);
            let o = tape.matmul(a, v);
            let o = tape.matmul_t(o, wo[h]);
            x = tape.add(x, o);
        }
        let [ffn_norm, w_gate, w_up, w_down] = *ffn;
        let u = tape.rms_norm(x, ffn_norm, cfg.norm_eps);
        let g = tape.matmul_t(u, w_gate);
        let up = tape.matmul_t(u, w_up);
        let act = tape.silu_mul(g, up);
        let down = tape.matmul_t(act, w_down);
        x = tape.add(x, down);
    }
    let h = tape.rms_norm(x, final_norm, cfg.norm_eps);
    let logits = tape.matmul_t(h, lm_head);
    (
        logits,
        Leaves {
            params,
            group_k,
            group_v,
            gates,
        },
    )
}

pub(crate) fn new_tape<'a>(cfg: &ModelConfig) -> Tape<'a> {
    Tape::new(Some(RopeTable::new(cfg.head_dim, cfg.rope_base, cfg.rope_pairing)))
}

/// Gradients of the distillation loss for one sequence.
#[derive(Clone, Debug)]
pub struct StudentGrads {
    pub model: ModelWeights,
    pub group: GroupHeads,
    /// Layer × head, with respect to the gate value `z`.
    pub gates: Vec<Vec<f64>>,
}

impl StudentGrads {
    pub fn axpy(&mut self, alpha: f64, other: &StudentGrads) {
        self.model.axpy(alpha, &other.model);
        self.group.axpy(alpha, &other.group);
        for (a, b) in self.gates.iter_mut().flatten().zip(other.gates.iter().flatten()) {
            *a += alpha * b;
        }
    }
}

pub(crate) fn collect_model_grads(
    w: &ModelWeights,
    params: &[Var],
    grads: &mut [Option<Matrix>],
) -> ModelWeights {
    let mut out = w.zeros_like();
    for (slot, v) in out.params_mut().into_iter().zip(params) {
        if let Some(g) = grads[v.index()].take() {
            *slot = g;
        }
    }
    out
}

/// Distillation loss of the masked student against `teacher_logits` and its
/// gradient with respect to weights, group heads and gate values.
pub fn student_loss_and_grad(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    heads: &GroupHeads,
    z: &[Vec<f64>],
    tokens: &[u32],
    teacher_logits: &Matrix,
    k: usize,
) -> Result<(f64, StudentGrads)> {
    let mut tape = new_tape(cfg);
    let (logits, leaves) = build_forward(&mut tape, weights, cfg, Some((heads, z)), tokens);
    let (loss, seed) = distill_loss(tape.value(logits), teacher_logits, k)?;
    let mut grads = tape.backward(logits, seed);
    let model = collect_model_grads(weights, &leaves.params, &mut grads);
    let mut group = heads.zeros_like();
    for (l, gl) in group.layers.iter_mut().enumerate() {
        for (g, m) in gl.wk.iter_mut().enumerate() {
            if let Some(d) = grads[leaves.group_k[l][g].index()].take() {
                *m = d;
            }
        }
        for (g, m) in gl.wv.iter_mut().enumerate() {
            if let Some(d) = grads[leaves.group_v[l][g].index()].take() {
                *m = d;
            }
        }
    }
    let gates = leaves
        .gates
        .iter()
        .map(|l| {
            l.iter()
                .map(|v| grads[v.index()].as_ref().map_or(0.0, |m| m.data()[0]))
                .collect()
        })
        .collect();
    Ok((loss, StudentGrads { model, group, gates }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_positions;
    use crate::similarity::Criterion;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(g: usize) -> (ModelWeights, ModelConfig, GroupHeads) {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let w = ModelWeights::random(&cfg, &mut rng).unwrap();
        let plan = GroupingPlan::adjacent(cfg.n_layers, cfg.n_heads, g, Criterion::Cos).unwrap();
        let gh = mean_pool_init(&w, &cfg, &plan).unwrap();
        (w, cfg, gh)
    }

    #[test]
    fn mean_pool_edge_cases() {
        let (mut w, cfg, _) = setup(4);
        let a = w.layers[0].wk[0].clone();
        w.layers[0].wk[1] = a.scale(-1.0);
        w.layers[0].wv[2] = a.clone();
        w.layers[0].wv[3] = a.clone();
        let plan = GroupingPlan::adjacent(2, 8, 4, Criterion::Cos).unwrap();
        let gh = mean_pool_init(&w, &cfg, &plan).unwrap();
        assert!(gh.layers[0].wk[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(gh.layers[0].wv[1], a);
        let b = &w.layers[1].wv;
        let want = Matrix::from_fn(8, 64, |r, c| (b[4][(r, c)] + b[5][(r, c)]) / 2.0);
        assert!(gh.layers[1].wv[2].max_abs_diff(&want) < 1e-15);
        let wrong = GroupingPlan::adjacent(3, 8, 4, Criterion::Cos).unwrap();
        assert!(mean_pool_init(&w, &cfg, &wrong).is_err());
    }

    #[test]
    fn blend_endpoints() {
        let (w, _, gh) = setup(2);
        let (k1, v1) = apply_masks(&w, &gh, 1.0, 1, 5).unwrap();
        assert_eq!((k1, v1), (w.layers[1].wk[5].clone(), w.layers[1].wv[5].clone()));
        let (k0, _) = apply_masks(&w, &gh, 0.0, 1, 5).unwrap();
        assert_eq!(k0, gh.layers[1].wk[1]);
        let (kh, _) = apply_masks(&w, &gh, 0.5, 0, 2).unwrap();
        let mid = w.layers[0].wk[2].add(&gh.layers[0].wk[0]).scale(0.5);
        assert!(kh.max_abs_diff(&mid) < 1e-15);
        assert!(apply_masks(&w, &gh, 0.5, 2, 0).is_err());
        assert!(apply_masks(&w, &gh, 0.5, 0, 8).is_err());
    }

    #[test]
    fn tape_forward_matches_model_forward() {
        let (w, cfg, gh) = setup(4);
        let tokens = [3u32, 17, 200, 5, 5, 9];
        let z: Vec<Vec<f64>> = vec![vec![0.3, 1.0, 0.0, 0.7, 0.2, 0.9, 0.5, 0.1]; 2];
        let mut tape = new_tape(&cfg);
        let (logits, _) = build_forward(&mut tape, &w, &cfg, Some((&gh, &z)), &tokens);
        let reference = forward_positions(&effective_weights(&w, &gh, &z).unwrap(), &cfg, &tokens).unwrap();
        assert!(tape.value(logits).max_abs_diff(&reference) < 1e-12);

        let ones = vec![vec![1.0; 8]; 2];
        let mut tape = new_tape(&cfg);
        let (logits, _) = build_forward(&mut tape, &w, &cfg, Some((&gh, &ones)), &tokens);
        assert!(tape.value(logits).max_abs_diff(&forward_positions(&w, &cfg, &tokens).unwrap()) < 1e-12);
    }

    #[test]
    fn export_equals_closed_gates() {
        let (w, cfg, gh) = setup(2);
        let mut masks = MaskState::new(2, 8);
        for l in &mut masks.log_alpha {
            l.fill(-10.0);
        }
        let (gqa, gcfg, report) = finalize_gqa(&w, &cfg, &gh, &masks).unwrap();
        assert!(report.warnings.is_empty());
        assert_eq!(gcfg.n_kv_heads, 2);
        assert_eq!(gqa.kv_parameter_count(0) * 4, w.kv_parameter_count(0));
        let tokens = [1u32, 2, 3, 250, 7];
        let masked = effective_weights(&w, &gh, &masks.deterministic()).unwrap();
        let a = forward_positions(&masked, &cfg, &tokens).unwrap();
        let b = forward_positions(&gqa, &gcfg, &tokens).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn open_gates_warn_on_export() {
        let (w, cfg, gh) = setup(4);
        let (_, _, report) = finalize_gqa(&w, &cfg, &gh, &MaskState::new(2, 8)).unwrap();
        assert_eq!(report.warnings.len(), 16);
        assert_eq!(report.mean_gate, 1.0);
    }
}
