//! Mask-transfer training: distill the masked student towards the teacher
//! while the target loss pulls every gate to zero.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::l0_loss;
use super::masked::{student_loss_and_grad, GroupHeads, MaskState, StudentGrads};
use crate::error::{Error, Result};
use crate::model::{forward_positions, ModelConfig, ModelWeights};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub total_steps: usize,
    /// Fraction of steps over which the target falls linearly from 1 to 0.
    pub warmup_frac: f64,
    /// Gates stop training after this fraction of steps.
    pub freeze_frac: f64,
    /// Plain SGD rates. Desk-scale defaults: the toy model is tiny and the
    /// per-gate target gradient is divided by the gate count.
    pub lr_model: f64,
    pub lr_mask: f64,
    pub batch_size: usize,
    pub bild_k: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_steps: 300,
            warmup_frac: 0.3,
            freeze_frac: 0.8,
            lr_model: 3.0,
            lr_mask: 25.0,
            batch_size: 8,
            bild_k: 16,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let frac = |f: f64| (0.0..=1.0).contains(&f);
        if !frac(self.warmup_frac) || !frac(self.freeze_frac) || self.warmup_frac > self.freeze_frac {
            return Err(Error::InvalidArgument(
                "need 0 ≤ warmup_frac ≤ freeze_frac ≤ 1".into(),
            ));
        }
        if self.batch_size == 0 || !(self.lr_model >= 0.0) || !(self.lr_mask >= 0.0) {
            return Err(Error::InvalidArgument(
                "batch size must be positive and learning rates non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Target mean gate at `step`.
    pub fn target(&self, step: usize) -> f64 {
        let warm = self.warmup_frac * self.total_steps as f64;
        if warm <= 0.0 {
            return 0.0;
        }
        (1.0 - step as f64 / warm).max(0.0)
    }

    /// Cosine decay factor from 1 at step 0 to 0 at the end.
    pub fn lr_factor(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        let p = step as f64 / self.total_steps as f64;
        0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }

    pub fn masks_frozen(&self, step: usize) -> bool {
        step as f64 >= self.freeze_frac * self.total_steps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub step: usize,
    pub layer: usize,
    pub mean_gate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub target: f64,
    pub distill: f64,
    pub l0: f64,
    pub expected_gate: f64,
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub weights: ModelWeights,
    pub heads: GroupHeads,
    pub masks: MaskState,
    /// Per-layer mean deterministic gate before training and after every step.
    pub trajectory: Vec<GateRecord>,
    pub log: Vec<StepLog>,
}

fn record(masks: &MaskState, step: usize, out: &mut Vec<GateRecord>) {
    for (layer, mean_gate) in masks.layer_means().into_iter().enumerate() {
        out.push(GateRecord {
            step,
            layer,
            mean_gate,
        });
    }
}

/// Trains weights, group heads and gates against distillation plus target
/// loss. Gates are sampled while they train and deterministic once frozen.
pub fn prune_train(
    student: &ModelWeights,
    cfg: &ModelConfig,
    heads: &GroupHeads,
    masks: &MaskState,
    schedule: &TrainSchedule,
    teacher: &ModelWeights,
    data: &[Vec<u32>],
) -> Result<PruneOutcome> {
    schedule.validate()?;
    student.validate(cfg)?;
    teacher.validate(cfg)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training sequences".into()));
    }
    if masks.log_alpha.len() != cfg.n_layers
        || masks.log_alpha.iter().any(|l| l.len() != cfg.n_heads)
        || heads.layers.len() != cfg.n_layers
    {
        return Err(Error::Shape("masks or group heads do not match the model".into()));
    }

    let mut w = student.clone();
    let mut gh = heads.clone();
    let mut masks = masks.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut trajectory = Vec::new();
    let mut log = Vec::with_capacity(schedule.total_steps);
    record(&masks, 0, &mut trajectory);

    for step in 0..schedule.total_steps {
        let target = schedule.target(step);
        let frozen = schedule.masks_frozen(step);
        let lr = schedule.lr_factor(step);

        let gates: Vec<Vec<(f64, f64)>> = masks
            .log_alpha
            .iter()
            .map(|l| {
                l.iter()
                    .map(|&a| {
                        if frozen {
                            (masks.hc.deterministic(a).0, 0.0)
                        } else {
                            masks.hc.sample(a, &mut rng)
                        }
                    })
                    .collect()
            })
            .collect();
        let z: Vec<Vec<f64>> = gates.iter().map(|l| l.iter().map(|g| g.0).collect()).collect();
        let batch: Vec<&Vec<u32>> = (0..schedule.batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();

        let per_seq = par::map(&batch, |seq| -> Result<(f64, StudentGrads)> {
            let t = forward_positions(teacher, cfg, seq)?;
            student_loss_and_grad(&w, cfg, &gh, &z, seq, &t, schedule.bild_k)
        });
        // fixed summation order keeps runs reproducible under any thread count
        let mut distill = 0.0;
        let mut total: Option<StudentGrads> = None;
        for r in per_seq {
            let (loss, g) = r?;
            distill += loss;
            match &mut total {
                Some(acc) => acc.axpy(1.0, &g),
                None => total = Some(g),
            }
        }
        let inv_b = 1.0 / schedule.batch_size as f64;
        distill *= inv_b;
        let grads = total.expect("non-empty batch");

        let (mean_e, de) = masks.expected_mean();
        let (l0, dl0) = l0_loss(mean_e, target);
        if !(distill + l0).is_finite() {
            return Err(Error::Divergence {
                step,
                message: format!("loss became {} (distill {distill}, target {l0})", distill + l0),
            });
        }
        log.push(StepLog {
            step,
            target,
            distill,
            l0,
            expected_gate: mean_e,
        });

        w.axpy(-schedule.lr_model * lr * inv_b, &grads.model);
        gh.axpy(-schedule.lr_model * lr * inv_b, &grads.group);
        if !frozen {
            for (l, row) in masks.log_alpha.iter_mut().enumerate() {
                for (h, a) in row.iter_mut().enumerate() {
                    let g = grads.gates[l][h] * inv_b * gates[l][h].1 + dl0 * de[l][h];
                    *a -= schedule.lr_mask * lr * g;
                }
            }
        }
        record(&masks, step + 1, &mut trajectory);
    }
    Ok(PruneOutcome {
        weights: w,
        heads: gh,
        masks,
        trajectory,
        log,
    })
}

/// `step,layer,mean_gate` rows.
pub fn write_trajectory_csv(rows: &[GateRecord], path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["step", "layer", "mean_gate"]).map_err(io)?;
    for r in rows {
        w.write_record([r.step.to_string(), r.layer.to_string(), r.mean_gate.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<GateRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e: csv::Error| Error::Parse {
                location: format!("{}:{}", path.display(), i + 2),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Largest gap between any two layers' mean gates at a common step.
pub fn max_layer_spread(rows: &[GateRecord]) -> f64 {
    let mut by_step: std::collections::BTreeMap<usize, (f64, f64)> = Default::default();
    for r in rows {
        let e = by_step.entry(r.step).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(r.mean_gate);
        e.1 = e.1.max(r.mean_gate);
    }
    by_step.values().map(|(lo, hi)| hi - lo).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = TrainSchedule { total_steps: 100, ..Default::default() };
        assert_eq!(s.target(0), 1.0);
        assert!((s.target(15) - 0.5).abs() < 1e-15);
        assert_eq!(s.target(30), 0.0);
        assert_eq!(s.target(99), 0.0);
        assert!(!s.masks_frozen(79));
        assert!(s.masks_frozen(80));
        assert_eq!(s.lr_factor(0), 1.0);
        assert!((s.lr_factor(50) - 0.5).abs() < 1e-15);
        assert!(s.lr_factor(100).abs() < 1e-15);
        let bad = TrainSchedule { warmup_frac: 0.9, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spread_of_trajectory() {
        let rows = [
            GateRecord { step: 0, layer: 0, mean_gate: 1.0 },
            GateRecord { step: 0, layer: 1, mean_gate: 1.0 },
            GateRecord { step: 1, layer: 0, mean_gate: 0.7 },
            GateRecord { step: 1, layer: 1, mean_gate: 0.9 },
        ];
        assert!((max_layer_spread(&rows) - 0.2).abs() < 1e-15);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        write_trajectory_csv(&rows, &p).unwrap();
        assert_eq!(read_trajectory_csv(&p).unwrap(), rows);
    }
}
