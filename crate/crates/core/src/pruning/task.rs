//! Desk-scale teacher: a small MHA model trained to continue noisy repeated
//! patterns, which forces it to rely on attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{distill_loss, next_token_loss};
use super::masked::{build_forward, collect_model_grads, new_tape};
use crate::error::{Error, Result};
use crate::model::{forward_positions, ModelConfig, ModelWeights};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternTask {
    pub vocab: usize,
    pub seq_len: usize,
    pub min_period: usize,
    pub max_period: usize,
    /// Probability that a position is replaced by a random token.
    pub noise: f64,
}

impl PatternTask {
    pub fn for_vocab(vocab: usize) -> Self {
        Self {
            vocab,
            seq_len: 32,
            min_period: 3,
            max_period: 8,
            noise: 0.1,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<u32>> {
        let v = self.vocab as u32;
        (0..n)
            .map(|_| {
                let p = rng.random_range(self.min_period..=self.max_period);
                let pattern: Vec<u32> = (0..p).map(|_| rng.random_range(0..v)).collect();
                (0..self.seq_len)
                    .map(|t| {
                        if rng.random::<f64>() < self.noise {
                            rng.random_range(0..v)
                        } else {
                            pattern[t % p]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TeacherTraining {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Next-token loss and its gradient for one sequence of any (MHA or GQA) model.
pub fn lm_loss_and_grad(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<(f64, ModelWeights)> {
    let mut tape = new_tape(cfg);
    let (logits, leaves) = build_forward(&mut tape, weights, cfg, None, tokens);
    let (loss, seed) = next_token_loss(tape.value(logits), tokens)?;
    let mut grads = tape.backward(logits, seed);
    Ok((loss, collect_model_grads(weights, &leaves.params, &mut grads)))
}

/// Random init followed by Adam on fresh task samples every step. Returns the
/// weights and the per-step training loss.
pub fn train_teacher(
    cfg: &ModelConfig,
    task: &PatternTask,
    opts: &TeacherTraining,
) -> Result<(ModelWeights, Vec<f64>)> {
    if task.vocab != cfg.vocab_size {
        return Err(Error::Shape("task vocabulary differs from the model's".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut w = ModelWeights::random(cfg, &mut rng)?;
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = w.zeros_like();
    let mut v = w.zeros_like();
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch = task.sample(opts.batch_size, &mut rng);
        let results = par::map(&batch, |s| lm_loss_and_grad(&w, cfg, s));
        let mut loss = 0.0;
        let mut g = w.zeros_like();
        for r in results {
            let (l, gi) = r?;
            loss += l;
            g.axpy(1.0, &gi);
        }
        let inv = 1.0 / opts.batch_size as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                message: format!("teacher loss became {loss}"),
            });
        }
        losses.push(loss);
        let lr = opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / opts.steps as f64).cos());
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for ((p, gp), (mp, vp)) in w
            .params_mut()
            .into_iter()
            .zip(g.params())
            .zip(m.params_mut().into_iter().zip(v.params_mut()))
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(gp.data())
                .zip(mp.data_mut())
                .zip(vp.data_mut())
            {
                let gi = gi * inv;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
    Ok((w, losses))
}

/// Mean distillation loss of `student` against `teacher` over `seqs`.
pub fn distill_eval(
    student: (&ModelWeights, &ModelConfig),
    teacher: (&ModelWeights, &ModelConfig),
    seqs: &[Vec<u32>],
    k: usize,
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("no evaluation sequences".into()));
    }
    let losses = par::map(seqs, |s| -> Result<f64> {
        let a = forward_positions(student.0, student.1, s)?;
        let b = forward_positions(teacher.0, teacher.1, s)?;
        Ok(distill_loss(&a, &b, k)?.0)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / seqs.len() as f64)
}

/// Mean next-token loss over `seqs`.
pub fn lm_eval(weights: &ModelWeights, cfg: &ModelConfig, seqs: &[Vec<u32>]) -> Result<f64> {
    let losses = par::map(seqs, |s| -> Result<f64> {
        Ok(next_token_loss(&forward_positions(weights, cfg, s)?, s)?.0)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / seqs.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_sequences_repeat() {
        let task = PatternTask { noise: 0.0, ..PatternTask::for_vocab(50) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in task.sample(10, &mut rng) {
            assert_eq!(s.len(), 32);
            assert!(s.iter().all(|&t| t < 50));
            let p = (3..=8).find(|&p| (p..32).all(|t| s[t] == s[t - p])).unwrap();
            assert!(p <= 8);
        }
    }

    #[test]
    fn teacher_loss_drops() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 4,
            head_dim: 4,
            n_layers: 1,
            d_ff: 32,
            vocab_size: 16,
            n_kv_heads: 4,
            ..ModelConfig::toy()
        };
        let task = PatternTask { seq_len: 12, ..PatternTask::for_vocab(16) };
        let opts = TeacherTraining { steps: 60, batch_size: 4, lr: 1e-2, seed: 2 };
        let (_, losses) = train_teacher(&cfg, &task, &opts).unwrap();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }
}
