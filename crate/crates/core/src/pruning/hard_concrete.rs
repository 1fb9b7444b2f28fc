//! Hard-concrete gates: a stretched binary-concrete variable clamped to
//! `[0, 1]`, parametrized by `log_alpha`.

use std::sync::OnceLock;

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardConcrete {
    /// Temperature.
    pub beta: f64,
    /// Lower stretch limit, below zero.
    pub gamma: f64,
    /// Upper stretch limit, above one.
    pub zeta: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        Self {
            beta: 2.0 / 3.0,
            gamma: -0.1,
            zeta: 1.1,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl HardConcrete {
    fn stretch(&self, s: f64) -> f64 {
        s * (self.zeta - self.gamma) + self.gamma
    }

    /// Evaluation-time gate and its derivative (zero where clamped).
    pub fn deterministic(&self, log_alpha: f64) -> (f64, f64) {
        let s = sigmoid(log_alpha);
        let z = self.stretch(s);
        if z <= 0.0 {
            (0.0, 0.0)
        } else if z >= 1.0 {
            (1.0, 0.0)
        } else {
            (z, (self.zeta - self.gamma) * s * (1.0 - s))
        }
    }

    /// Reparametrized sample for a uniform draw `u ∈ (0, 1)`, with `dz/dlog_alpha`.
    pub fn sample_with(&self, log_alpha: f64, u: f64) -> (f64, f64) {
        let s = sigmoid((logit(u) + log_alpha) / self.beta);
        let z = self.stretch(s);
        if z <= 0.0 {
            (0.0, 0.0)
        } else if z >= 1.0 {
            (1.0, 0.0)
        } else {
            (z, (self.zeta - self.gamma) * s * (1.0 - s) / self.beta)
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, log_alpha: f64, rng: &mut R) -> (f64, f64) {
        let u: f64 = rng.sample(Open01);
        self.sample_with(log_alpha, u)
    }

    /// `E[z]` and its derivative.
    ///
    /// `E[z] = ∫₀¹ P(z > t) dt` and `P(z > t) = sigmoid(log_alpha − β·logit((t − γ)/(ζ − γ)))`;
    /// the integrand is smooth on `[0, 1]`, so Gauss-Legendre converges fast.
    pub fn expected(&self, log_alpha: f64) -> (f64, f64) {
        let (nodes, weights) = gauss_legendre();
        let mut e = 0.0;
        let mut de = 0.0;
        for (&x, &w) in nodes.iter().zip(weights) {
            let t = 0.5 * (x + 1.0);
            let c = (t - self.gamma) / (self.zeta - self.gamma);
            let p = sigmoid(log_alpha - self.beta * logit(c));
            e += 0.5 * w * p;
            de += 0.5 * w * p * (1.0 - p);
        }
        // weights sum to 2 only up to rounding
        (e.clamp(0.0, 1.0), de)
    }

    /// Probability that the gate is not exactly zero.
    pub fn prob_nonzero(&self, log_alpha: f64) -> f64 {
        sigmoid(log_alpha - self.beta * logit(-self.gamma / (self.zeta - self.gamma)))
    }

    /// Smallest `log_alpha` whose deterministic gate is exactly one.
    pub fn saturation_log_alpha(&self) -> f64 {
        logit((1.0 - self.gamma) / (self.zeta - self.gamma))
    }
}

const GL_ORDER: usize = 64;

/// Nodes and weights on `[-1, 1]`.
fn gauss_legendre() -> &'static (Vec<f64>, Vec<f64>) {
    static TABLE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = GL_ORDER;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                // three-term recurrence for P_n and its derivative
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let step = p1 / dp;
                x -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}
