//! Reverse-mode differentiation over whole matrices, just the operations the
//! decoder needs. Activations are rows = tokens.

use std::borrow::Cow;

use crate::linalg::Matrix;
use crate::model::forward::{causal_softmax_in_place, rms_norm, silu};
use crate::model::RopeTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    /// Row `t` is row `tokens[t]` of the table.
    Gather(Var, Vec<u32>),
    MatMul(Var, Var),
    /// `a · bᵀ`.
    MatMulT(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    /// 1×1 variable times a matrix.
    ScaleBy(Var, Var),
    /// `1 − s` for a 1×1 variable.
    OneMinus(Var),
    RmsNorm(Var, Var, f64),
    /// `silu(a) ⊙ b`.
    SiluMul(Var, Var),
    Rope(Var),
    CausalSoftmax(Var),
}

/// Values are borrowed where possible so model weights are not copied per
/// sequence.
pub struct Tape<'a> {
    values: Vec<Cow<'a, Matrix>>,
    ops: Vec<Op>,
    rope: Option<RopeTable>,
}

impl<'a> Tape<'a> {
    pub fn new(rope: Option<RopeTable>) -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            rope,
        }
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, m: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf)
    }

    pub fn leaf_owned(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn gather(&mut self, table: Var, tokens: &[u32]) -> Var {
        let t = self.value(table);
        let out = Matrix::from_fn(tokens.len(), t.cols(), |r, c| t[(tokens[r] as usize, c)]);
        self.push(Cow::Owned(out), Op::Gather(table, tokens.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Cow::Owned(out), Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(Cow::Owned(out), Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        self.push(Cow::Owned(out), Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(Cow::Owned(out), Op::Scale(a, s))
    }

    pub fn scale_by(&mut self, s: Var, a: Var) -> Var {
        let out = self.value(a).scale(self.scalar(s));
        self.push(Cow::Owned(out), Op::ScaleBy(s, a))
    }

    pub fn one_minus(&mut self, s: Var) -> Var {
        let out = Matrix::from_fn(1, 1, |_, _| 1.0 - self.scalar(s));
        self.push(Cow::Owned(out), Op::OneMinus(s))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let out = rms_norm(self.value(x), self.value(gain), eps);
        self.push(Cow::Owned(out), Op::RmsNorm(x, gain, eps))
    }

    pub fn silu_mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |g, u| silu(g) * u);
        self.push(Cow::Owned(out), Op::SiluMul(a, b))
    }

    pub fn rope(&mut self, x: Var) -> Var {
        let table = self.rope.as_ref().expect("tape built without a rope table");
        let out = table.rotate_rows(self.value(x), 0);
        self.push(Cow::Owned(out), Op::Rope(x))
    }

    pub fn causal_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        causal_softmax_in_place(&mut out);
        self.push(Cow::Owned(out), Op::CausalSoftmax(x))
    }

    /// Gradients of `Σ seed ⊙ out` with respect to every node reachable from
    /// `out`; unreachable nodes stay `None`.
    pub fn backward(&self, out: Var, seed: Matrix) -> Vec<Option<Matrix>> {
        assert_eq!(seed.shape(), self.value(out).shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.values.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |grads: &mut [Option<Matrix>], v: Var, d: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.axpy(1.0, &d),
            slot => *slot = Some(d),
        };
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Gather(table, tokens) => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (r, &tok) in tokens.iter().enumerate() {
                    for (o, &v) in d.row_mut(tok as usize).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *table, d);
            }
            Op::MatMul(a, b) => {
                let da = g.matmul_t(self.value(*b));
                let db = self.value(*a).t_matmul(g);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::MatMulT(a, b) => {
                let da = g.matmul(self.value(*b));
                let db = g.t_matmul(self.value(*a));
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s)),
            Op::ScaleBy(s, a) => {
                let x = self.value(*a);
                let ds: f64 = g.data().iter().zip(x.data()).map(|(p, q)| p * q).sum();
                acc(grads, *s, Matrix::from_fn(1, 1, |_, _| ds));
                acc(grads, *a, g.scale(self.scalar(*s)));
            }
            Op::OneMinus(s) => acc(grads, *s, g.scale(-1.0)),
            Op::RmsNorm(x, gain, eps) => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let d = xv.cols();
                let mut dx = Matrix::zeros(xv.rows(), d);
                let mut dgain = Matrix::zeros(1, d);
                for t in 0..xv.rows() {
                    let row = xv.row(t);
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let r = 1.0 / (ms + eps).sqrt();
                    let gr = g.row(t);
                    let mut proj = 0.0;
                    for c in 0..d {
                        dgain.data_mut()[c] += gr[c] * row[c] * r;
                        proj += gr[c] * gv[c] * row[c];
                    }
                    let k = r * r * r * proj / d as f64;
                    for (c, o) in dx.row_mut(t).iter_mut().enumerate() {
                        *o = r * gr[c] * gv[c] - k * row[c];
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
            }
            Op::SiluMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut da = g.clone();
                let mut db = g.clone();
                for ((da, db), (&x, &u)) in da
                    .data_mut()
                    .iter_mut()
                    .zip(db.data_mut())
                    .zip(av.data().iter().zip(bv.data()))
                {
                    let sig = 1.0 / (1.0 + (-x).exp());
                    *db *= x * sig;
                    *da *= u * sig * (1.0 + x * (1.0 - sig));
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Rope(x) => {
                let table = self.rope.as_ref().expect("rope table");
                acc(grads, *x, table.unrotate_rows(g, 0));
            }
            Op::CausalSoftmax(x) => {
                let y = &self.values[i];
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for t in 0..y.rows() {
                    let yr = y.row(t);
                    let gr = g.row(t);
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (c, o) in dx.row_mut(t).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - inner);
                    }
                }
                acc(grads, *x, dx);
            }
        }
    }
}
