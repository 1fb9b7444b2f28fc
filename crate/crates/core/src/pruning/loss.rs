//! Distillation and target-size losses. Logits are positions × vocab; every
//! loss is averaged over positions and returns its gradient with respect to
//! the student logits.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// `|m − T| + (m − T)²` for mean gate `m` and target `T`, with `d/dm`.
pub fn l0_loss(mean_gate: f64, target: f64) -> (f64, f64) {
    let diff = mean_gate - target;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    (diff.abs() + diff * diff, sign + 2.0 * diff)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn check_pair(student: &Matrix, teacher: &Matrix) -> Result<()> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    if student.rows() == 0 {
        return Err(Error::InvalidArgument("no positions to distill".into()));
    }
    Ok(())
}

/// Token-level `KL(p_teacher ‖ p_student)`.
pub fn kl_loss(student: &Matrix, teacher: &Matrix) -> Result<(f64, Matrix)> {
    check_pair(student, teacher)?;
    let n = student.rows() as f64;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    let mut total = 0.0;
    for t in 0..student.rows() {
        let ls = log_softmax(student.row(t));
        let lt = log_softmax(teacher.row(t));
        for (c, g) in grad.row_mut(t).iter_mut().enumerate() {
            let pt = lt[c].exp();
            total += pt * (lt[c] - ls[c]);
            *g = (ls[c].exp() - pt) / n;
        }
    }
    Ok((total / n, grad))
}

/// Teacher's `k` largest logit positions, ties to the lower index.
fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Symmetric KL between softmaxes of all ordered pairwise logit differences
/// over the teacher's top-`k` positions.
pub fn bild_loss(student: &Matrix, teacher: &Matrix, k: usize) -> Result<(f64, Matrix)> {
    check_pair(student, teacher)?;
    if k < 2 || k > student.cols() {
        return Err(Error::InvalidArgument(format!(
            "top-k of {k} needs 2 ≤ k ≤ vocab {}",
            student.cols()
        )));
    }
    let n = student.rows() as f64;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    let mut total = 0.0;
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    for t in 0..student.rows() {
        let s = student.row(t);
        let tr = teacher.row(t);
        let idx = top_k(tr, k);
        let dt: Vec<f64> = pairs.iter().map(|&(i, j)| tr[idx[i]] - tr[idx[j]]).collect();
        let ds: Vec<f64> = pairs.iter().map(|&(i, j)| s[idx[i]] - s[idx[j]]).collect();
        let lp = log_softmax(&dt);
        let lq = log_softmax(&ds);
        // Σ (P − Q)(log P − log Q); d/d(ds) = (Q − P) + Q ⊙ (c − ⟨Q, c⟩), c = log Q − log P
        let c: Vec<f64> = lq.iter().zip(&lp).map(|(q, p)| q - p).collect();
        let qc: f64 = lq.iter().zip(&c).map(|(q, c)| q.exp() * c).sum();
        let row = grad.row_mut(t);
        for (m, &(i, j)) in pairs.iter().enumerate() {
            let (p, q) = (lp[m].exp(), lq[m].exp());
            total -= (p - q) * c[m];
            let g = ((q - p) + q * (c[m] - qc)) / n;
            row[idx[i]] += g;
            row[idx[j]] -= g;
        }
    }
    Ok((total / n, grad))
}

/// KL plus BiLD with equal weight.
pub fn distill_loss(student: &Matrix, teacher: &Matrix, k: usize) -> Result<(f64, Matrix)> {
    let (kl, mut g) = kl_loss(student, teacher)?;
    let (bild, gb) = bild_loss(student, teacher, k)?;
    g.axpy(1.0, &gb);
    Ok((kl + bild, g))
}

/// Mean next-token cross-entropy; row `t` predicts `tokens[t + 1]`.
pub fn next_token_loss(logits: &Matrix, tokens: &[u32]) -> Result<(f64, Matrix)> {
    if logits.rows() != tokens.len() || tokens.len() < 2 {
        return Err(Error::Shape(format!(
            "{} logit rows for {} tokens",
            logits.rows(),
            tokens.len()
        )));
    }
    let n = (tokens.len() - 1) as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for t in 0..tokens.len() - 1 {
        let ls = log_softmax(logits.row(t));
        let target = tokens[t + 1] as usize;
        total -= ls[target];
        for (c, g) in grad.row_mut(t).iter_mut().enumerate() {
            *g = (ls[c].exp() - if c == target { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l0_plug_in_values() {
        assert_eq!(l0_loss(0.3, 0.3).0, 0.0);
        assert_eq!(l0_loss(1.0, 0.0).0, 2.0);
        assert_eq!(l0_loss(0.5, 0.0).0, 0.75);
    }

    #[test]
    fn three_class_kl() {
        let t = Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let s = Matrix::from_rows(&[vec![8f64.ln(), 0.0, 0.0]]).unwrap();
        let want = -(3f64.ln()) - (0.8f64.ln() + 2.0 * 0.1f64.ln()) / 3.0;
        assert!((kl_loss(&s, &t).unwrap().0 - want).abs() < 1e-14);
    }

    #[test]
    fn equal_and_shifted_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Matrix::random_normal(5, 20, 2.0, &mut rng);
        let (l, g) = distill_loss(&t, &t, 6).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.max_abs() < 1e-15);
        let shifted = t.map(|v| v + 3.5);
        assert!(kl_loss(&shifted, &t).unwrap().0.abs() < 1e-12);
        assert!(bild_loss(&shifted, &t, 6).unwrap().0.abs() < 1e-12);
    }

    #[test]
    fn gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Matrix::random_normal(3, 10, 1.5, &mut rng);
        let s = Matrix::random_normal(3, 10, 1.5, &mut rng);
        let loss = |s: &Matrix| distill_loss(s, &t, 5).unwrap().0;
        let (l, g) = distill_loss(&s, &t, 5).unwrap();
        assert!(l > 0.0);
        for k in 0..s.data().len() {
            let h = 1e-6;
            let mut p = s.clone();
            p.data_mut()[k] += h;
            let mut m = s.clone();
            m.data_mut()[k] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g.data()[k]).abs() < 1e-8, "{k}: {fd} vs {}", g.data()[k]);
        }
        let tokens = [1u32, 4, 2];
        let ce = |s: &Matrix| next_token_loss(s, &tokens).unwrap().0;
        let g = next_token_loss(&s, &tokens).unwrap().1;
        let mut p = s.clone();
        p[(1, 2)] += 1e-6;
        let mut m = s.clone();
        m[(1, 2)] -= 1e-6;
        assert!(((ce(&p) - ce(&m)) / 2e-6 - g[(1, 2)]).abs() < 1e-8);
    }

    #[test]
    fn shape_and_k_errors() {
        let a = Matrix::zeros(2, 4);
        assert!(kl_loss(&a, &Matrix::zeros(2, 5)).is_err());
        assert!(bild_loss(&a, &a, 5).is_err());
        assert!(bild_loss(&a, &a, 1).is_err());
    }
}
