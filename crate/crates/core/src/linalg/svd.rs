//! One-sided (Hestenes) Jacobi SVD.
//!
//! Columns of the working copy are rotated pairwise until mutually
//! orthogonal; the column norms are then the singular values. Accurate to
//! a few ulps relative to the largest singular value, which is all the
//! Procrustes solvers need for head-sized (d_H × d_H) problems.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// m × k with orthonormal columns, k = min(m, n).
    pub u: Matrix,
    /// Length k, non-negative, descending.
    pub s: Vec<f64>,
    /// k × n with orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, &s) in self.s.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul(&self.vt)
    }
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::InvalidArgument("svd of an empty matrix".into()));
    }
    a.ensure_finite("svd input")?;
    if a.rows() >= a.cols() {
        Ok(jacobi_tall(a))
    } else {
        let t = jacobi_tall(&a.transpose());
        Ok(SvdResult {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        })
    }
}

fn jacobi_tall(a: &Matrix) -> SvdResult {
    let (m, n) = a.shape();
    let at = a.transpose();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| at.row(c).to_vec()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(i, c)| (dot(c, c).sqrt(), i))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let s_max = order[0].0;
    let cutoff = s_max * f64::EPSILON * (m.max(n) as f64) * 4.0;
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vt = Matrix::zeros(n, n);
    for (k, &(sigma, idx)) in order.iter().enumerate() {
        s.push(sigma);
        vt.row_mut(k).copy_from_slice(&vcols[idx]);
        if sigma > cutoff && sigma > 0.0 {
            u_cols.push(Some(cols[idx].iter().map(|v| v / sigma).collect()));
        } else {
            u_cols.push(None);
        }
    }
    let u_cols = complete_orthonormal(u_cols, m);
    let mut u = Matrix::zeros(m, n);
    for (c, col) in u_cols.iter().enumerate() {
        for r in 0..m {
            u[(r, c)] = col[r];
        }
    }
    SvdResult { u, s, vt }
}

fn rotate_pair(vs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = vs.split_at_mut(q);
    let vp = &mut lo[p];
    let vq = &mut hi[0];
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the missing slots with unit vectors orthogonal to every other slot.
fn complete_orthonormal(slots: Vec<Option<Vec<f64>>>, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = slots.iter().flatten().cloned().collect();
    let mut candidate = 0;
    slots
        .into_iter()
        .map(|slot| match slot {
            Some(v) => v,
            None => loop {
                assert!(candidate < dim, "ran out of completion candidates");
                let mut v = vec![0.0; dim];
                v[candidate] = 1.0;
                candidate += 1;
                // two Gram-Schmidt passes for stability
                for _ in 0..2 {
                    for b in &basis {
                        let proj = dot(&v, b);
                        for (x, y) in v.iter_mut().zip(b) {
                            *x -= proj * y;
                        }
                    }
                }
                let norm = dot(&v, &v).sqrt();
                if norm > 1e-6 {
                    v.iter_mut().for_each(|x| *x /= norm);
                    basis.push(v.clone());
                    break v;
                }
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_contract(a: &Matrix, r: &SvdResult) {
        let k = a.rows().min(a.cols());
        assert_eq!(r.u.shape(), (a.rows(), k));
        assert_eq!(r.vt.shape(), (k, a.cols()));
        assert!(r.u.orthogonality_error() < 1e-12);
        assert!(r.vt.transpose().orthogonality_error() < 1e-12);
        assert!(r.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.s.iter().all(|&v| v >= 0.0));
        let resid = r.reconstruct().sub(a).frobenius_norm();
        assert!(resid <= 1e-10 * a.frobenius_norm().max(1e-300), "residual {resid}");
    }

    #[test]
    fn identity_input() {
        let r = svd(&Matrix::identity(2)).unwrap();
        assert_eq!(r.s, vec![1.0, 1.0]);
        assert!(r.u.matmul(&r.vt).max_abs_diff(&Matrix::identity(2)) < 1e-15);
    }

    #[test]
    fn diagonal_input() {
        let r = svd(&Matrix::diag(&[3.0, 2.0])).unwrap();
        assert_eq!(r.s, vec![3.0, 2.0]);
        // unsorted diagonal comes back sorted
        let r = svd(&Matrix::diag(&[1.0, 5.0, 2.0])).unwrap();
        assert_eq!(r.s, vec![5.0, 2.0, 1.0]);
    }

    #[test]
    fn random_shapes_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, n) in &[(4, 4), (6, 3), (3, 7), (1, 5), (5, 1), (8, 8)] {
            let a = Matrix::random_normal(m, n, 1.0, &mut rng);
            check_contract(&a, &svd(&a).unwrap());
        }
    }

    #[test]
    fn rank_deficient_still_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Matrix::random_normal(5, 2, 1.0, &mut rng);
        let c = Matrix::random_normal(2, 5, 1.0, &mut rng);
        let a = b.matmul(&c);
        let r = svd(&a).unwrap();
        check_contract(&a, &r);
        assert!(r.s[2] < 1e-12 * r.s[0]);
        check_contract(&Matrix::zeros(3, 3), &svd(&Matrix::zeros(3, 3)).unwrap());
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Matrix::identity(3);
        a[(1, 2)] = f64::NAN;
        assert!(matches!(svd(&a), Err(Error::NonFinite(_))));
    }
}
