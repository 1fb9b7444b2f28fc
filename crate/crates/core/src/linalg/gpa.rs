//! Generalized Procrustes analysis over a set of equally shaped matrices.
//!
//! Each input is repeatedly aligned (left-multiplied) onto the current mean
//! shape, after which the mean is recomputed. The residual tracked is
//! `Σ_i ‖Y_i − M̄‖²_F`; both half-steps can only lower it, which is what
//! makes the iteration monotone.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::procrustes::{
    orthogonal_procrustes, rotation_procrustes_2d_blocks, BlockRotation, OrthogonalTransform,
    Pairing,
};
use crate::error::{Error, Result};

/// Transform family used at every alignment step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignmentKind {
    /// Full orthogonal group, reflections allowed.
    Orthogonal,
    /// Proper rotations acting independently in each coordinate plane.
    BlockRotation(Pairing),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HeadAlignment {
    Orthogonal(OrthogonalTransform),
    Rotation(BlockRotation),
}

impl HeadAlignment {
    pub fn identity(dim: usize, kind: AlignmentKind) -> Self {
        match kind {
            AlignmentKind::Orthogonal => Self::Orthogonal(OrthogonalTransform::identity(dim)),
            AlignmentKind::BlockRotation(p) => Self::Rotation(BlockRotation::identity(dim, p)),
        }
    }

    pub fn matrix(&self) -> Matrix {
        match self {
            Self::Orthogonal(t) => t.q.clone(),
            Self::Rotation(r) => r.to_matrix(),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        match self {
            Self::Orthogonal(t) => t.apply(x),
            Self::Rotation(r) => r.apply(x),
        }
    }

    /// `other` applied first, then `self`.
    fn then_after(&self, other: &HeadAlignment) -> HeadAlignment {
        match (self, other) {
            (Self::Orthogonal(a), Self::Orthogonal(b)) => Self::Orthogonal(OrthogonalTransform {
                q: a.q.matmul(&b.q),
            }),
            (Self::Rotation(a), Self::Rotation(b)) => Self::Rotation(a.compose(b)),
            _ => unreachable!("mixed alignment kinds"),
        }
    }
}

/// Fit the single best transform of `kind` mapping `x` onto `y`.
pub fn fit_alignment(x: &Matrix, y: &Matrix, kind: AlignmentKind) -> Result<HeadAlignment> {
    Ok(match kind {
        AlignmentKind::Orthogonal => HeadAlignment::Orthogonal(orthogonal_procrustes(x, y)?),
        AlignmentKind::BlockRotation(p) => {
            HeadAlignment::Rotation(rotation_procrustes_2d_blocks(x, y, p)?)
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpaOptions {
    /// Stop once the relative residual drop falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GpaOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GpaResult {
    /// Accumulated transform per input; `transforms[i].apply(xs[i])` is the
    /// aligned copy.
    pub transforms: Vec<HeadAlignment>,
    pub aligned: Vec<Matrix>,
    pub mean: Matrix,
    /// Residual before the first iteration and after each completed one.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

impl GpaResult {
    pub fn iterations(&self) -> usize {
        self.residuals.len() - 1
    }
}

pub fn generalized_procrustes(
    xs: &[Matrix],
    kind: AlignmentKind,
    opts: GpaOptions,
) -> Result<GpaResult> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("generalized procrustes on an empty set".into()))?;
    if opts.max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
    }
    if let Some(bad) = xs.iter().find(|x| x.shape() != first.shape()) {
        return Err(Error::Shape(format!(
            "generalized procrustes inputs {:?} and {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    for x in xs {
        x.ensure_finite("generalized procrustes input")?;
    }
    let dim = first.rows();
    let mut aligned: Vec<Matrix> = xs.to_vec();
    let mut transforms: Vec<HeadAlignment> = xs
        .iter()
        .map(|_| HeadAlignment::identity(dim, kind))
        .collect();
    let mut mean = mean_shape(&aligned);
    let mut residuals = vec![residual(&aligned, &mean)];
    let mut converged = residuals[0] == 0.0;

    let mut iter = 0;
    while !converged && iter < opts.max_iter {
        for (y, t) in aligned.iter_mut().zip(transforms.iter_mut()) {
            let step = fit_alignment(y, &mean, kind)?;
            *y = step.apply(y);
            *t = step.then_after(t);
        }
        mean = mean_shape(&aligned);
        let prev = *residuals.last().unwrap();
        let cur = residual(&aligned, &mean);
        residuals.push(cur);
        iter += 1;
        converged = cur == 0.0 || (prev - cur) <= opts.tol * prev;
    }

    Ok(GpaResult {
        transforms,
        aligned,
        mean,
        residuals,
        converged,
    })
}

fn mean_shape(ys: &[Matrix]) -> Matrix {
    let mut mean = Matrix::zeros(ys[0].rows(), ys[0].cols());
    for y in ys {
        mean.axpy(1.0, y);
    }
    mean.scale(1.0 / ys.len() as f64)
}

fn residual(ys: &[Matrix], mean: &Matrix) -> f64 {
    ys.iter().map(|y| y.sub(mean).frobenius_norm_sq()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_inputs_need_no_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::random_normal(4, 12, 1.0, &mut rng);
        for kind in [
            AlignmentKind::Orthogonal,
            AlignmentKind::BlockRotation(Pairing::HalfSplit),
        ] {
            let r = generalized_procrustes(&[x.clone(), x.clone(), x.clone()], kind, GpaOptions::default())
                .unwrap();
            for t in &r.transforms {
                assert!(t.matrix().max_abs_diff(&Matrix::identity(4)) < 1e-12);
            }
            assert!(r.mean.max_abs_diff(&x) < 1e-14);
            assert!(r.converged);
        }
    }

    #[test]
    fn rotated_pair_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::random_normal(6, 40, 1.0, &mut rng);
        let rot = BlockRotation {
            angles: vec![0.4, -1.1, 2.0],
            pairing: Pairing::HalfSplit,
        };
        let y = rot.apply(&x);
        for kind in [
            AlignmentKind::Orthogonal,
            AlignmentKind::BlockRotation(Pairing::HalfSplit),
        ] {
            let r = generalized_procrustes(&[x.clone(), y.clone()], kind, GpaOptions::default())
                .unwrap();
            assert!(r.aligned[0].sub(&r.aligned[1]).frobenius_norm() < 1e-8);
            for (t, input) in r.transforms.iter().zip([&x, &y]) {
                assert!(t.apply(input).max_abs_diff(&r.aligned[0]) < 1e-8);
            }
        }
    }

    #[test]
    fn empty_and_mismatched_rejected() {
        assert!(generalized_procrustes(&[], AlignmentKind::Orthogonal, GpaOptions::default()).is_err());
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(3, 2);
        assert!(matches!(
            generalized_procrustes(&[a, b], AlignmentKind::Orthogonal, GpaOptions::default()),
            Err(Error::Shape(_))
        ));
    }
}
