use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::svd::svd;
use crate::error::{Error, Result};

/// How the coordinates of a head vector are split into 2D rotation planes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Dimension `i` pairs with `i + d/2`.
    #[default]
    HalfSplit,
    /// Dimension `2i` pairs with `2i + 1`.
    Interleaved,
}

impl Pairing {
    /// The `d/2` coordinate planes; `d` must be even.
    pub fn pairs(self, dim: usize) -> Vec<(usize, usize)> {
        let half = dim / 2;
        match self {
            Pairing::HalfSplit => (0..half).map(|i| (i, i + half)).collect(),
            Pairing::Interleaved => (0..half).map(|i| (2 * i, 2 * i + 1)).collect(),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Pairing::HalfSplit => "half-split",
            Pairing::Interleaved => "interleaved",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalTransform {
    pub q: Matrix,
}

impl OrthogonalTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            q: Matrix::identity(dim),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        self.q.matmul(x)
    }

    pub fn transpose(&self) -> Self {
        Self {
            q: self.q.transpose(),
        }
    }
}

/// Block-diagonal matrix of 2D rotations, one angle per coordinate plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRotation {
    pub angles: Vec<f64>,
    pub pairing: Pairing,
}

impl BlockRotation {
    pub fn identity(dim: usize, pairing: Pairing) -> Self {
        Self {
            angles: vec![0.0; dim / 2],
            pairing,
        }
    }

    pub fn dim(&self) -> usize {
        self.angles.len() * 2
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.dim(), self.dim());
        for (&(a, b), &theta) in self.pairing.pairs(self.dim()).iter().zip(&self.angles) {
            let (sin, cos) = theta.sin_cos();
            m[(a, a)] = cos;
            m[(a, b)] = -sin;
            m[(b, a)] = sin;
            m[(b, b)] = cos;
        }
        m
    }

    /// Rotates every column of `x` (d × N).
    pub fn apply(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.rows(), self.dim(), "block rotation dimension mismatch");
        let mut out = x.clone();
        for (&(a, b), &theta) in self.pairing.pairs(self.dim()).iter().zip(&self.angles) {
            let (sin, cos) = theta.sin_cos();
            for n in 0..x.cols() {
                let xa = x[(a, n)];
                let xb = x[(b, n)];
                out[(a, n)] = cos * xa - sin * xb;
                out[(b, n)] = sin * xa + cos * xb;
            }
        }
        out
    }

    /// `other` applied first, then `self`.
    pub fn compose(&self, other: &BlockRotation) -> BlockRotation {
        assert_eq!(self.pairing, other.pairing, "pairing mismatch");
        BlockRotation {
            angles: self
                .angles
                .iter()
                .zip(&other.angles)
                .map(|(a, b)| wrap_angle(a + b))
                .collect(),
            pairing: self.pairing,
        }
    }

    pub fn inverse(&self) -> BlockRotation {
        BlockRotation {
            angles: self.angles.iter().map(|a| -a).collect(),
            pairing: self.pairing,
        }
    }
}

/// Maps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// The orthogonal `Q` minimizing `‖Q·x − y‖_F`.
///
/// With `y·xᵀ = U·S·Vᵀ` the trace `tr(Qᵀ·y·xᵀ)` is maximized by `Q = U·Vᵀ`.
pub fn orthogonal_procrustes(x: &Matrix, y: &Matrix) -> Result<OrthogonalTransform> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "procrustes inputs {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let cross = y.matmul_t(x);
    let dec = svd(&cross)?;
    Ok(OrthogonalTransform {
        q: dec.u.matmul(&dec.vt),
    })
}

/// Per-plane rotation angles maximizing `Σ_n ⟨R·x_n, y_n⟩`.
///
/// Within one plane the objective is `cos θ·Σ dot + sin θ·Σ cross`, so the
/// maximizer is `atan2(Σ cross, Σ dot)`.
pub fn rotation_procrustes_2d_blocks(
    x: &Matrix,
    y: &Matrix,
    pairing: Pairing,
) -> Result<BlockRotation> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "block procrustes inputs {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.rows() % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "block rotation needs an even dimension, got {}",
            x.rows()
        )));
    }
    x.ensure_finite("block procrustes x")?;
    y.ensure_finite("block procrustes y")?;
    let angles = pairing
        .pairs(x.rows())
        .into_iter()
        .map(|(a, b)| {
            let (xa, xb, ya, yb) = (x.row(a), x.row(b), y.row(a), y.row(b));
            let mut dot = 0.0;
            let mut cross = 0.0;
            for n in 0..x.cols() {
                dot += xa[n] * ya[n] + xb[n] * yb[n];
                cross += xa[n] * yb[n] - xb[n] * ya[n];
            }
            if dot == 0.0 && cross == 0.0 {
                0.0
            } else {
                cross.atan2(dot)
            }
        })
        .collect();
    Ok(BlockRotation { angles, pairing })
}
