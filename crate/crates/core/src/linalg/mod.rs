//! Dense float64 kernels: matrix storage, Jacobi SVD, orthogonal and
//! blockwise-rotation Procrustes solvers, generalized Procrustes analysis.

mod gpa;
mod matrix;
mod procrustes;
mod svd;

pub use gpa::{
    fit_alignment, generalized_procrustes, AlignmentKind, GpaOptions, GpaResult, HeadAlignment,
};
pub use matrix::{dot, Matrix};
pub use procrustes::{
    orthogonal_procrustes, rotation_procrustes_2d_blocks, wrap_angle, BlockRotation,
    OrthogonalTransform, Pairing,
};
pub use svd::{svd, SvdResult};
