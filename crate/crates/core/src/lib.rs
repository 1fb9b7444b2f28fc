//! Multi-head to grouped-query attention conversion.
//!
//! The pipeline runs in stages that mirror the module layout:
//!
//! 1. [`model`]: a small float64 LLaMA-style decoder, KV-cache capture and
//!    the on-disk checkpoint container.
//! 2. [`similarity`]: pairwise head similarity before and after optimal
//!    orthogonal alignment ([`linalg`] holds the Procrustes solvers).
//! 3. [`grouping`]: partition heads into equal groups maximizing
//!    within-group aligned similarity.
//! 4. [`transform`]: permute heads into group order and fuse generalized
//!    Procrustes transforms into the projections without changing logits.
//! 5. [`pruning`]: mean-pooled group heads, hard-concrete masks, distillation
//!    training and GQA export.

pub mod error;
pub mod grouping;
pub mod linalg;
pub mod model;
mod par;
pub mod pruning;
pub mod similarity;
pub mod transform;

pub use error::{Error, Result};
pub use linalg::Matrix;
