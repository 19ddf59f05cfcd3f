//! Sparse tensor encoding and completion models for composition-based
//! materials property prediction.
//!
//! The pipeline: chemical formula strings are encoded as coordinates of a
//! sparse labeled tensor ([`tensorize`]), the observed entries are split
//! into train/test sets ([`sptensor`]), a completion model is fit on the
//! training entries ([`cpd`], [`neat`], [`baseline`]), and held-out mean
//! absolute error is reported over repeated seeded splits ([`eval`]).
//!
//! Everything is deterministic given a single `u64` seed; see [`rng`] for
//! the exact seed-to-sample mapping.

pub mod baseline;
pub mod checkpoint;
pub mod cpd;
pub mod eval;
pub mod mat;
pub mod neat;
pub mod neural;
pub mod rng;
pub mod sptensor;
pub mod tensorize;
pub mod trainer;
