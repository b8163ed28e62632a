//! Laboratory for studying configural versus local-feature visual processing
//! with composite letter patterns.
//!
//! The crate covers the full experiment loop:
//!
//! - [`idx`] / [`pool`] — IDX corpus ingestion and seeded glyph pools
//! - [`synthetic`] — procedural letter corpus generator (IDX output) for
//!   self-contained runs
//! - [`stimulus`] — 24-class task specifications, composite rendering on a
//!   100×100 canvas, and geometric transforms (rotation, scaling, translation)
//! - [`dataset`] — binary stimulus dataset export/import
//! - [`tensor`] / [`graph`] / [`optim`] — dense tensors with reverse-mode
//!   differentiation and SGD with momentum
//! - [`model`] — small residual feedforward and lateral-recurrent convnets
//!   with layer normalization and checkpointing
//! - [`episode`] / [`train`] — one-shot four-way episodes, prototypical and
//!   classification losses, two-stage training
//! - [`eval`] / [`sensitivity`] — transformation-robustness curves, AUC
//!   summaries, cross-task matrices, and entropy-based neuron sensitivity
//! - [`pipeline`] — declarative sweep orchestration with resumable state,
//!   CSV results, and checksummed manifests

pub mod dataset;
pub mod episode;
pub mod eval;
pub mod graph;
pub mod idx;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod pool;
pub mod sensitivity;
pub mod stimulus;
pub mod synthetic;
pub mod tensor;
pub mod train;
