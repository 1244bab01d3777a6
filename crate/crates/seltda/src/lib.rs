//! Self-taught data augmentation for visual question answering, at desk scale.
//!
//! The crate implements the full loop on a synthetic grid-world with an exact
//! answer oracle:
//!
//! 1. [`synthworld`] — procedural scenes, one-hot image tensors, question
//!    templates, the oracle, and corpus/split builders.
//! 2. [`model`] — a miniature encoder-decoder multimodal transformer with
//!    hand-written reverse-mode gradients, AdamW, and caption pretraining.
//! 3. [`templating`] — the frozen `Question: …? Answer: ….` serialization
//!    grammar shared by teacher training and pseudolabel parsing.
//! 4. [`decoding`] — nucleus (top-p) and greedy autoregressive decoding.
//! 5. [`pipeline`] — teacher training, pseudolabeling, dataset merging,
//!    student training, end-to-end runs and sweeps, persistence, config.
//! 6. [`eval`] — accuracy, robustness, domain-shift, numeric, self-agreement
//!    probe, pseudolabel audit, diversity statistics, and sweep reports.

pub mod decoding;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod seeding;
pub mod synthworld;
pub mod templating;
