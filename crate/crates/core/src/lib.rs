//! Self-distilled continuous chain-of-thought training for a small
//! decoder-only transformer, together with everything needed to exercise it:
//! a reverse-mode autodiff tape, the transformer itself, AdamW with a
//! warmup+cosine schedule, a closed-vocabulary tokenizer, a synthetic
//! multi-step arithmetic task generator, explicit-CoT and pattern baselines,
//! greedy/sampled decoding with forward-pass accounting, and interpretability
//! probes over the latent thought vectors.
//!
//! The training method is "CODI": one model acts as teacher (explicit CoT,
//! cross-entropy) and student (a fixed budget of continuous thought vectors
//! fed back autoregressively through a small projection), with a per-layer
//! hidden-state alignment loss at the answer-prompt colon tying the two.

pub mod baselines;
pub mod checkpoint;
pub mod codi;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod probe;
pub mod problems;
pub mod tape;
pub mod tokenizer;
pub mod train;
pub mod views;

pub use error::CoreError;
pub use tape::{Distance, Float, Tape, Var};
