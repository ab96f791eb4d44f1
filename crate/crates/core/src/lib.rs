//! Structural channel pruning driven by a visual prompt and a recurrent
//! hypernetwork.
//!
//! The crate implements a two-stage pipeline for adapting a pre-trained CNN
//! to a downstream task while pruning whole output channels:
//!
//! 1. **Mask learning** — the backbone stays frozen; a small LSTM
//!    hypernetwork walks the network layer by layer and emits a channel mask
//!    per coupling group, conditioned on the layer's (masked) weights and on
//!    an embedding of a learnable visual prompt. Masks are binarized with a
//!    straight-through estimator so the whole thing trains end to end.
//! 2. **Fine-tuning** — masks are frozen, the surviving weights and the
//!    prompt are fine-tuned on the target task.
//!
//! Target-task labels are routed through a frequency-based label mapping
//! onto the pre-trained classifier head, so no new head is trained.
//!
//! Module map:
//! * [`netgraph`] — model graph, channel masks, coupling analysis,
//!   subnetwork extraction, checkpoint IO.
//! * [`prompt`] — visual prompts (additive / expansive) and the prompt
//!   encoder.
//! * [`hypernet`] — weight summaries, the recurrent scorer, binarization and
//!   budget allocation.
//! * [`pipeline`] — label mapping, the two training stages, transfer
//!   utilities, run records.
//! * [`analysis`] — FLOPs accounting, sparsity reports, plot emitters.
//! * [`baselines`] — magnitude and random pruning baselines.
//! * [`nn`] — the tensor kernels everything else is built from.
//! * [`data`] — in-memory datasets: synthetic tasks, CIFAR binaries, image
//!   folders.

pub mod analysis;
pub mod baselines;
pub mod data;
mod error;
pub mod hypernet;
pub mod netgraph;
pub mod nn;
pub mod pipeline;
pub mod prompt;

pub use error::{Error, Result};
