//! Attention-dynamics extraction and logit-level intervention for
//! multi-head transformer traces.
//!
//! The pipeline, end to end:
//!
//! 1. [`trace`] holds the data model: token segmentation (system / vision
//!    / instruction / output) and per-step, per-layer, per-head
//!    pre-softmax logit rows. [`toy`] provides a seeded toy transformer
//!    that produces real traces; [`traceio`] reads and writes the binary
//!    trace format so external model dumps can feed the same pipeline.
//! 2. [`pad`] computes positive attention dynamics: head-averaged visual
//!    attention per layer, aggregated positive inter-layer deltas, and
//!    the static mean baseline.
//! 3. [`intervention`] applies per-head MAD scaling, lambda-weighted
//!    injection into the visual logits of one target layer, and
//!    system-token compensation, as pure row transforms and as a model
//!    hook.
//! 4. [`analysis`] reports token-group attention ratios, sink detection
//!    and recovery scoring; [`synth`] builds seeded synthetic scenarios
//!    with planted ground truth; [`metrics`] scores caption and yes/no
//!    hallucination records.
//!
//! [`api`] wraps the operations into serializable reports for the HTTP
//! service and CLI.

pub mod analysis;
pub mod api;
pub mod error;
pub mod intervention;
pub mod metrics;
pub mod numerics;
pub mod pad;
pub mod synth;
pub mod toy;
pub mod trace;
pub mod traceio;

pub use error::{Error, Result};
