//! Positional-aware layer-wise relevance propagation for small transformers.
//!
//! The crate answers one question: *how much of a model's decision rests on
//! where tokens are, rather than what they are?* It does so by:
//!
//! 1. running a transformer forward pass on a replayable tape
//!    ([`tape`], [`model`]) in which every positional-encoding input —
//!    learnable/sinusoidal tables, rotation matrices, score biases — is a
//!    first-class leaf,
//! 2. walking relevance from a selected logit back over the tape ([`lrp`]),
//! 3. harvesting the relevance that reaches the positional leaves as
//!    per-layer *sinks* next to the usual token-embedding attribution
//!    ([`pe_lrp`]),
//! 4. scoring the result with perturbation curves, segmentation metrics and
//!    conservation audits ([`eval`]).

pub mod eval;
pub mod lrp;
pub mod model;
pub mod pe_lrp;
pub mod serialize;
pub mod tape;
pub mod tensor;
