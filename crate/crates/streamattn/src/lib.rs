//! Streaming attention toolkit.
//!
//! The crate implements, at desk scale, the pieces of a streaming attention
//! stack whose memory behaviour can be reasoned about through explicit
//! influence kernels:
//!
//! - [`kernel`]: influence-kernel shapes (box, block refresh, heavy tail,
//!   spike sink, channel-wise exponential), composition, and the effective
//!   horizon of an exponential channel.
//! - [`gla`]: channel-wise gated linear attention with a bounded recurrent
//!   state, its discounted least-squares objective, a test-time-training
//!   view of the same update, chunked streaming, and analytic
//!   backpropagation through time with a finite-difference checker.
//! - [`local`]: head-gated causal softmax attention over short windows,
//!   three-axis rotary position indices, and the attention-dilution bound
//!   for full-history softmax attention.
//! - [`readout`]: metric scale prediction, relative-pose fusion, and the
//!   composite pose/depth/scale loss.
//! - [`analysis`]: executable verifiers for every stability and decay bound
//!   the recurrence promises, retention-spectrum extraction, and ridge
//!   probing of recurrent state snapshots.
//! - [`stream`]: synthetic stream generation, chunked scenario runs with
//!   per-step records, kernel-shape comparisons, and the verification suite
//!   behind the command-line interface.

pub mod analysis;
pub mod error;
pub mod gla;
pub mod guide;
pub mod kernel;
pub mod linalg;
pub mod local;
pub mod readout;
pub mod stream;

pub use error::{Error, Result};
