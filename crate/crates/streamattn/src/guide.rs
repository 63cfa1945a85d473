//! The user guide, with every chapter included as module documentation.
//!
//! The rendered book lives under `book/` at the repository root and builds
//! with `mdbook build book`. Including each chapter here makes every code
//! block in the book a documentation test, so the guide cannot drift from
//! the API it describes: `cargo test --doc` fails if a chapter stops
//! compiling or an assertion in a snippet stops holding.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/influence-kernels.md")]
pub mod influence_kernels {}

#[doc = include_str!("../../../book/src/gated-linear-attention.md")]
pub mod gated_linear_attention {}

#[doc = include_str!("../../../book/src/local-attention.md")]
pub mod local_attention {}

#[doc = include_str!("../../../book/src/metric-readout.md")]
pub mod metric_readout {}

#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}

#[doc = include_str!("../../../book/src/command-line.md")]
pub mod command_line {}
