//! Multi-mask tensorized self-attention (MTSA).
//!
//! Two independent routes compute the same attention: [`attn_ref`]
//! materializes the full `n × n × d_h` score tensor, while [`mtsa_fast`]
//! only ever forms matrices. [`grad`] differentiates the fast route,
//! [`toytask`] trains it on a synthetic order task, and [`bench`],
//! [`equiv`] and [`heatmap`] back the command-line tools.

pub mod attn_ref;
pub mod bench;
pub mod equiv;
mod error;
pub mod grad;
pub mod heatmap;
pub mod masks;
pub mod mtsa_fast;
pub mod numkit;
pub mod toytask;

pub use error::{Error, Result};
