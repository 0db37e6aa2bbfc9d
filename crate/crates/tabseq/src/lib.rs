//! Table-sequence encoders for joint named-entity recognition and relation
//! extraction.
//!
//! Two coupled encoders are learned per layer: a table encoder that builds an
//! N×N grid of pair representations with multidimensional GRUs, and a
//! sequence encoder that contextualizes token representations with attention
//! scored directly from the table. Entities come off the sequence
//! representation as BIO tags, relations off the table cells as directed
//! tags, and both objectives train jointly.
//!
//! The crate ships its own dense-tensor reverse-mode autodiff engine, the
//! codec between annotated sentences and tag tables, evaluation metrics,
//! dataset/feature file I/O, and a training loop — everything behind the
//! `tabseq` command-line tool.

pub mod codec;
pub mod data;
pub mod embed;
pub mod error;
pub mod metrics;
pub mod model;
pub mod seq;
pub mod synth;
pub mod table;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorId};
