//! Self-supervised distillation of small encoders.
//!
//! A frozen teacher, pre-trained with a momentum-contrast objective, embeds
//! augmented images; a small student is trained so that its softmax over
//! similarities to a FIFO queue of teacher embeddings matches the teacher's.
//! The crate also carries the alternative distillation objectives, the
//! evaluation protocols, and the experiment harness behind the `seed` CLI.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod autograd;
pub mod dataset;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod harness;
pub mod metrics;
pub mod optim;
pub mod pretrain;
pub mod queue;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
