//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every op applied to [`Var`] handles; [`Tape::backward`]
//! replays the record in reverse and returns leaf gradients. Tapes are
//! single-threaded. Independent tapes can live on separate threads.

mod gradcheck;
mod ops;
mod resize;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use ops::{concat_cols, SparseMap, MASK_NEG};
pub use resize::{bilinear_map, bilinear_taps, clamped_taps};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Scalar, Tensor};
