//! Dense tensors and a reverse-mode tape.
//!
//! Every operation appends one node to a [`Tape`]; `backward` walks the tape
//! in reverse insertion order so each node is visited exactly once. Values are
//! checked for NaN/Inf after every op. The tape is generic over the scalar type
//! so that gradient checks can run the identical code path in `f64`.

mod tape;
mod tensor;

pub(crate) use tape::LN_EPS;
pub use tape::{Binary, Gradients, Segment, Tape, Unary, Var};
pub(crate) use tensor::{dot, gelu_tanh, softmax_row};
pub use tensor::{Real, Tensor};
