//! Numeric foundation: dense tensors, a reverse-mode tape, and seeded
//! randomness. Everything runs in f64; the identity checks downstream are
//! asserted at 1e-8 and tighter, which 32-bit arithmetic cannot hold.

pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use ops::{sigmoid, softmax_xent, softplus, softplus_inv};
pub use rng::SeededRng;
pub use tape::{kl_diag_value, Gradients, KlAnchor, NodeId, Tape};
pub use tensor::{affine, Tensor};
