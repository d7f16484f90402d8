//! Task data and task-specific architectures.

pub mod ih;
pub mod ih0;
pub mod mnist;

pub use ih::{gen_ih, gen_ih_batch, validate_ih, IHConfig, IHSample, IHValidation};
pub use ih0::{enumerate_ih0, ih0_trace, Ih0Sequence};
