//! Forward/backward compute kernels behind the tape primitives.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod rnnt;
pub mod softmax;
