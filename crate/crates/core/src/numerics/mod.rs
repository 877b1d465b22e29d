//! Dense matrix kernels, SVD, seeded random streams, initializers and
//! quantization emulation.

mod init;
mod matrix;
mod quantize;
mod rng;
pub mod svd;

pub use init::{init_matrix, InitScheme};
pub use matrix::Matrix;
pub use quantize::quantize_emulate;
pub use rng::RandomSource;
pub use svd::{singular_values, svd, Svd};
