//! Dense linear algebra and numeric kernels.

pub mod linalg;
mod matrix;
pub mod ops;
mod rng;

pub use linalg::{pinv, svd, Svd};
pub use matrix::{dot, Matrix};
pub use ops::{cosine_similarity, max_pool_rows, softmax, Cosine};
pub use rng::SeededRng;
