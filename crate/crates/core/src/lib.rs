pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod kgc;
pub mod model;
pub mod mvtc;
pub mod numerics;
pub mod pruning;

pub use error::{ElmmError, Result};
