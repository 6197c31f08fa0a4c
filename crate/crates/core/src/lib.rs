//! Once-for-all quantization-aware training on a desk-scale supernet.

pub mod analysis;
pub mod data;
pub mod error;
pub mod numerics;
pub mod quantizer;
pub mod search;
pub mod space;
pub mod supernet;
pub mod training;

pub use error::{OqatError, Result};
