pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod label;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod protocol;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
