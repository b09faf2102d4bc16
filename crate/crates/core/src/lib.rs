pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod detect;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod segnet;
pub mod tensor;
pub mod transnet;

pub use error::{Error, Result};
pub use imaging::{BinaryMask, ImageBuffer};
