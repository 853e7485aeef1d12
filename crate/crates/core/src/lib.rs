pub mod error;
pub mod knowledge;
pub mod localization;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod persistence;
pub mod pretrain;
pub mod stamp;

pub use error::{FastError, Result};
