pub mod autograd;
pub mod centerline;
pub mod crossval;
pub mod error;
pub mod evaluation;
pub mod heatmap;
pub mod network;
pub mod phantom;
pub mod pipeline;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
