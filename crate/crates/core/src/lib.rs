//! Capsule networks with master/aide approximate routing, reference
//! dynamic/EM routing and a Sinkhorn feedback regularizer.

pub mod capconv;
pub mod capsule;
pub mod checkpoint;
pub mod data;
mod error;
pub mod gradsuite;
pub mod layers;
pub mod model;
pub mod params;
pub mod routing;
pub mod sinkhorn;
pub mod train;

pub use error::{Error, Result};
