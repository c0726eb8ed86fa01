//! Incremental low-rank learning on small dense networks.

pub mod data;
pub mod error;
pub mod glrl;
pub mod init;
pub mod inrank;
pub mod linalg;
pub mod matrix;
pub mod net;
pub mod optim;
pub mod rng;
pub mod spectrum;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rng::Rng;
