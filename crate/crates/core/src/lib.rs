pub mod enhance;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod heads;
pub mod numerics;
pub mod spatial;
pub mod train;

pub use error::{Error, Result};
