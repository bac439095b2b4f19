pub mod alignment;
pub mod attention;
pub mod autograd;
pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod labeler;
pub mod memory;
pub mod model;
pub mod nn;
pub mod scene;
pub mod search;
pub mod train;

pub use error::{Error, Result};
