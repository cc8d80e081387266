pub mod composer;
pub mod detector;
pub mod diffcore;
pub mod error;
pub mod genmodel;
pub mod gradsuite;
pub mod latentwalk;
pub mod lossbank;
pub mod metrics;

pub use error::{Error, Result};
