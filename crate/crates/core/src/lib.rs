pub mod autodiff;
pub mod cli;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod meta;
pub mod retriever;
pub mod verbalizer;
pub mod world;

pub use error::{Error, Result};
