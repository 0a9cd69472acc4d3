pub mod analysis;
pub mod cli;
pub mod dialog;
pub mod encoder;
pub mod index;
pub mod error;
pub mod fixtures;
pub mod inpainter;
pub mod jsonl;
pub mod metrics;
pub mod mining;
pub mod model_io;
pub mod passage;
pub mod recon;
pub mod retrieval_data;

pub use error::{Error, Result};
