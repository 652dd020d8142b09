//! Two-stage multilingual image captioning with cycle-consistent attention.
//!
//! An English decoder attends over image regions; a German decoder attends
//! over both the regions and an encoding of the English caption. Training
//! adds a penalty that ties the German→region attention to the composition
//! of German→English and English→region attention.

pub mod attention;
pub mod config;
pub mod cycle;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod models;
pub mod tensor;
pub mod train;

pub use error::{Category, Error, Result};
