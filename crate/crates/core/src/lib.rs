//! Plate-level food consumption and waste estimation from segmentation
//! masks, plus a small CPU training stack (U-Net / U-Net++, class-balanced
//! cross-entropy, Adam/AdamW) for producing those masks.

pub mod augment;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod lossfn;
pub mod maskcore;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod tensor;
pub mod trainer;
pub mod wastecalc;

pub use error::{Error, Result};
