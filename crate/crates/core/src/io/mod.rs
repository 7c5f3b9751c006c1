//! On-disk formats: binary tensor/mask/dataset containers and TOML manifests.
//!
//! Binary layouts are fixed little-endian so artifacts are bit-reproducible
//! across runs and platforms:
//! - `GSCCW1` tensor container: named f32 tensors (weights, checkpoints).
//! - `GSCCM1` mask: unit count plus LSB-first packed prune bits.
//! - `GSCCD1` dataset: images as f32 `[N,C,H,W]` plus u32 labels.

mod container;
mod datafile;
mod maskfile;
mod netfile;

pub use container::{read_tensors, write_tensors};
pub use datafile::{read_dataset, write_dataset};
pub use maskfile::{read_mask, write_mask};
pub use netfile::{load_network, save_network};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: Vec<u8> },
    #[error("malformed {what}: {msg}")]
    Malformed { what: &'static str, msg: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
}

fn malformed(what: &'static str, msg: impl Into<String>) -> IoError {
    IoError::Malformed { what, msg: msg.into() }
}
