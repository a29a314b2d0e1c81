//! Synthetic data, normalization, verification metrics, stations and the
//! GRID1 file format.

pub mod dataset;
pub mod grid1;
pub mod metrics;
pub mod normalize;
pub mod stations;
pub mod synthetic;

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::Result;

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
