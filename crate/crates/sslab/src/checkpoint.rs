//! Checkpoint files (`SSCK` container) and tensor files (`SSTF`).

use std::fs;
use std::path::Path;

use sslab_core::codec::{decode_tensor, encode_tensor, Checkpoint};
use sslab_core::Tensor;

use crate::error::{AppError, AppResult};

/// Writes through a temporary file and renames, so a crash never leaves a
/// half-written checkpoint behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> AppResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| AppError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> AppResult<()> {
    write_atomic(path, &ck.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> AppResult<Checkpoint> {
    let bytes = fs::read(path).map_err(|_| AppError::Missing(format!("no checkpoint at {}", path.display())))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| AppError::Format(format!("{}: {e}", path.display())))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> AppResult<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn load_tensor(path: &Path) -> AppResult<Tensor> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    Ok(decode_tensor(&bytes)?)
}
