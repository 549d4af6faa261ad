//! Run directories: `<root>/<command>-<YYYYmmdd-HHMMSS>-s<seed>`, each holding
//! the resolved configuration echo.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{AppError, AppResult};

pub const RUNS_DIR_ENV: &str = "SSLAB_RUNS_DIR";
pub const CONFIG_ECHO: &str = "config.txt";

/// Output root: `$SSLAB_RUNS_DIR` or `runs` in the working directory.
pub fn runs_root() -> PathBuf {
    match env::var_os(RUNS_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("runs"),
    }
}

/// Creates a fresh run directory under `root`; a numeric suffix keeps two
/// runs started in the same second apart.
pub fn create_run_dir(root: &Path, command: &str, seed: u64) -> AppResult<PathBuf> {
    fs::create_dir_all(root).map_err(|e| AppError::io(root, e))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{command}-{stamp}-s{seed}");
    for k in 1.. {
        let name = if k == 1 { base.clone() } else { format!("{base}-{k}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(AppError::io(&dir, e)),
        }
    }
    unreachable!()
}

pub fn write_echo(dir: &Path, cfg: &RunConfig) -> AppResult<()> {
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, cfg.echo()).map_err(|e| AppError::io(&path, e))
}
