//! Artifact persistence helpers: atomic writes and required-input checks.

use std::path::{Path, PathBuf};

/// Command-level error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

/// Maps library failures onto the documented exit codes: numeric failures
/// exit 4, everything else 1 (missing inputs are caught before the library
/// sees them and exit 3).
pub fn lib_err(e: ssg_core::Error) -> CliError {
    use ssg_core::Error::*;
    let code = match &e {
        NumericOverflow(_) | NonConvergence(_) | Degenerate(_) => 4,
        _ => 1,
    };
    CliError::new(code, e.to_string())
}

/// Errors with exit 3 when a required input artifact is absent.
pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::new(
            3,
            format!("missing {what}: {}", path.display()),
        ))
    }
}

/// Writes via a temp file + rename so interrupted runs never leave a
/// truncated artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::new(1, format!("mkdir {}: {e}", dir.display())))?;
    }
    let tmp = tmp_name(path);
    std::fs::write(&tmp, bytes)
        .map_err(|e| CliError::new(1, format!("write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::new(1, format!("rename to {}: {e}", path.display())))?;
    Ok(())
}

pub fn write_atomic_str(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes())
}

fn tmp_name(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}
