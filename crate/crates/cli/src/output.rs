use std::fmt;
use std::io::Write;
use std::path::Path;

use bshare_core::{ContainerError, ErrorClass};

#[derive(Debug)]
pub enum CliError {
    Core(bshare_core::Error),
    Usage(String),
    Io(String),
}

impl CliError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CliError::Core(e) => e.class(),
            CliError::Usage(_) => ErrorClass::Usage,
            CliError::Io(_) => ErrorClass::Data,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<bshare_core::Error> for CliError {
    fn from(e: bshare_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Fails with a usage error when an input path does not exist.
pub fn input(path: &Path) -> CliResult<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!(
            "input {} does not exist",
            path.display()
        )))
    }
}

/// Writes via a temporary file in the target directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| CliError::Io(format!("writing {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
