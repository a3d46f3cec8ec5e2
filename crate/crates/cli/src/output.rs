//! Config loading, error classification and atomic artifact writes.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;

use respalloc::datasets::DatasetError;
use respalloc::models::ModelError;
use respalloc::training::TrainError;

pub const EXIT_INVALID: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// Marks an error as bad input rather than a failure while running.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(message.into()))
}

fn is_invalid_library_error(e: &(dyn std::error::Error + 'static)) -> bool {
    if e.is::<DatasetError>() || e.is::<ModelError>() {
        return true;
    }
    if let Some(e) = e.downcast_ref::<respalloc::Error>() {
        return matches!(
            e,
            respalloc::Error::Config(_) | respalloc::Error::Dataset(_) | respalloc::Error::Model(_)
        );
    }
    if let Some(e) = e.downcast_ref::<TrainError>() {
        return matches!(
            e,
            TrainError::Config(_) | TrainError::EmptyDataset | TrainError::MissingDesired { .. }
        );
    }
    false
}

pub fn exit_code(error: &anyhow::Error) -> u8 {
    let invalid = error
        .chain()
        .any(|e| e.is::<Invalid>() || is_invalid_library_error(e));
    if invalid {
        EXIT_INVALID
    } else {
        EXIT_RUNTIME
    }
}

/// Reads a JSON config file, or returns defaults when no file is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("invalid config {}: {e}", path.display())))
}

pub fn require_input(path: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    let path = path
        .clone()
        .ok_or_else(|| invalid(format!("no {what} given")))?;
    if !path.is_file() {
        return Err(invalid(format!("{what} {} does not exist", path.display())));
    }
    Ok(path)
}

/// Checks that an output's directory exists so bad paths fail before work starts.
pub fn check_output(path: &Path) -> anyhow::Result<()> {
    let dir = parent_dir(path);
    if !dir.is_dir() {
        return Err(invalid(format!(
            "output directory {} does not exist",
            dir.display()
        )));
    }
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(parent_dir(path))
        .with_context(|| format!("cannot create temporary file for {}", path.display()))?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_atomic(path, &text)
}

/// Sidecar holding the effective configuration of a CSV artifact.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

pub fn write_csv_with_meta<T: Serialize>(path: &Path, csv: &[u8], meta: &T) -> anyhow::Result<()> {
    write_atomic(path, csv)?;
    write_json(&meta_path(path), meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifies_errors() {
        assert_eq!(exit_code(&invalid("bad")), EXIT_INVALID);
        let wrapped = invalid("bad").context("while loading");
        assert_eq!(exit_code(&wrapped), EXIT_INVALID);
        assert_eq!(exit_code(&anyhow::anyhow!("solver broke")), EXIT_RUNTIME);
        let config = anyhow::Error::new(respalloc::Error::Config("x".into()));
        assert_eq!(exit_code(&config), EXIT_INVALID);
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
        assert_eq!(meta_path(&path), dir.path().join("out.csv.meta.json"));
        assert!(check_output(&dir.path().join("missing/out.csv")).is_err());
    }
}
