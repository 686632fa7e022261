//! Deterministic JSON/CSV artifact writing. Reports serialize structs with
//! fixed field order through serde_json, so identical runs produce
//! byte-identical files.

use serde::Serialize;
use std::path::{Path, PathBuf};

use crate::error::Result;

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| crate::error::Error::Config(format!("serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Echoes the parsed config next to the artifacts so every run is
/// reconstructible from its output directory alone.
pub fn echo_config<T: Serialize>(dir: &Path, cfg: &T) -> Result<PathBuf> {
    write_json(dir, "config.json", cfg)
}
