//! Atomic file output and sidecar metadata.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use faultline::Result;
use serde::Serialize;
use tempfile::NamedTempFile;

use crate::config::RunConfig;

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Writes through a temp file in the target's directory, then renames it
/// into place.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut NamedTempFile>) -> Result<()>,
{
    let dir = parent_dir(path);
    fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(&mut tmp);
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

/// `<file>.meta.json` next to a file output.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".meta.json");
    out.with_file_name(name)
}

/// Everything needed to rerun a command.
#[derive(Debug, Serialize)]
pub struct Meta<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub argv: Vec<String>,
    pub config: &'a RunConfig,
    pub model_checksum: Option<String>,
    pub outputs: Vec<String>,
    pub details: T,
}

impl<'a, T: Serialize> Meta<'a, T> {
    pub fn new(command: &'a str, config: &'a RunConfig, details: T) -> Self {
        Meta {
            tool: "faultline",
            version: env!("CARGO_PKG_VERSION"),
            command,
            argv: std::env::args().collect(),
            config,
            model_checksum: None,
            outputs: Vec::new(),
            details,
        }
    }
}
