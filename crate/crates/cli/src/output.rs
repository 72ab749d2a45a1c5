//! Artifact writing: atomic files, cleanup of partial outputs on failure,
//! and the `.run.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use lumisr_core::io::write_atomic;
use serde::Serialize;
use serde_json::{json, Value};

use crate::CliError;

/// Removes every artifact it registered unless [`OutputGuard::commit`] is
/// called, so a failed run leaves nothing half-written behind.
#[derive(Default)]
pub struct OutputGuard {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a file about to be written.
    pub fn file(&mut self, path: &Path) -> PathBuf {
        self.files.push(path.to_path_buf());
        path.to_path_buf()
    }

    /// Creates `dir` if needed; a directory this run created is removed
    /// whole on failure.
    pub fn dir(&mut self, dir: &Path) -> Result<(), CliError> {
        if dir.exists() {
            if !dir.is_dir() {
                return Err(CliError::usage(format!("{} exists and is not a directory", dir.display())));
            }
            return Ok(());
        }
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        self.dirs.push(dir.to_path_buf());
        Ok(())
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        self.file(path);
        write_atomic(path, bytes)?;
        Ok(())
    }

    pub fn write_csv<R: Serialize>(&mut self, path: &Path, rows: &[R]) -> Result<(), CliError> {
        self.write(path, &csv_bytes(rows)?)
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

/// CSV with a header row. Rows with no fields still get the header when
/// `R` is a struct.
pub fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::new("compute", format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::new("io", format!("csv: {e}")))
}

/// `<out>.run.json`, next to the primary artifact.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

/// Sidecar contents. No timestamps or hostnames, so identical invocations
/// produce identical sidecars.
pub fn sidecar(command: &str, argv: &[String], config: Value, seeds: Value) -> Value {
    json!({
        "tool": "lumisr",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "argv": argv,
        "config": config,
        "seeds": seeds,
    })
}

pub fn write_sidecar(guard: &mut OutputGuard, out: &Path, value: &Value) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("json value serializes");
    bytes.push(b'\n');
    guard.write(&sidecar_path(out), &bytes)
}

/// The recorded argument list of a sidecar.
pub fn read_sidecar_argv(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::new("input", format!("{}: {e}", path.display())))?;
    let argv = v
        .get("argv")
        .and_then(Value::as_array)
        .ok_or_else(|| CliError::new("input", format!("{}: no `argv` array", path.display())))?;
    argv.iter()
        .map(|a| {
            a.as_str()
                .map(str::to_string)
                .ok_or_else(|| CliError::new("input", format!("{}: non-string argument", path.display())))
        })
        .collect()
}
