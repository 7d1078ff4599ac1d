//! Atomic file output and run manifests.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use tempfile::NamedTempFile;

use crate::Failure;

pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(root)
            .map_err(|e| Failure::output(format!("cannot create {}: {e}", root.display())))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Writes `name` through a temporary file in the same directory and
    /// renames it into place, so readers never see a half-written file.
    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<(), Failure>
    where
        F: FnOnce(&mut dyn Write) -> Result<(), Failure>,
    {
        let target = self.root.join(name);
        let tmp = NamedTempFile::new_in(&self.root).map_err(|e| {
            Failure::output(format!(
                "cannot create a temporary file in {}: {e}",
                self.root.display()
            ))
        })?;
        {
            let mut w = BufWriter::new(tmp.as_file());
            f(&mut w)?;
            w.flush()
                .map_err(|e| Failure::output(format!("writing {name}: {e}")))?;
        }
        tmp.persist(&target)
            .map_err(|e| Failure::output(format!("cannot move {name} into place: {e}")))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_csv<S: Serialize>(
        &mut self,
        name: &str,
        header: Option<&[String]>,
        rows: &[S],
    ) -> Result<(), Failure> {
        self.write_with(name, |w| {
            let mut c = csv::WriterBuilder::new()
                .has_headers(header.is_none())
                .from_writer(w);
            if let Some(h) = header {
                c.write_record(h)
                    .map_err(|e| Failure::output(e.to_string()))?;
            }
            for r in rows {
                c.serialize(r).map_err(|e| Failure::output(e.to_string()))?;
            }
            c.flush().map_err(|e| Failure::output(e.to_string()))
        })
    }

    pub fn write_json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<(), Failure> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)
                .map_err(|e| Failure::output(e.to_string()))?;
            writeln!(w).map_err(|e| Failure::output(e.to_string()))
        })
    }

    /// Writes `manifest.json` listing every file written so far.
    pub fn finish(
        mut self,
        command: &str,
        config: Value,
        status: RunStatus,
        extra: Value,
    ) -> Result<(), Failure> {
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "outputs": self.written.clone(),
            "non_converged": status.non_converged,
            "partial": status.partial,
            "details": extra,
        });
        self.write_json("manifest.json", &manifest)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunStatus {
    pub non_converged: bool,
    pub partial: bool,
}

impl RunStatus {
    pub fn degraded(&self) -> bool {
        self.non_converged || self.partial
    }
}
