use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

pub const DONE_MARKER: &str = "DONE";
pub const FAILED_MARKER: &str = "FAILED";

/// Output directory of one run. `DONE` is written last; a directory without
/// it holds partial outputs.
#[derive(Clone, Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates the directory and clears markers from an earlier attempt.
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        for m in [DONE_MARKER, FAILED_MARKER] {
            let p = path.join(m);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes through a buffered writer and flushes.
    pub fn write_with(&self, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let p = self.file(name);
        let file = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(|e| Error::io(&p, e))
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write_with(name, |w| {
            writeln!(w, "{text}").map_err(|e| Error::io(name, e))
        })
    }

    /// Closes the run with a status line.
    pub fn finish(&self, status: &str) -> Result<()> {
        let p = self.file(DONE_MARKER);
        fs::write(&p, format!("{status}\n")).map_err(|e| Error::io(&p, e))
    }

    /// Records an aborted run.
    pub fn fail(&self, message: &str) -> Result<()> {
        let p = self.file(FAILED_MARKER);
        fs::write(&p, format!("{message}\n")).map_err(|e| Error::io(&p, e))
    }

    pub fn is_done(path: &Path) -> bool {
        path.join(DONE_MARKER).is_file()
    }
}
