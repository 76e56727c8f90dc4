//! Append-only JSON-lines trial log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

use super::search::{Trial, TrialHistory};

pub struct HistoryLog {
    path: PathBuf,
    file: File,
}

impl HistoryLog {
    /// Start a fresh log, truncating any existing file.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    /// Open for appending after [`read_history`] has been used to load the prefix.
    pub fn append_to(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<C: Serialize>(&mut self, trial: &Trial<C>) -> Result<()> {
        let mut line = serde_json::to_string(trial)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Load a trial log. A torn final line (no trailing newline, unparsable) is
/// dropped and the file is truncated to the last complete record.
pub fn read_history<C: DeserializeOwned>(path: impl AsRef<Path>) -> Result<TrialHistory<C>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut trials = Vec::new();
    let mut good_len = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        let complete = line.ends_with('\n');
        if line.trim().is_empty() {
            good_len += n as u64;
            continue;
        }
        match serde_json::from_str::<Trial<C>>(line.trim_end()) {
            Ok(t) => {
                trials.push(t);
                good_len += n as u64;
            }
            Err(_) if !complete => {
                let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
                f.set_len(good_len).map_err(|e| Error::io(path, e))?;
                break;
            }
            Err(e) => {
                return Err(Error::Format(format!(
                    "{}: record {} is not a trial: {e}",
                    path.display(),
                    trials.len()
                )))
            }
        }
    }
    let history = TrialHistory { trials };
    history.validate()?;
    Ok(history)
}
