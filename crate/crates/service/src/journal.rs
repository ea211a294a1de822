//! Write-ahead log of session mutations, replayed on restart.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use vqnerf_core::edit::{EditOp, EditSession};

const FORMAT: &str = "vqnerf-edit-journal";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("journal {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("journal {path} line {line}: {detail}")]
    Corrupt { path: PathBuf, line: usize, detail: String },
    #[error("journal {path} belongs to model {found} with M={found_m}, not {expected} with M={expected_m}")]
    Mismatch {
        path: PathBuf,
        found: String,
        found_m: usize,
        expected: String,
        expected_m: usize,
    },
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    model_hash: String,
    m: usize,
}

/// Append-only JSON-lines file: one header, then one [`EditOp`] per line.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens `path`, replaying any recorded ops into `session`, or starts a
    /// new journal for it.
    pub fn open(path: &Path, session: &mut EditSession) -> Result<Self, JournalError> {
        let io = |source| JournalError::Io {
            path: path.to_path_buf(),
            source,
        };
        let corrupt = |line: usize, detail: String| JournalError::Corrupt {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let existing = path.exists() && std::fs::metadata(path).map_err(io)?.len() > 0;
        if existing {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if i == 0 {
                    let h: Header = serde_json::from_str(&line).map_err(|e| corrupt(1, e.to_string()))?;
                    if h.format != FORMAT || h.version != VERSION {
                        return Err(corrupt(1, format!("unsupported {} v{}", h.format, h.version)));
                    }
                    if h.model_hash != session.model_hash() || h.m != session.m() {
                        return Err(JournalError::Mismatch {
                            path: path.to_path_buf(),
                            found: h.model_hash,
                            found_m: h.m,
                            expected: session.model_hash().to_string(),
                            expected_m: session.m(),
                        });
                    }
                    continue;
                }
                if line.trim().is_empty() {
                    continue;
                }
                let op: EditOp = serde_json::from_str(&line).map_err(|e| corrupt(i + 1, e.to_string()))?;
                session.apply(&op).map_err(|e| corrupt(i + 1, e.to_string()))?;
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if !existing {
            let header = Header {
                format: FORMAT.into(),
                version: VERSION,
                model_hash: session.model_hash().to_string(),
                m: session.m(),
            };
            let mut line = serde_json::to_string(&header).expect("header serializes");
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(io)?;
            file.sync_data().map_err(io)?;
        }
        Ok(Journal {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Durably appends one op.
    pub fn append(&mut self, op: &EditOp) -> Result<(), JournalError> {
        let mut line = serde_json::to_string(op).expect("ops serialize");
        line.push('\n');
        let io = |source| JournalError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.sync_data().map_err(io)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
