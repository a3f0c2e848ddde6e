//! Append-only JSON-lines log of broker mutations.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use dataplan_core::{ExecutionPlan, ExecutionRequest, FrontExport, IndexDocument};
use serde::{Deserialize, Serialize};

pub const LOG_FILE: &str = "broker.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
// Externally tagged: internal tagging buffers content and loses integer map keys.
#[serde(rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum LogRecord {
    Index {
        version: u64,
        document: IndexDocument,
    },
    /// A submitted or replanned request; a later record for the same id
    /// supersedes earlier ones.
    Plan {
        request: ExecutionRequest,
        plan: ExecutionPlan,
        front_id: String,
        front: Box<FrontExport>,
    },
}

pub struct LogStore {
    path: PathBuf,
    file: File,
}

impl LogStore {
    /// Opens (creating if needed) the log under `dir` and returns it with
    /// every record written so far.
    pub fn open(dir: &Path) -> io::Result<(Self, Vec<LogRecord>)> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let records = if path.exists() {
            read_records(&path)?
        } else {
            Vec::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((Self { path, file }, records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &LogRecord) -> io::Result<()> {
        let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()
    }

    pub fn sync(&self) -> io::Result<()> {
        self.file.sync_all()
    }
}

fn read_records(path: &Path) -> io::Result<Vec<LogRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
    let last = lines.len().saturating_sub(1);
    for (n, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => records.push(r),
            // a torn final write from a crash; everything before it is intact
            Err(e) if n == last => {
                tracing::warn!("ignoring unreadable last log line {}: {e}", n + 1);
            }
            Err(e) => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), n + 1),
                ))
            }
        }
    }
    Ok(records)
}
