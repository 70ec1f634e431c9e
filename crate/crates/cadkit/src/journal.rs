//! Write-ahead persistence for annotation tasks.
//!
//! Every accepted write appends the task's full new state as one JSON line
//! and syncs before the write is acknowledged. Compaction folds the journal
//! into `snapshot.json` (written to a temporary file, then renamed) and
//! starts a fresh journal. Replay loads the snapshot and re-applies the
//! journal, keeping the highest version of each task; a torn final line left
//! by a crash mid-append is dropped.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::tasks::AnnotationTask;

const JOURNAL: &str = "journal.jsonl";
const SNAPSHOT: &str = "snapshot.json";

pub type TaskMap = BTreeMap<String, AnnotationTask>;

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("journal io: {0}")]
    Io(#[from] io::Error),
    #[error("{file} line {line}: {message}")]
    Corrupt {
        file: String,
        line: usize,
        message: String,
    },
}

pub struct Journal {
    dir: PathBuf,
    file: File,
    appended: usize,
    /// Compact after this many appends; 0 disables automatic compaction.
    pub compact_every: usize,
}

fn apply(tasks: &mut TaskMap, task: AnnotationTask) {
    match tasks.get(&task.task_id) {
        Some(old) if old.version >= task.version => {}
        _ => {
            tasks.insert(task.task_id.clone(), task);
        }
    }
}

fn read_snapshot(path: &Path) -> Result<TaskMap, JournalError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(TaskMap::new()),
        Err(e) => return Err(e.into()),
    };
    let tasks: Vec<AnnotationTask> = serde_json::from_str(&text).map_err(|e| JournalError::Corrupt {
        file: SNAPSHOT.into(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Ok(tasks.into_iter().map(|t| (t.task_id.clone(), t)).collect())
}

/// Journal lines after the snapshot. Returns the parsed tasks and the byte
/// length of the intact prefix.
fn read_journal(path: &Path) -> Result<(Vec<AnnotationTask>, usize), JournalError> {
    let text = match fs::read(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(e.into()),
    };
    let mut tasks = Vec::new();
    let mut good = 0;
    let mut start = 0;
    let mut line_no = 0;
    while start < text.len() {
        line_no += 1;
        let end = text[start..].iter().position(|&b| b == b'\n').map(|i| start + i);
        let line = &text[start..end.unwrap_or(text.len())];
        match serde_json::from_slice::<AnnotationTask>(line) {
            Ok(t) if end.is_some() => {
                tasks.push(t);
                good = end.unwrap() + 1;
            }
            // an unterminated or unparsable last line is a torn append
            _ if end.is_none() || end == Some(text.len() - 1) => break,
            Ok(_) => unreachable!(),
            Err(e) => {
                return Err(JournalError::Corrupt {
                    file: JOURNAL.into(),
                    line: line_no,
                    message: e.to_string(),
                })
            }
        }
        start = end.map_or(text.len(), |e| e + 1);
    }
    Ok((tasks, good))
}

impl Journal {
    /// Open (creating if needed) the journal in `dir` and replay it.
    pub fn open(dir: &Path) -> Result<(Journal, TaskMap), JournalError> {
        fs::create_dir_all(dir)?;
        let mut tasks = read_snapshot(&dir.join(SNAPSHOT))?;
        let journal_path = dir.join(JOURNAL);
        let (entries, good) = read_journal(&journal_path)?;
        let appended = entries.len();
        for t in entries {
            apply(&mut tasks, t);
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_path)?;
        // drop a torn tail so the next append starts on a clean line
        file.set_len(good as u64)?;
        Ok((
            Journal {
                dir: dir.to_owned(),
                file,
                appended,
                compact_every: 1000,
            },
            tasks,
        ))
    }

    /// Durably record `task`'s new state.
    pub fn append(&mut self, task: &AnnotationTask) -> Result<(), JournalError> {
        let mut line = serde_json::to_vec(task).expect("tasks serialize");
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        self.appended += 1;
        Ok(())
    }

    pub fn needs_compaction(&self) -> bool {
        self.compact_every > 0 && self.appended >= self.compact_every
    }

    /// Replace snapshot + journal with a snapshot of `tasks`.
    pub fn compact(&mut self, tasks: &TaskMap) -> Result<(), JournalError> {
        let tmp = self.dir.join("snapshot.json.tmp");
        let all: Vec<&AnnotationTask> = tasks.values().collect();
        let mut f = File::create(&tmp)?;
        f.write_all(&serde_json::to_vec(&all).expect("tasks serialize"))?;
        f.sync_all()?;
        fs::rename(&tmp, self.dir.join(SNAPSHOT))?;
        self.file.set_len(0)?;
        self.file.sync_all()?;
        self.appended = 0;
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
