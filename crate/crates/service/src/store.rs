//! Append-only JSON-lines stores for selections, learning notes and the
//! action log. One writer thread owns the files; handlers talk to it over a
//! channel, so ids and log order are total.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use diag_core::embed::EmbeddingSpace;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};

use crate::pipeline::hex;

pub const NOTES_FILE: &str = "notes.jsonl";
pub const SELECTIONS_FILE: &str = "selections.jsonl";
pub const ACTIONS_FILE: &str = "actions.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Corrupt {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("store writer has stopped")]
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Select,
    Compare,
    Note,
    View,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionLogEntry {
    pub seq: u64,
    /// Unix time in milliseconds.
    pub timestamp: u64,
    pub actor: String,
    pub kind: ActionKind,
    /// Hex SHA-256 of the request payload.
    pub payload_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selection_id: u64,
    pub space: EmbeddingSpace,
    pub members: Vec<String>,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningNote {
    pub note_id: u64,
    pub author: String,
    pub card_ids: Vec<String>,
    pub text: String,
    pub created_at: u64,
}

/// One logged mutation: who did it, what kind, and the request it carried.
#[derive(Debug, Clone)]
pub struct Action {
    pub actor: String,
    pub kind: ActionKind,
    pub payload_digest: String,
}

impl Action {
    pub fn new<T: Serialize>(actor: &str, kind: ActionKind, payload: &T) -> Self {
        let bytes = serde_json::to_vec(payload).expect("request payload serializes");
        Self {
            actor: actor.to_string(),
            kind,
            payload_digest: hex(&Sha256::digest(&bytes)),
        }
    }
}

type Reply<T> = oneshot::Sender<Result<T, StoreError>>;

enum Command {
    Select {
        space: EmbeddingSpace,
        members: Vec<String>,
        action: Action,
        reply: Reply<Selection>,
    },
    Compare {
        action: Action,
        reply: Reply<ActionLogEntry>,
    },
    Note {
        author: String,
        card_ids: Vec<String>,
        text: String,
        action: Action,
        reply: Reply<LearningNote>,
    },
    Notes {
        card_id: Option<String>,
        reply: oneshot::Sender<Vec<LearningNote>>,
    },
    Actions {
        reply: oneshot::Sender<Vec<ActionLogEntry>>,
    },
    Selections {
        reply: oneshot::Sender<Vec<Selection>>,
    },
}

/// Cloneable handle to the writer thread.
#[derive(Clone)]
pub struct Stores {
    tx: mpsc::UnboundedSender<Command>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads every complete line. A final line without a newline is a torn
/// write from a crash and is cut off; any other bad line is an error.
fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut good_len = 0u64;
    let mut line = String::new();
    let mut n = 0;
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(|e| io_err(path, e))?;
        if read == 0 {
            break;
        }
        n += 1;
        if !line.ends_with('\n') {
            let f = OpenOptions::new()
                .write(true)
                .open(path)
                .map_err(|e| io_err(path, e))?;
            f.set_len(good_len).map_err(|e| io_err(path, e))?;
            break;
        }
        good_len += read as u64;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                path: path.display().to_string(),
                line: n,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

struct Log<T> {
    path: PathBuf,
    file: File,
    items: Vec<T>,
}

impl<T: Serialize + DeserializeOwned> Log<T> {
    fn open(path: PathBuf) -> Result<Self, StoreError> {
        let items = read_lines(&path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        Ok(Self { path, file, items })
    }

    fn append(&mut self, item: T) -> Result<&T, StoreError> {
        let mut line = serde_json::to_string(&item).expect("store record serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| io_err(&self.path, e))?;
        self.items.push(item);
        Ok(self.items.last().expect("just pushed"))
    }
}

struct Writer {
    notes: Log<LearningNote>,
    selections: Log<Selection>,
    actions: Log<ActionLogEntry>,
}

impl Writer {
    fn log(&mut self, action: Action) -> Result<ActionLogEntry, StoreError> {
        let seq = self.actions.items.last().map_or(1, |a| a.seq + 1);
        let entry = ActionLogEntry {
            seq,
            timestamp: now_ms(),
            actor: action.actor,
            kind: action.kind,
            payload_digest: action.payload_digest,
        };
        self.actions.append(entry).cloned()
    }

    fn handle(&mut self, cmd: Command) {
        // a dropped reply means the request was cancelled; the write stands
        match cmd {
            Command::Select {
                space,
                members,
                action,
                reply,
            } => {
                let id = self
                    .selections
                    .items
                    .last()
                    .map_or(1, |s| s.selection_id + 1);
                let sel = Selection {
                    selection_id: id,
                    space,
                    members,
                    created_at: now_ms(),
                };
                let res = self.selections.append(sel).cloned();
                let res = res.and_then(|s| self.log(action).map(|_| s));
                let _ = reply.send(res);
            }
            Command::Compare { action, reply } => {
                let _ = reply.send(self.log(action));
            }
            Command::Note {
                author,
                card_ids,
                text,
                action,
                reply,
            } => {
                let id = self.notes.items.last().map_or(1, |n| n.note_id + 1);
                let note = LearningNote {
                    note_id: id,
                    author,
                    card_ids,
                    text,
                    created_at: now_ms(),
                };
                let res = self.notes.append(note).cloned();
                let res = res.and_then(|n| self.log(action).map(|_| n));
                let _ = reply.send(res);
            }
            Command::Notes { card_id, reply } => {
                let notes = self
                    .notes
                    .items
                    .iter()
                    .filter(|n| card_id.as_ref().is_none_or(|c| n.card_ids.contains(c)))
                    .cloned()
                    .collect();
                let _ = reply.send(notes);
            }
            Command::Actions { reply } => {
                let _ = reply.send(self.actions.items.clone());
            }
            Command::Selections { reply } => {
                let _ = reply.send(self.selections.items.clone());
            }
        }
    }
}

impl Stores {
    /// Opens (or creates) the stores under `dir` and starts the writer.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut writer = Writer {
            notes: Log::open(dir.join(NOTES_FILE))?,
            selections: Log::open(dir.join(SELECTIONS_FILE))?,
            actions: Log::open(dir.join(ACTIONS_FILE))?,
        };
        let (tx, mut rx) = mpsc::unbounded_channel();
        std::thread::Builder::new()
            .name("store-writer".into())
            .spawn(move || {
                while let Some(cmd) = rx.blocking_recv() {
                    writer.handle(cmd);
                }
            })
            .map_err(|e| io_err(dir, e))?;
        Ok(Self { tx })
    }

    async fn call<T>(
        &self,
        make: impl FnOnce(oneshot::Sender<T>) -> Command,
    ) -> Result<T, StoreError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(make(reply)).map_err(|_| StoreError::Closed)?;
        rx.await.map_err(|_| StoreError::Closed)
    }

    pub async fn record_selection(
        &self,
        space: EmbeddingSpace,
        members: Vec<String>,
        action: Action,
    ) -> Result<Selection, StoreError> {
        self.call(|reply| Command::Select {
            space,
            members,
            action,
            reply,
        })
        .await?
    }

    pub async fn record_compare(&self, action: Action) -> Result<ActionLogEntry, StoreError> {
        self.call(|reply| Command::Compare { action, reply })
            .await?
    }

    pub async fn add_note(
        &self,
        author: String,
        card_ids: Vec<String>,
        text: String,
        action: Action,
    ) -> Result<LearningNote, StoreError> {
        self.call(|reply| Command::Note {
            author,
            card_ids,
            text,
            action,
            reply,
        })
        .await?
    }

    pub async fn notes(&self, card_id: Option<String>) -> Result<Vec<LearningNote>, StoreError> {
        self.call(|reply| Command::Notes { card_id, reply }).await
    }

    pub async fn actions(&self) -> Result<Vec<ActionLogEntry>, StoreError> {
        self.call(|reply| Command::Actions { reply }).await
    }

    pub async fn selections(&self) -> Result<Vec<Selection>, StoreError> {
        self.call(|reply| Command::Selections { reply }).await
    }
}
