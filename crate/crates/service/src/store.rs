//! Sessions in an embedded key-value store; images and masks in a
//! content-addressed blob directory next to it.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use redb::{Database, ReadableTable, ReadableTableMetadata, TableDefinition};
use sha2::{Digest, Sha256};

use crate::session::SessionRecord;

const SESSIONS: TableDefinition<&str, &[u8]> = TableDefinition::new("sessions");
const DB_FILE: &str = "sessions.redb";
const BLOB_DIR: &str = "blobs";
/// Unreferenced blobs younger than this survive a sweep; their session
/// record may not be written yet.
const BLOB_GRACE: Duration = Duration::from_secs(600);

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("session store: {0}")]
    Db(String),
    #[error("blob store {path}: {cause}")]
    Io { path: String, cause: std::io::Error },
    #[error("corrupt session {id}: {cause}")]
    Corrupt { id: String, cause: serde_json::Error },
    #[error("invalid blob reference {0:?}")]
    BadRef(String),
}

fn db_err(e: impl std::fmt::Display) -> StoreError {
    StoreError::Db(e.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |cause| StoreError::Io { path: path.display().to_string(), cause }
}

pub struct SessionStore {
    db: Database,
    blobs: PathBuf,
}

impl SessionStore {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let blobs = dir.join(BLOB_DIR);
        std::fs::create_dir_all(&blobs).map_err(io_err(&blobs))?;
        let db = Database::create(dir.join(DB_FILE)).map_err(db_err)?;
        let txn = db.begin_write().map_err(db_err)?;
        txn.open_table(SESSIONS).map_err(db_err)?;
        txn.commit().map_err(db_err)?;
        Ok(Self { db, blobs })
    }

    fn blob_path(&self, reference: &str) -> Result<PathBuf, StoreError> {
        if reference.len() != 64 || !reference.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
            return Err(StoreError::BadRef(reference.to_string()));
        }
        Ok(self.blobs.join(&reference[..2]).join(reference))
    }

    /// Stores `bytes` under their SHA-256 and returns the hex digest. The
    /// file appears atomically; an existing blob only has its age reset.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let reference = hex::encode(Sha256::digest(bytes));
        let path = self.blob_path(&reference)?;
        if let Ok(f) = std::fs::File::options().append(true).open(&path) {
            f.set_modified(SystemTime::now()).map_err(io_err(&path))?;
            return Ok(reference);
        }
        let dir = path.parent().expect("blob paths have a shard directory");
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = dir.join(format!(".{reference}.{}.tmp", uuid::Uuid::new_v4().simple()));
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).and_then(|()| f.sync_all()).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(reference)
    }

    pub fn blob(&self, reference: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.blob_path(reference)?;
        std::fs::read(&path).map_err(io_err(&path))
    }

    pub fn put(&self, record: &SessionRecord) -> Result<(), StoreError> {
        let value = serde_json::to_vec(record).expect("session records serialize");
        let txn = self.db.begin_write().map_err(db_err)?;
        {
            let mut table = txn.open_table(SESSIONS).map_err(db_err)?;
            table.insert(record.session_id.as_str(), value.as_slice()).map_err(db_err)?;
        }
        txn.commit().map_err(db_err)
    }

    pub fn get(&self, id: &str) -> Result<Option<SessionRecord>, StoreError> {
        let txn = self.db.begin_read().map_err(db_err)?;
        let table = txn.open_table(SESSIONS).map_err(db_err)?;
        let Some(value) = table.get(id).map_err(db_err)? else { return Ok(None) };
        serde_json::from_slice(value.value()).map(Some).map_err(|cause| StoreError::Corrupt { id: id.to_string(), cause })
    }

    pub fn len(&self) -> Result<u64, StoreError> {
        let txn = self.db.begin_read().map_err(db_err)?;
        let table = txn.open_table(SESSIONS).map_err(db_err)?;
        table.len().map_err(db_err)
    }

    pub fn is_empty(&self) -> Result<bool, StoreError> {
        self.len().map(|n| n == 0)
    }

    /// Deletes sessions with `expired(record)` and then blobs that no
    /// remaining session references. Returns the number of sessions removed.
    pub fn sweep(&self, expired: impl Fn(&SessionRecord) -> bool) -> Result<usize, StoreError> {
        let txn = self.db.begin_write().map_err(db_err)?;
        let mut live = HashSet::new();
        let removed = {
            let mut table = txn.open_table(SESSIONS).map_err(db_err)?;
            let mut doomed = Vec::new();
            for entry in table.iter().map_err(db_err)? {
                let (key, value) = entry.map_err(db_err)?;
                let id = key.value().to_string();
                match serde_json::from_slice::<SessionRecord>(value.value()) {
                    Ok(rec) if !expired(&rec) => live.extend(rec.blob_refs()),
                    Ok(_) => doomed.push(id),
                    Err(e) => tracing::warn!(session = %id, error = %e, "skipping unreadable session during sweep"),
                }
            }
            for id in &doomed {
                table.remove(id.as_str()).map_err(db_err)?;
            }
            doomed.len()
        };
        txn.commit().map_err(db_err)?;
        self.collect_blobs(&live)?;
        Ok(removed)
    }

    fn collect_blobs(&self, live: &HashSet<String>) -> Result<(), StoreError> {
        let now = SystemTime::now();
        for shard in std::fs::read_dir(&self.blobs).map_err(io_err(&self.blobs))? {
            let shard = shard.map_err(io_err(&self.blobs))?.path();
            if !shard.is_dir() {
                continue;
            }
            for blob in std::fs::read_dir(&shard).map_err(io_err(&shard))? {
                let path = blob.map_err(io_err(&shard))?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                if live.contains(&name) {
                    continue;
                }
                let age = std::fs::metadata(&path).and_then(|m| m.modified()).ok().and_then(|t| now.duration_since(t).ok());
                if age.is_some_and(|a| a >= BLOB_GRACE) {
                    if let Err(e) = std::fs::remove_file(&path) {
                        tracing::warn!(path = %path.display(), error = %e, "could not remove blob");
                    }
                }
            }
        }
        Ok(())
    }
}
