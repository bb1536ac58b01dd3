//! Per-user accounts and isolated file storage.
//!
//! Each account owns exactly one workspace: a directory under the storage
//! root plus an index recording size, checksum and kind of every stored
//! file. Accounting and file mutations are serialized per workspace; two
//! workspaces never contend for the same lock.

mod account;
mod path;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Duration;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use account::{AccountInfo, SessionToken, UserId};
pub use path::normalize_rel_path;

use crate::clock::{Clock, SystemClock};
use account::{Session, UserAccount};

pub const DEFAULT_QUOTA_BYTES: u64 = 2 * 1024 * 1024 * 1024;
pub const MIN_PASSWORD_LEN: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("authentication failed")]
    Auth,
    #[error("rejected path: {0}")]
    Security(String),
    #[error("quota exceeded: need {needed} bytes, {available} available")]
    Quota { needed: u64, available: u64 },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkspaceId(pub String);

impl std::fmt::Display for WorkspaceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Image,
    Annotation,
    Record,
    Labelmap,
    Config,
    Checkpoint,
    Export,
    Other,
}

impl FileKind {
    pub fn infer(rel_path: &str) -> Self {
        if rel_path.starts_with("exports/") {
            return FileKind::Export;
        }
        let ext = rel_path
            .rsplit_once('.')
            .map(|(_, e)| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "png" | "jpg" | "jpeg" => FileKind::Image,
            "xml" | "csv" => FileKind::Annotation,
            "record" | "tfrecord" => FileKind::Record,
            "pbtxt" => FileKind::Labelmap,
            "config" | "cfg" => FileKind::Config,
            "ckpt" => FileKind::Checkpoint,
            _ => FileKind::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredFile {
    pub rel_path: String,
    pub size_bytes: u64,
    pub checksum: String,
    pub kind: FileKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workspace {
    pub workspace_id: WorkspaceId,
    pub owner: UserId,
    pub quota_bytes: u64,
    pub used_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct StoreSettings {
    pub default_quota_bytes: u64,
    pub token_ttl: Duration,
    pub hash_iterations: u32,
}

impl Default for StoreSettings {
    fn default() -> Self {
        Self {
            default_quota_bytes: DEFAULT_QUOTA_BYTES,
            token_ttl: Duration::hours(24),
            hash_iterations: account::DEFAULT_HASH_ITERATIONS,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WorkspaceIndex {
    meta: Workspace,
    files: BTreeMap<String, StoredFile>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct AccountsFile {
    accounts: BTreeMap<String, UserAccount>,
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Writes `data` to `dest` through a sibling temp file and a rename, so
/// readers see either the old or the new content.
pub(crate) fn write_atomic(dest: &Path, data: &[u8]) -> io::Result<()> {
    let dir = dest.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(data)?;
    tmp.as_file().sync_all()?;
    tmp.persist(dest).map_err(|e| e.error)?;
    Ok(())
}

pub struct WorkspaceStore {
    root: PathBuf,
    settings: StoreSettings,
    clock: Arc<dyn Clock>,
    accounts: RwLock<AccountsFile>,
    workspaces: RwLock<HashMap<WorkspaceId, Arc<Mutex<WorkspaceIndex>>>>,
    sessions: Mutex<HashMap<String, Session>>,
}

impl std::fmt::Debug for WorkspaceStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkspaceStore")
            .field("root", &self.root)
            .finish_non_exhaustive()
    }
}

impl WorkspaceStore {
    pub fn open(root: impl Into<PathBuf>, settings: StoreSettings) -> Result<Self, WorkspaceError> {
        Self::open_with_clock(root, settings, Arc::new(SystemClock))
    }

    /// Opens (or initializes) a store rooted at `root`, reloading any
    /// accounts and workspace indexes already on disk.
    pub fn open_with_clock(
        root: impl Into<PathBuf>,
        settings: StoreSettings,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, WorkspaceError> {
        let root = root.into();
        fs::create_dir_all(root.join("workspaces"))?;
        let accounts_path = root.join("accounts.json");
        let accounts: AccountsFile = if accounts_path.exists() {
            serde_json::from_slice(&fs::read(&accounts_path)?)
                .map_err(|e| WorkspaceError::Corrupt(format!("accounts.json: {e}")))?
        } else {
            AccountsFile::default()
        };
        let mut workspaces = HashMap::new();
        for account in accounts.accounts.values() {
            let index_path = root
                .join("workspaces")
                .join(&account.workspace_id.0)
                .join("index.json");
            let index: WorkspaceIndex = serde_json::from_slice(&fs::read(&index_path)?)
                .map_err(|e| WorkspaceError::Corrupt(format!("{}: {e}", index_path.display())))?;
            workspaces.insert(account.workspace_id.clone(), Arc::new(Mutex::new(index)));
        }
        Ok(Self {
            root,
            settings,
            clock,
            accounts: RwLock::new(accounts),
            workspaces: RwLock::new(workspaces),
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn workspace_dir(&self, ws: &WorkspaceId) -> PathBuf {
        self.root.join("workspaces").join(&ws.0)
    }

    pub(crate) fn files_dir(&self, ws: &WorkspaceId) -> PathBuf {
        self.workspace_dir(ws).join("files")
    }

    /// Absolute location of a stored file. Only for crate-internal readers
    /// that need a real path (trainer launch, archiving).
    pub(crate) fn disk_path(&self, ws: &WorkspaceId, rel_path: &str) -> PathBuf {
        self.files_dir(ws).join(rel_path)
    }

    fn persist_accounts(&self, accounts: &AccountsFile) -> Result<(), WorkspaceError> {
        let bytes = serde_json::to_vec_pretty(accounts).expect("accounts serialize");
        write_atomic(&self.root.join("accounts.json"), &bytes)?;
        Ok(())
    }

    fn persist_index(&self, index: &WorkspaceIndex) -> Result<(), WorkspaceError> {
        let bytes = serde_json::to_vec_pretty(index).expect("index serialize");
        write_atomic(
            &self.workspace_dir(&index.meta.workspace_id).join("index.json"),
            &bytes,
        )?;
        Ok(())
    }

    fn handle(&self, ws: &WorkspaceId) -> Result<Arc<Mutex<WorkspaceIndex>>, WorkspaceError> {
        self.workspaces
            .read()
            .get(ws)
            .cloned()
            .ok_or_else(|| WorkspaceError::NotFound(format!("workspace {ws}")))
    }

    pub fn create_account(
        &self,
        display_name: &str,
        password: &str,
    ) -> Result<(AccountInfo, Workspace), WorkspaceError> {
        let display_name = display_name.trim();
        if display_name.is_empty() {
            return Err(WorkspaceError::Validation("display_name must be non-empty".into()));
        }
        if password.chars().count() < MIN_PASSWORD_LEN {
            return Err(WorkspaceError::Validation(format!(
                "password must be at least {MIN_PASSWORD_LEN} characters"
            )));
        }
        // Hash outside the lock; it is deliberately slow.
        let credential_hash = account::hash_password(password, self.settings.hash_iterations);

        let mut accounts = self.accounts.write();
        if accounts.accounts.values().any(|a| a.display_name == display_name) {
            return Err(WorkspaceError::Conflict(format!(
                "display_name `{display_name}` already taken"
            )));
        }
        let user_id = UserId(uuid::Uuid::new_v4().simple().to_string());
        let workspace_id = WorkspaceId(uuid::Uuid::new_v4().simple().to_string());
        let account = UserAccount {
            user_id: user_id.clone(),
            display_name: display_name.to_string(),
            credential_hash,
            created_at: self.clock.now(),
            workspace_id: workspace_id.clone(),
        };
        let meta = Workspace {
            workspace_id: workspace_id.clone(),
            owner: user_id.clone(),
            quota_bytes: self.settings.default_quota_bytes,
            used_bytes: 0,
        };
        let index = WorkspaceIndex {
            meta: meta.clone(),
            files: BTreeMap::new(),
        };
        fs::create_dir_all(self.files_dir(&workspace_id))?;
        self.persist_index(&index)?;
        accounts.accounts.insert(user_id.0.clone(), account.clone());
        if let Err(e) = self.persist_accounts(&accounts) {
            accounts.accounts.remove(&user_id.0);
            return Err(e);
        }
        self.workspaces
            .write()
            .insert(workspace_id, Arc::new(Mutex::new(index)));
        Ok((account.info(), meta))
    }

    /// Wrong password and unknown user produce the same error, and take the
    /// same amount of hashing work.
    pub fn authenticate(
        &self,
        display_name: &str,
        password: &str,
    ) -> Result<SessionToken, WorkspaceError> {
        let found = self
            .accounts
            .read()
            .accounts
            .values()
            .find(|a| a.display_name == display_name.trim())
            .cloned();
        let ok = match &found {
            Some(account) => account::verify_password(password, &account.credential_hash),
            None => {
                let _ = account::verify_password(password, &account::dummy_hash(self.settings.hash_iterations));
                false
            }
        };
        let account = match (ok, found) {
            (true, Some(a)) => a,
            _ => return Err(WorkspaceError::Auth),
        };
        let token = account::new_token();
        let expires_at = self.clock.now() + self.settings.token_ttl;
        self.sessions.lock().insert(
            token.clone(),
            Session {
                user_id: account.user_id.clone(),
                expires_at,
            },
        );
        Ok(SessionToken { token, expires_at })
    }

    /// Resolves a bearer token to its account and workspace.
    pub fn resolve_token(&self, token: &str) -> Result<(AccountInfo, WorkspaceId), WorkspaceError> {
        let now = self.clock.now();
        let user_id = {
            let mut sessions = self.sessions.lock();
            match sessions.get(token) {
                Some(s) if s.expires_at > now => s.user_id.clone(),
                Some(_) => {
                    sessions.remove(token);
                    return Err(WorkspaceError::Auth);
                }
                None => return Err(WorkspaceError::Auth),
            }
        };
        let accounts = self.accounts.read();
        let account = accounts.accounts.get(&user_id.0).ok_or(WorkspaceError::Auth)?;
        Ok((account.info(), account.workspace_id.clone()))
    }

    pub fn workspace(&self, ws: &WorkspaceId) -> Result<Workspace, WorkspaceError> {
        Ok(self.handle(ws)?.lock().meta.clone())
    }

    pub fn put_file(
        &self,
        ws: &WorkspaceId,
        rel_path: &str,
        content: &[u8],
        kind: Option<FileKind>,
    ) -> Result<StoredFile, WorkspaceError> {
        let rel_path = normalize_rel_path(rel_path)?;
        let handle = self.handle(ws)?;
        let mut index = handle.lock();

        for existing in index.files.keys() {
            if existing.starts_with(&format!("{rel_path}/"))
                || rel_path.starts_with(&format!("{existing}/"))
            {
                return Err(WorkspaceError::Conflict(format!(
                    "`{rel_path}` collides with existing `{existing}`"
                )));
            }
        }
        let previous = index.files.get(&rel_path).map(|f| f.size_bytes).unwrap_or(0);
        let base = index.meta.used_bytes - previous;
        let needed = content.len() as u64;
        let available = index.meta.quota_bytes.saturating_sub(base);
        if needed > available {
            return Err(WorkspaceError::Quota { needed, available });
        }

        write_atomic(&self.disk_path(ws, &rel_path), content)?;
        let stored = StoredFile {
            kind: kind.unwrap_or_else(|| FileKind::infer(&rel_path)),
            rel_path: rel_path.clone(),
            size_bytes: needed,
            checksum: sha256_hex(content),
        };
        index.files.insert(rel_path, stored.clone());
        index.meta.used_bytes = base + needed;
        self.persist_index(&index)?;
        Ok(stored)
    }

    pub fn list_files(&self, ws: &WorkspaceId, prefix: Option<&str>) -> Result<Vec<StoredFile>, WorkspaceError> {
        let handle = self.handle(ws)?;
        let index = handle.lock();
        let prefix = prefix.unwrap_or("");
        Ok(index
            .files
            .values()
            .filter(|f| f.rel_path.starts_with(prefix))
            .cloned()
            .collect())
    }

    pub fn stat(&self, ws: &WorkspaceId, rel_path: &str) -> Result<StoredFile, WorkspaceError> {
        let rel_path = normalize_rel_path(rel_path)?;
        self.handle(ws)?
            .lock()
            .files
            .get(&rel_path)
            .cloned()
            .ok_or(WorkspaceError::NotFound(rel_path))
    }

    pub fn exists(&self, ws: &WorkspaceId, rel_path: &str) -> bool {
        self.stat(ws, rel_path).is_ok()
    }

    pub fn get_file(&self, ws: &WorkspaceId, rel_path: &str) -> Result<Vec<u8>, WorkspaceError> {
        let rel_path = normalize_rel_path(rel_path)?;
        let handle = self.handle(ws)?;
        let index = handle.lock();
        let meta = index
            .files
            .get(&rel_path)
            .ok_or_else(|| WorkspaceError::NotFound(rel_path.clone()))?;
        let bytes = fs::read(self.disk_path(ws, &rel_path))?;
        if sha256_hex(&bytes) != meta.checksum {
            return Err(WorkspaceError::Corrupt(format!("checksum mismatch for `{rel_path}`")));
        }
        Ok(bytes)
    }

    pub fn delete_file(&self, ws: &WorkspaceId, rel_path: &str) -> Result<(), WorkspaceError> {
        let rel_path = normalize_rel_path(rel_path)?;
        let handle = self.handle(ws)?;
        let mut index = handle.lock();
        let meta = index
            .files
            .remove(&rel_path)
            .ok_or_else(|| WorkspaceError::NotFound(rel_path.clone()))?;
        match fs::remove_file(self.disk_path(ws, &rel_path)) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => {
                index.files.insert(rel_path, meta);
                return Err(e.into());
            }
        }
        index.meta.used_bytes -= meta.size_bytes;
        self.persist_index(&index)?;
        Ok(())
    }

    /// Deletes every file under `prefix/`. Returns how many were removed.
    pub fn delete_prefix(&self, ws: &WorkspaceId, prefix: &str) -> Result<usize, WorkspaceError> {
        let prefix = format!("{}/", normalize_rel_path(prefix)?);
        let doomed: Vec<String> = self
            .list_files(ws, Some(&prefix))?
            .into_iter()
            .map(|f| f.rel_path)
            .collect();
        for path in &doomed {
            self.delete_file(ws, path)?;
        }
        Ok(doomed.len())
    }

    /// Writes a tar archive of every file under `prefix/`, with entry names
    /// relative to the prefix.
    pub fn archive_prefix(&self, ws: &WorkspaceId, prefix: &str) -> Result<Vec<u8>, WorkspaceError> {
        let prefix = format!("{}/", normalize_rel_path(prefix)?);
        let files = self.list_files(ws, Some(&prefix))?;
        if files.is_empty() {
            return Err(WorkspaceError::NotFound(prefix));
        }
        let mut builder = tar::Builder::new(Vec::new());
        for file in files {
            let bytes = self.get_file(ws, &file.rel_path)?;
            let mut header = tar::Header::new_gnu();
            header.set_size(bytes.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_cksum();
            builder.append_data(&mut header, &file.rel_path[prefix.len()..], bytes.as_slice())?;
        }
        Ok(builder.into_inner()?)
    }
}
