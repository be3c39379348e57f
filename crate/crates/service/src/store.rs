//! One JSON document per session in a data directory, replaced atomically
//! after every committed change.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nest_core::session::SessionDocument;

use crate::error::ApiError;

/// Display name and unit of one stimulus dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionLabel {
    pub name: String,
    #[serde(default)]
    pub unit: String,
}

/// What is written to `<id>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredSession {
    pub id: String,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    #[serde(default)]
    pub labels: Vec<DimensionLabel>,
    pub document: SessionDocument,
}

#[derive(Clone, Debug)]
pub struct Store {
    dir: PathBuf,
}

impl Store {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ApiError> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("finished")).map_err(|e| storage(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    /// Writes to a temporary file, syncs it and renames it over the target.
    pub fn save(&self, stored: &StoredSession) -> Result<(), ApiError> {
        let target = self.path(&stored.id);
        let tmp = self.dir.join(format!(".{}.json.tmp", stored.id));
        let text = serde_json::to_vec(stored).map_err(|e| ApiError::Internal(e.to_string()))?;
        let mut f = fs::File::create(&tmp).map_err(|e| storage(&tmp, e))?;
        f.write_all(&text).map_err(|e| storage(&tmp, e))?;
        f.sync_all().map_err(|e| storage(&tmp, e))?;
        fs::rename(&tmp, &target).map_err(|e| storage(&target, e))
    }

    /// Moves a finished session out of the live set.
    pub fn retire(&self, id: &str) -> Result<(), ApiError> {
        let from = self.path(id);
        let to = self.dir.join("finished").join(format!("{id}.json"));
        fs::rename(&from, &to).map_err(|e| storage(&from, e))
    }

    /// Every live session document in the directory.
    pub fn load_all(&self) -> Result<Vec<StoredSession>, ApiError> {
        let mut out = Vec::new();
        let entries = fs::read_dir(&self.dir).map_err(|e| storage(&self.dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| storage(&self.dir, e))?.path();
            let is_doc = path.extension().is_some_and(|x| x == "json")
                && !path.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'));
            if !is_doc {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| storage(&path, e))?;
            let stored: StoredSession = serde_json::from_str(&text)
                .map_err(|e| ApiError::Storage(format!("{}: {e}", path.display())))?;
            stored
                .document
                .validate()
                .map_err(|e| ApiError::Storage(format!("{}: {e}", path.display())))?;
            out.push(stored);
        }
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        Ok(out)
    }
}

fn storage(path: &Path, e: std::io::Error) -> ApiError {
    ApiError::Storage(format!("{}: {e}", path.display()))
}
