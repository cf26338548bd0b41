//! Model file: magic, version, backend tag, length-prefixed JSON payload and
//! a trailing SHA-256 over everything before it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lm::{Backend, BackendKind};
use crate::partition::PartitionPlan;
use crate::prompt::PromptText;
use crate::table::{ColumnKind, Schema};
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 8] = b"AIGTMDL1";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 8 + 1 + 1 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("unsupported model file: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt model file: {0}")]
    CorruptArtifact(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// What the sampler needs to know about the fine-tuned table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableState {
    pub schema: Schema,
    pub prompt: PromptText,
    pub label_counts: Vec<(String, u64)>,
    pub required: Vec<bool>,
    pub plan: PartitionPlan,
    pub label_first: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub vocab: Vocab,
    pub backend: Backend,
    /// Every column name seen in training, with its kind.
    pub known_columns: BTreeMap<String, ColumnKind>,
    /// Set once the model has been fine-tuned on a table.
    pub table: Option<TableState>,
}

fn tag(kind: BackendKind) -> u8 {
    match kind {
        BackendKind::NGram => 0,
        BackendKind::Neural => 1,
    }
}

impl ModelArtifact {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = serde_json::to_vec(self).expect("artifact serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.push(tag(self.backend.kind()));
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArtifactError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ArtifactError::UnsupportedFormat("bad magic".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(ArtifactError::CorruptArtifact("truncated header".into()));
        }
        if bytes[8] != FORMAT_VERSION {
            return Err(ArtifactError::UnsupportedFormat(format!("version {}", bytes[8])));
        }
        let len = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
        let end = HEADER_LEN
            .checked_add(len)
            .filter(|&e| e.checked_add(DIGEST_LEN) == Some(bytes.len()))
            .ok_or_else(|| ArtifactError::CorruptArtifact("length does not match file size".into()))?;
        if Sha256::digest(&bytes[..end]).as_slice() != &bytes[end..] {
            return Err(ArtifactError::CorruptArtifact("checksum mismatch".into()));
        }
        let art: ModelArtifact = serde_json::from_slice(&bytes[HEADER_LEN..end])
            .map_err(|e| ArtifactError::CorruptArtifact(e.to_string()))?;
        if tag(art.backend.kind()) != bytes[9] {
            return Err(ArtifactError::CorruptArtifact("backend tag disagrees with payload".into()));
        }
        Ok(art)
    }

    /// Writes via a temporary file in the target directory, then renames.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ArtifactError> {
        let path = path.as_ref();
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.flush()?;
        tmp.persist(path).map_err(|e| ArtifactError::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArtifactError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
