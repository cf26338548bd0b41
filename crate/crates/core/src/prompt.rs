//! Prompt prefixes built from table metadata, either from a local template or
//! from a chat-completion endpoint with an on-disk cache.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::table::Schema;

/// Environment variable holding the endpoint credential.
pub const API_KEY_ENV: &str = "AIGT_API_KEY";

/// Remote summaries are clamped to this many words.
pub const MAX_PROMPT_WORDS: usize = 200;

#[derive(Debug, Error)]
pub enum MetadataError {
    #[error("metadata target `{meta}` does not match schema target `{schema}`")]
    TargetMismatch { meta: String, schema: String },
    #[error("metadata describes unknown column `{0}`")]
    UnknownColumn(String),
    #[error("metadata json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Table metadata as stored in the JSON sidecar file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(default)]
    pub caption: String,
    #[serde(rename = "target")]
    pub target_name: String,
    #[serde(rename = "features", default)]
    pub feature_descriptions: BTreeMap<String, String>,
}

impl Metadata {
    pub fn new(caption: impl Into<String>, target_name: impl Into<String>) -> Self {
        Self {
            caption: caption.into(),
            target_name: target_name.into(),
            feature_descriptions: BTreeMap::new(),
        }
    }

    pub fn with_description(mut self, column: &str, description: &str) -> Self {
        self.feature_descriptions
            .insert(column.to_string(), description.to_string());
        self
    }

    pub fn from_json(text: &str) -> Result<Self, MetadataError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, MetadataError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), MetadataError> {
        if self.target_name != schema.target().name {
            return Err(MetadataError::TargetMismatch {
                meta: self.target_name.clone(),
                schema: schema.target().name.clone(),
            });
        }
        if let Some(k) = self
            .feature_descriptions
            .keys()
            .find(|k| schema.index_of(k).is_none())
        {
            return Err(MetadataError::UnknownColumn(k.clone()));
        }
        Ok(())
    }

    fn canonical_json(&self) -> String {
        // Field order is fixed by the struct and the map is sorted.
        serde_json::to_string(self).expect("metadata serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptOrigin {
    LocalTemplate,
    RemoteModel,
    CachedRemote,
    /// Prompt switched off (ablation); the text is empty.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    text: String,
    origin: PromptOrigin,
}

impl PromptText {
    /// Collapses whitespace runs to single spaces; a trailing whitespace run
    /// becomes one trailing space.
    pub fn new(text: &str, origin: PromptOrigin) -> Self {
        Self {
            text: normalize_whitespace(text),
            origin,
        }
    }

    pub fn disabled() -> Self {
        Self {
            text: String::new(),
            origin: PromptOrigin::Disabled,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn origin(&self) -> PromptOrigin {
        self.origin
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

fn normalize_whitespace(text: &str) -> String {
    let body = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if !body.is_empty() && text.ends_with(char::is_whitespace) {
        body + " "
    } else {
        body
    }
}

fn trim_sentence(s: &str) -> &str {
    s.trim().trim_end_matches('.').trim_end()
}

/// Deterministic template prompt. Ends with a single space.
pub fn build_prompt_local(meta: &Metadata, schema: &Schema) -> PromptText {
    let mut out = String::new();
    let caption = trim_sentence(&meta.caption);
    if !caption.is_empty() {
        out.push_str(&format!("The dataset is about {caption}. "));
    }
    out.push_str(&format!("The target is {}. ", meta.target_name));
    let described = meta
        .feature_descriptions
        .values()
        .any(|d| !d.trim().is_empty());
    if described {
        let items: Vec<String> = schema
            .feature_indices()
            .into_iter()
            .map(|i| {
                let name = &schema.columns()[i].name;
                match meta.feature_descriptions.get(name).map(|d| trim_sentence(d)) {
                    Some(d) if !d.is_empty() => format!("{name}: {d}"),
                    _ => name.clone(),
                }
            })
            .collect();
        out.push_str(&format!(
            "The features and their explanations: {}. ",
            items.join("; ")
        ));
    }
    PromptText::new(&out, PromptOrigin::LocalTemplate)
}

/// Instruction sent to the completion endpoint.
pub fn remote_instruction(meta: &Metadata, schema: &Schema) -> String {
    let columns: Vec<&str> = schema.columns().iter().map(|c| c.name.as_str()).collect();
    let meanings: Vec<String> = meta
        .feature_descriptions
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect();
    format!(
        "Following is a description of a dataset, a profile of an object from the dataset, and a target description. \
The objective is to predict the target based on the information provided about the object.\n\
Dataset description: {caption},\n\
feature name: {columns}.\n\
Target: {target}.\n\
the meaning of columns:{meanings}\n\
Information to be returned includes: 1) a brief summary of the table description (such as field and background); \
2) the target columns; 3) the features and their explanations. Here is an example output: The dataset is about economics, \
the target is income, and the features along with their explanations are as follows: ID represents a unique identifier for each user; \
Age denotes the age of each user. Make it brief but informative. Try to limit it to {MAX_PROMPT_WORDS} words.",
        caption = meta.caption,
        columns = columns.join(", "),
        target = meta.target_name,
        meanings = meanings.join("; "),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub cache_dir: PathBuf,
    pub timeout: Duration,
}

impl RemoteConfig {
    /// Reads the credential from [`API_KEY_ENV`].
    pub fn from_env(url: impl Into<String>, model: impl Into<String>, cache_dir: PathBuf) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            cache_dir,
            timeout: Duration::from_secs(60),
        }
    }
}

/// Why a remote prompt fell back to the local template.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptWarning {
    #[error("no credential in {API_KEY_ENV}")]
    MissingCredential,
    #[error("network error: {0}")]
    NetworkError(String),
    #[error("endpoint returned HTTP {0}")]
    Non200Status(u16),
    #[error("endpoint returned an empty completion")]
    EmptyCompletion,
    #[error("prompt cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemotePrompt {
    pub prompt: PromptText,
    pub warning: Option<PromptWarning>,
}

pub fn cache_key(meta: &Metadata, schema: &Schema) -> String {
    let mut h = Sha256::new();
    h.update(meta.canonical_json().as_bytes());
    for c in schema.columns() {
        h.update([0u8]);
        h.update(c.name.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Fetches a prompt from the endpoint, consulting the cache first. Never
/// fails: any error yields the local template plus a warning.
pub fn build_prompt_remote(meta: &Metadata, schema: &Schema, cfg: &RemoteConfig) -> RemotePrompt {
    let path = cache_path(cfg, meta, schema);
    if let Ok(text) = std::fs::read_to_string(&path) {
        if !text.trim().is_empty() {
            return RemotePrompt {
                prompt: PromptText::new(&text, PromptOrigin::CachedRemote),
                warning: None,
            };
        }
    }
    match fetch_completion(meta, schema, cfg) {
        Ok(text) => {
            let text = clamp_words(&text, MAX_PROMPT_WORDS);
            let warning = write_cache(&path, &text).err().map(PromptWarning::Cache);
            RemotePrompt {
                prompt: PromptText::new(&text, PromptOrigin::RemoteModel),
                warning,
            }
        }
        Err(w) => RemotePrompt {
            prompt: build_prompt_local(meta, schema),
            warning: Some(w),
        },
    }
}

fn cache_path(cfg: &RemoteConfig, meta: &Metadata, schema: &Schema) -> PathBuf {
    cfg.cache_dir.join(format!("{}.txt", cache_key(meta, schema)))
}

fn write_cache(path: &Path, text: &str) -> Result<(), String> {
    let dir = path.parent().ok_or("cache path has no parent")?;
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| e.to_string())?;
    tmp.write_all(text.as_bytes()).map_err(|e| e.to_string())?;
    tmp.persist(path).map_err(|e| e.to_string())?;
    Ok(())
}

fn fetch_completion(
    meta: &Metadata,
    schema: &Schema,
    cfg: &RemoteConfig,
) -> Result<String, PromptWarning> {
    let key = cfg.api_key.as_deref().ok_or(PromptWarning::MissingCredential)?;
    let body = serde_json::json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": remote_instruction(meta, schema)}],
        "max_tokens": MAX_PROMPT_WORDS,
    });
    let agent = ureq::AgentBuilder::new().timeout(cfg.timeout).build();
    let resp = agent
        .post(&cfg.url)
        .set("Content-Type", "application/json")
        .set("Authorization", &format!("Bearer {key}"))
        .send_string(&body.to_string());
    let resp = match resp {
        Ok(r) => r,
        Err(ureq::Error::Status(code, _)) => return Err(PromptWarning::Non200Status(code)),
        Err(e) => return Err(PromptWarning::NetworkError(e.to_string())),
    };
    if resp.status() != 200 {
        return Err(PromptWarning::Non200Status(resp.status()));
    }
    let text = resp
        .into_string()
        .map_err(|e| PromptWarning::NetworkError(e.to_string()))?;
    let json: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| PromptWarning::NetworkError(e.to_string()))?;
    let choice = &json["choices"][0];
    let completion = choice["message"]["content"]
        .as_str()
        .or_else(|| choice["text"].as_str())
        .unwrap_or("")
        .trim();
    if completion.is_empty() {
        return Err(PromptWarning::EmptyCompletion);
    }
    Ok(completion.to_string())
}

/// Keeps at most `max_words` whitespace-separated words.
pub fn clamp_words(text: &str, max_words: usize) -> String {
    let text = text.trim();
    match text.split_whitespace().nth(max_words) {
        None => text.to_string(),
        Some(_) => text
            .split_whitespace()
            .take(max_words)
            .collect::<Vec<_>>()
            .join(" "),
    }
}
