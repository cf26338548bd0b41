use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use tabsynth::prompt::RemoteConfig;

/// Contents of the `--config` TOML file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub remote: Option<RemoteSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSection {
    pub url: String,
    pub model: String,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from(".tabsynth-prompt-cache")
}

fn default_timeout() -> u64 {
    60
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Endpoint settings with the credential taken from the environment.
    pub fn remote(&self) -> Option<RemoteConfig> {
        self.remote.as_ref().map(|r| {
            let mut cfg = RemoteConfig::from_env(&r.url, &r.model, r.cache_dir.clone());
            cfg.timeout = Duration::from_secs(r.timeout_secs);
            cfg
        })
    }
}
