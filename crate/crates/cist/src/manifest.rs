//! Run manifests: what was run, with which resolved settings, and where the
//! outputs went.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    /// Fully resolved settings, defaults included.
    pub config: Value,
    /// The parsed command line; enough to rerun the command.
    pub args: Value,
    /// Output files, relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub config_hash: String,
}

/// SHA-256 over the compact JSON of `{"command", "config"}`. Object keys
/// are sorted, so the digest depends only on the values.
pub fn config_hash(command: &str, config: &Value) -> String {
    let canonical = serde_json::json!({ "command": command, "config": config });
    let bytes = serde_json::to_vec(&canonical).expect("JSON values serialize");
    hex::encode(Sha256::digest(&bytes))
}

impl RunManifest {
    pub fn new(
        command: &str,
        seed: Option<u64>,
        config: Value,
        args: Value,
        artifacts: BTreeMap<String, String>,
    ) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config_hash: config_hash(command, &config),
            config,
            args,
            artifacts,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE_NAME);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: e.line() as u64,
            column: e.column(),
            offset: 0,
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn hash_ignores_key_order_and_tracks_values() {
        let a = json!({"rho": 3.0, "method": "cist"});
        let b: Value = serde_json::from_str(r#"{"method":"cist","rho":3.0}"#).unwrap();
        assert_eq!(config_hash("distill", &a), config_hash("distill", &b));
        assert_ne!(
            config_hash("distill", &a),
            config_hash("distill", &json!({"rho": 4.0, "method": "cist"}))
        );
        assert_ne!(config_hash("distill", &a), config_hash("train-teacher", &a));
        assert_eq!(config_hash("x", &a).len(), 64);
    }

    #[test]
    fn hash_is_frozen() {
        // sha256sum of the literal bytes {"command":"x","config":{"a":1}}
        assert_eq!(
            config_hash("x", &json!({"a": 1})),
            "a6c680aa38a135ddadcb8323084c3675415a241943e4168a0c7420c3622f7c57"
        );
    }
}
