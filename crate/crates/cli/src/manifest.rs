use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run-manifest.jsonl";

/// One line of `run-manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// Input path to `sha256("blob <len>\0" + content)`.
    pub inputs: BTreeMap<String, String>,
    pub started: String,
    pub finished: String,
    pub artifacts: Vec<PathBuf>,
    pub exit_code: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Git-style object hash of a byte string, with SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash of an input file, or of `manifest.json` for a corpus directory.
pub fn input_hash(path: &Path) -> Option<String> {
    let file = if path.is_dir() {
        path.join(camorect_core::data::MANIFEST)
    } else {
        path.to_path_buf()
    };
    std::fs::read(file).ok().map(|b| blob_hash(&b))
}

impl RunManifest {
    pub fn append(&self, out_dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join(RUN_MANIFEST))?;
        let line = serde_json::to_string(self).map_err(std::io::Error::other)?;
        writeln!(f, "{line}")
    }
}

#[cfg(test)]
pub fn read_all(out_dir: &Path) -> std::io::Result<Vec<RunManifest>> {
    let text = std::fs::read_to_string(out_dir.join(RUN_MANIFEST))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_sha256_objects() {
        // `git hash-object --object-format=sha256` of an empty file and of "hello\n"
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
        assert_eq!(blob_hash(b"hello\n"), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
    }

    #[test]
    fn manifests_append() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            command: "x".into(),
            config: serde_json::json!({"a": 1}),
            inputs: BTreeMap::new(),
            started: now(),
            finished: now(),
            artifacts: vec![],
            exit_code: 0,
            error: None,
        };
        m.append(dir.path()).unwrap();
        m.append(dir.path()).unwrap();
        assert_eq!(read_all(dir.path()).unwrap(), vec![m.clone(), m]);
    }
}
