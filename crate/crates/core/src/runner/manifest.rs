use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunError;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, RunError> {
    let mut f = fs::File::open(path).map_err(|e| RunError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| RunError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| RunError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RunError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum StageStatus {
    Done,
    Failed { error: String },
}

/// One executed stage. Paths are relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    /// Hash of the stage's settings and input hashes; a change forces a rerun.
    pub key: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub tool_version: String,
    pub platform: String,
    pub config_hash: String,
    /// Hash over the data stage outputs; comparisons require it to match.
    pub data_hash: Option<String>,
    pub stages: Vec<StageRecord>,
    /// Every produced file with its content hash.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        RunManifest {
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            platform: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
            config_hash,
            data_hash: None,
            stages: Vec::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Replaces a same-named record, keeping the original stage order.
    pub fn record(&mut self, rec: StageRecord) {
        if rec.status == StageStatus::Done {
            for (p, h) in &rec.outputs {
                self.artifacts.insert(p.clone(), h.clone());
            }
        }
        match self.stages.iter_mut().find(|s| s.name == rec.name) {
            Some(slot) => *slot = rec,
            None => self.stages.push(rec),
        }
    }

    /// Deterministic fingerprint of everything the run produced, excluding
    /// timings and platform notes.
    pub fn content_hash(&self) -> String {
        let mut text = format!("config {}\n", self.config_hash);
        for (p, h) in &self.artifacts {
            text.push_str(&format!("{p} {h}\n"));
        }
        sha256_bytes(text.as_bytes())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn save(&self, run_dir: &Path) -> Result<(), RunError> {
        write_atomic(&run_dir.join(MANIFEST_FILE), self.to_json().as_bytes())
    }

    /// Accepts either the manifest file or its run directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| RunError::io(&file, e))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| RunError::Manifest(format!("{}: {e}", file.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(RunError::Manifest(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }
}
