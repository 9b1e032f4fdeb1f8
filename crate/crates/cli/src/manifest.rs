//! Run manifests: one `manifest.json` per artifact directory, listing
//! config hashes, seeds and a SHA-256 for every file written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seeds: Vec<u64>,
    /// SHA-256 of each config in its compact JSON form, keyed by role
    /// (scene, rig, model, ...).
    pub config_hashes: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<FileHash>,
    /// Per-stage wall time in seconds. The only field that varies between
    /// identical runs.
    pub wall_time_s: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn json_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serializes"))
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seeds: Vec::new(),
            config_hashes: BTreeMap::new(),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            wall_time_s: BTreeMap::new(),
        }
    }

    pub fn config<T: Serialize>(mut self, role: &str, value: &T) -> Self {
        self.config_hashes.insert(role.into(), json_hash(value));
        self
    }

    /// Hashes every file under `root` except the manifest and writes it.
    pub fn finish(mut self, root: &Path) -> Result<Self> {
        self.outputs = hash_tree(root)?;
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        fs::write(root.join(MANIFEST_FILE), text).with_context(|| format!("writing manifest in {}", root.display()))?;
        Ok(self)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

pub fn hash_tree(root: &Path) -> Result<Vec<FileHash>> {
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut out: Vec<FileHash> = files
        .iter()
        .filter_map(|p| {
            let rel = p.strip_prefix(root).ok()?;
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            (rel != MANIFEST_FILE).then_some((p, rel))
        })
        .map(|(p, rel)| {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(FileHash {
                path: rel,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}
