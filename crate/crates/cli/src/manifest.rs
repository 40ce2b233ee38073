//! Run manifests: what was run, on which inputs, producing which files.

use std::path::{Path, PathBuf};

use hint_core::io::sha256_hex;
use hint_core::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Hashes of input files (checkpoints, corpora, suite manifests) by role.
    pub inputs: Vec<(String, String)>,
    /// Hash of command, config, seed and inputs. Identifies the run and is
    /// written into every text artifact it produces.
    pub run_id: String,
    pub outputs: Vec<OutputFile>,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64, inputs: Vec<(String, String)>) -> Self {
        let identity = serde_json::json!({
            "command": command,
            "config": config,
            "seed": seed,
            "inputs": inputs,
        });
        let run_id = sha256_hex(identity.to_string().as_bytes());
        Self {
            format_version: MANIFEST_VERSION,
            command: command.to_string(),
            config,
            seed,
            inputs,
            run_id,
            outputs: Vec::new(),
        }
    }

    /// Writes a text artifact with a leading `# run <id>` line.
    pub fn write_text(&mut self, dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
        let text = format!("# run {}\n{body}", self.run_id);
        self.write_bytes(dir, name, text.as_bytes())
    }

    pub fn write_bytes(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, bytes)?;
        self.outputs.push(OutputFile {
            path: PathBuf::from(name),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    /// Records a file written by someone else.
    pub fn record(&mut self, dir: &Path, name: &str) -> Result<()> {
        let bytes = std::fs::read(dir.join(name))?;
        self.outputs.push(OutputFile {
            path: PathBuf::from(name),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?)
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_depends_on_identity_only() {
        let a = RunManifest::new("eval", serde_json::json!({"x": 1}), 0, vec![]);
        let b = RunManifest::new("eval", serde_json::json!({"x": 1}), 0, vec![]);
        let c = RunManifest::new("eval", serde_json::json!({"x": 2}), 0, vec![]);
        assert_eq!(a.run_id, b.run_id);
        assert_ne!(a.run_id, c.run_id);
    }

    #[test]
    fn artifacts_embed_the_run_id() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("x", serde_json::Value::Null, 1, vec![]);
        let p = m.write_text(dir.path(), "a.csv", "h\n1\n").unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with(&format!("# run {}\n", m.run_id)));
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
    }
}
