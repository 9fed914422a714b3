use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    /// File name to hex SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let s = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        serde_json::from_str(&s).map_err(|e| {
            CliError::Core(propcal::Error::Parse { path: path.into(), line: e.line() as u64, detail: e.to_string() })
        })
    }
}

/// Output directory of one run; collects artifacts for the manifest.
pub struct RunDir {
    pub dir: PathBuf,
    files: Vec<String>,
    started: Instant,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Self { dir: dir.into(), files: Vec::new(), started: Instant::now() })
    }

    /// Path for a new artifact, registered for hashing.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let p = self.artifact(name);
        std::fs::write(&p, contents).map_err(|e| io(&p, e))?;
        Ok(p)
    }

    /// Hashes every registered artifact and writes the manifest.
    pub fn finish(self, subcommand: &str, config: BTreeMap<String, String>, seed: u64) -> Result<RunManifest, CliError> {
        let mut artifacts = BTreeMap::new();
        for f in &self.files {
            let p = self.dir.join(f);
            let bytes = std::fs::read(&p).map_err(|e| io(&p, e))?;
            artifacts.insert(f.clone(), format!("{:x}", Sha256::digest(&bytes)));
        }
        let m = RunManifest {
            subcommand: subcommand.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            seed,
            artifacts,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let p = self.dir.join(MANIFEST_NAME);
        let s = serde_json::to_string_pretty(&m).expect("manifest serializes");
        std::fs::write(&p, s + "\n").map_err(|e| io(&p, e))?;
        Ok(m)
    }
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(propcal::Error::Io { path: path.into(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path()).unwrap();
        run.write("a.csv", "abc").unwrap();
        let mut cfg = BTreeMap::new();
        cfg.insert("xi".to_string(), "0.95".to_string());
        let m = run.finish("smooth", cfg, 7).unwrap();
        assert_eq!(m.artifacts["a.csv"], "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        let back = RunManifest::read(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(back, m);
    }
}
