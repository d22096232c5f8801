//! Run manifests: one JSON record per artifact directory capturing what
//! produced it, so any run can be reproduced from the manifest alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codi::CodiConfig;
use crate::error::{CoreError, Result};
use crate::problems::GenConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

fn fnv1a(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// FNV-1a over the canonical JSON encoding; stable across runs and
/// platforms, cheap enough for config-sized inputs.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    Ok(fnv1a(&serde_json::to_vec(value)?))
}

/// Identity of a generated corpus: the seed plus a hash of every other
/// generation parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusFingerprint {
    pub seed: u64,
    pub params_hash: String,
    pub path: PathBuf,
}

impl CorpusFingerprint {
    pub fn of(cfg: &GenConfig, path: &Path) -> Result<Self> {
        Ok(CorpusFingerprint {
            seed: cfg.seed,
            params_hash: fingerprint(cfg)?,
            path: path.to_path_buf(),
        })
    }

    /// Prefer the generation sidecar (`x.meta.json` next to `x.jsonl`);
    /// corpora of unknown provenance fall back to a content hash.
    pub fn from_file(path: &Path) -> Result<Self> {
        let sidecar = sidecar_path(path);
        if sidecar.exists() {
            let cfg: GenConfig = serde_json::from_str(&fs::read_to_string(&sidecar)?)?;
            return CorpusFingerprint::of(&cfg, path);
        }
        Ok(CorpusFingerprint {
            seed: 0,
            params_hash: content_fingerprint(path)?,
            path: path.to_path_buf(),
        })
    }
}

/// Where `gen-data` records the parameters that produced a corpus file.
pub fn sidecar_path(corpus: &Path) -> PathBuf {
    corpus.with_extension("meta.json")
}

/// FNV-1a over raw file bytes.
pub fn content_fingerprint(path: &Path) -> Result<String> {
    Ok(fnv1a(&fs::read(path)?))
}

/// Everything needed to rerun a command and get the same artifacts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    /// The subcommand plus its resolved arguments, human-readable.
    pub command: String,
    pub method: Option<String>,
    pub config: Option<CodiConfig>,
    pub corpus: Vec<CorpusFingerprint>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>) -> Self {
        RunManifest {
            code_version: CODE_VERSION.to_string(),
            command: command.into(),
            method: None,
            config: None,
            corpus: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Write (or rewrite) the directory's single manifest.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<RunManifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| CoreError::InvalidConfig(format!("no manifest at {path:?}: {e}")))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::ValueRange;

    #[test]
    fn fingerprint_tracks_params_not_seed_field_position() {
        let a = GenConfig { seed: 1, size: 100, max_steps: 3, range: ValueRange::TRAIN };
        let b = GenConfig { seed: 1, size: 100, max_steps: 3, range: ValueRange::TRAIN };
        let c = GenConfig { size: 101, ..a.clone() };
        assert_eq!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
        assert_ne!(fingerprint(&a).unwrap(), fingerprint(&c).unwrap());
    }

    #[test]
    fn directory_holds_exactly_one_manifest_after_rewrites() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("train --method codi");
        m.method = Some("codi".into());
        m.config = Some(CodiConfig::default());
        m.outputs.push(dir.path().join("metrics.jsonl"));
        m.write(dir.path()).unwrap();
        m.write(dir.path()).unwrap();
        let found: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("manifest"))
            .collect();
        assert_eq!(found.len(), 1);
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back.method.as_deref(), Some("codi"));
        assert_eq!(back.code_version, CODE_VERSION);
        assert_eq!(back.config.unwrap().num_latent, CodiConfig::default().num_latent);
    }
}
