//! Output directory handling and the run manifest.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

/// Collects artifacts for one run and writes them with a manifest.
pub struct ArtifactWriter {
    dir: PathBuf,
    written: Vec<ArtifactEntry>,
}

#[derive(Debug, Clone, Serialize)]
struct ArtifactEntry {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    engine: &'static str,
    engine_version: &'static str,
    command: &'a str,
    seed: Option<u64>,
    config_sha256: String,
    config: &'a RunConfig,
    warnings: &'a [String],
    artifacts: &'a [ArtifactEntry],
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ArtifactWriter {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(ArtifactWriter { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
        self.written.push(ArtifactEntry { file: name.to_string(), sha256: sha256_hex(contents.as_bytes()) });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Analysis(format!("cannot serialize {name}: {e}")))?;
        text.push('\n');
        self.write(name, &text)
    }

    /// Write `manifest.json`. The config echoed here is the resolved one,
    /// minus the output directory, so reruns into another directory produce
    /// identical manifests.
    pub fn finish(
        mut self,
        command: &str,
        config: &RunConfig,
        seed: Option<u64>,
        warnings: &[String],
    ) -> Result<(), CliError> {
        let mut echoed = config.clone();
        echoed.output = None;
        echoed.seed = seed;
        let canonical = serde_json::to_string(&echoed)
            .map_err(|e| CliError::Analysis(format!("cannot serialize config: {e}")))?;
        let artifacts = std::mem::take(&mut self.written);
        let manifest = Manifest {
            engine: "poppk",
            engine_version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config_sha256: sha256_hex(canonical.as_bytes()),
            config: &echoed,
            warnings,
            artifacts: &artifacts,
        };
        self.write_json("manifest.json", &manifest)
    }
}
