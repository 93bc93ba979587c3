//! Run manifests: one JSON file per command run, written next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::artifact::sha256_hex;
use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> AppResult<Self> {
        let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
        Ok(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub version: String,
    pub artifact_version: u32,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub warnings: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub wall_seconds: f64,
}

/// Collects what a command read and wrote while it runs.
pub struct ManifestBuilder {
    command: String,
    args: Vec<String>,
    config_sha256: String,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    warnings: Vec<String>,
    started: SystemTime,
    clock: Instant,
}

fn unix(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl ManifestBuilder {
    /// `config` is the resolved configuration; its JSON text is hashed.
    pub fn new<C: Serialize>(command: &str, args: Vec<String>, config: &C, seed: Option<u64>) -> Self {
        let text = serde_json::to_string(config).unwrap_or_default();
        ManifestBuilder {
            command: command.to_string(),
            args,
            config_sha256: sha256_hex(text.as_bytes()),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
            started: SystemTime::now(),
            clock: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
    }

    pub fn output(&mut self, path: &Path) {
        if !self.outputs.iter().any(|p| p == path) {
            self.outputs.push(path.to_path_buf());
        }
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.warnings.push(message.into());
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn finish(self) -> AppResult<RunManifest> {
        let digest = |paths: &[PathBuf]| paths.iter().map(|p| FileDigest::of(p)).collect::<AppResult<Vec<_>>>();
        Ok(RunManifest {
            inputs: digest(&self.inputs)?,
            outputs: digest(&self.outputs)?,
            command: self.command,
            args: self.args,
            config_sha256: self.config_sha256,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            artifact_version: crate::artifact::VERSION,
            warnings: self.warnings,
            started_unix: unix(self.started),
            finished_unix: unix(SystemTime::now()),
            wall_seconds: self.clock.elapsed().as_secs_f64(),
        })
    }

    /// Finishes and writes the manifest to `path`.
    pub fn write(self, path: &Path) -> AppResult<RunManifest> {
        let manifest = self.finish()?;
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| AppError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        text.push('\n');
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
        }
        fs::write(path, text).map_err(|e| AppError::io(path, e))?;
        Ok(manifest)
    }
}

/// `out/model.json` gets `out/model.manifest.json`; a directory gets
/// `dir/manifest.json`.
pub fn manifest_path_for_file(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    output.with_file_name(format!("{stem}.manifest.json"))
}

pub fn manifest_path_for_dir(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}
