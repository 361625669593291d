//! Run directories, CSV formatting and the manifest.
//!
//! Files are collected in memory and written once the command has
//! succeeded, so a failed run leaves nothing half-written behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use steerlab_core::checkpoint::hex_digest;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// 17 significant digits, enough to round-trip any f64.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

pub struct Csv {
    width: usize,
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv {
            width: header.len(),
            text: header.join(",") + "\n",
        }
    }

    pub fn row(&mut self, fields: Vec<String>) {
        assert_eq!(fields.len(), self.width, "CSV row width");
        let quoted: Vec<String> = fields.into_iter().map(quote).collect();
        self.text.push_str(&quoted.join(","));
        self.text.push('\n');
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.text.into_bytes()
    }
}

fn quote(field: String) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

impl FileDigest {
    pub fn of(path: String, bytes: &[u8]) -> Self {
        FileDigest {
            path,
            sha256: hex_digest(bytes),
            bytes: bytes.len(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub workers: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub summary: serde_json::Value,
    pub config: RunConfig,
}

/// Everything one command produces.
pub struct RunOutput {
    pub command: String,
    pub config: RunConfig,
    pub workers: usize,
    pub inputs: Vec<FileDigest>,
    files: Vec<(String, Vec<u8>)>,
    timings: BTreeMap<String, f64>,
    clock: Instant,
    pub summary: serde_json::Map<String, serde_json::Value>,
}

impl RunOutput {
    pub fn new(command: &str, config: RunConfig, workers: usize) -> Self {
        RunOutput {
            command: command.to_string(),
            config,
            workers,
            inputs: Vec::new(),
            files: Vec::new(),
            timings: BTreeMap::new(),
            clock: Instant::now(),
            summary: serde_json::Map::new(),
        }
    }

    /// Closes the current phase under `name`.
    pub fn lap(&mut self, name: &str) {
        self.timings.insert(name.to_string(), self.clock.elapsed().as_secs_f64());
        self.clock = Instant::now();
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileDigest::of(path.display().to_string(), bytes));
    }

    pub fn file(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        let name = name.into();
        assert!(!self.files.iter().any(|(n, _)| *n == name), "duplicate output {name}");
        self.files.push((name, bytes));
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut bytes = serde_json::to_vec_pretty(value).expect("serialisable output");
        bytes.push(b'\n');
        self.file(name, bytes);
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(key.to_string(), serde_json::to_value(value).expect("serialisable summary"));
    }

    pub fn digests(&self) -> Vec<FileDigest> {
        self.files.iter().map(|(n, b)| FileDigest::of(n.clone(), b)).collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            tool: "steerlab",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command.clone(),
            config_hash: self.config.hash(),
            seed: self.config.seed,
            workers: self.workers,
            inputs: self.inputs.clone(),
            outputs: self.digests(),
            timings: self.timings.clone(),
            summary: serde_json::Value::Object(self.summary.clone()),
            config: self.config.clone(),
        }
    }

    /// Writes every file and then `manifest.json` into `dir`, which must be
    /// fresh.
    pub fn write(&self, dir: &Path) -> CliResult<()> {
        create_fresh(dir)?;
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, bytes)?;
        }
        let mut manifest = serde_json::to_vec_pretty(&self.manifest()).expect("serialisable manifest");
        manifest.push(b'\n');
        fs::write(dir.join("manifest.json"), manifest)?;
        Ok(())
    }
}

fn is_empty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_none()).unwrap_or(false)
}

/// Fails when `dir` already holds anything.
pub fn check_fresh(dir: &Path) -> CliResult<()> {
    if dir.exists() && !is_empty_dir(dir) {
        return Err(CliError::input(format!("refusing to overwrite {}: directory is not empty", dir.display())));
    }
    Ok(())
}

fn create_fresh(dir: &Path) -> CliResult<()> {
    check_fresh(dir)?;
    fs::create_dir_all(dir)?;
    Ok(())
}

/// `--out` as given, or `runs/<hash>-<UTC timestamp>` with a numeric suffix
/// if that name is taken.
pub fn resolve_out_dir(out: Option<PathBuf>, config_hash: &str) -> CliResult<PathBuf> {
    if let Some(dir) = out {
        check_fresh(&dir)?;
        return Ok(dir);
    }
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{}-{stamp}", &config_hash[..12]);
    let mut dir = Path::new("runs").join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = Path::new("runs").join(format!("{base}-{n}"));
        n += 1;
    }
    Ok(dir)
}
