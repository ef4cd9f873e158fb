use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifests.jsonl";

/// One line of `manifests.jsonl`, appended once per invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub config_overrides: BTreeMap<String, String>,
    pub tool_version: String,
    pub started_unix: f64,
    pub wall_clock_secs: f64,
    pub exit_status: u8,
}

/// Collects manifest fields while a command runs.
#[derive(Debug)]
pub struct Recorder {
    pub command: String,
    pub dir: PathBuf,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub overrides: BTreeMap<String, String>,
    started: SystemTime,
    clock: Instant,
}

impl Recorder {
    pub fn new(command: &str, dir: PathBuf) -> Self {
        Self {
            command: command.to_owned(),
            dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            overrides: BTreeMap::new(),
            started: SystemTime::now(),
            clock: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.overrides.insert(key.to_owned(), value.to_string());
    }

    pub fn finish(self, exit_status: u8) -> std::io::Result<()> {
        let manifest = RunManifest {
            command: self.command,
            inputs: self.inputs,
            outputs: self.outputs,
            seed: self.seed,
            config_overrides: self.overrides,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            started_unix: self.started.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
            wall_clock_secs: self.clock.elapsed().as_secs_f64(),
            exit_status,
        };
        std::fs::create_dir_all(&self.dir)?;
        let mut file = OpenOptions::new().create(true).append(true).open(self.dir.join(MANIFEST_FILE))?;
        let line = serde_json::to_string(&manifest).map_err(std::io::Error::other)?;
        writeln!(file, "{line}")
    }
}
