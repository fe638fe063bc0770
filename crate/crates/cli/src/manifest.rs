use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mcct_core::SolverConfig;
use serde::Serialize;

use crate::error::CliResult;

/// Record of one command invocation, written beside its primary output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<PathBuf>,
    pub methods: Vec<String>,
    pub solver: Option<SolverConfig>,
    pub seed: u64,
    pub outputs: Vec<PathBuf>,
    /// Seconds spent per phase.
    pub wall_seconds: BTreeMap<String, f64>,
    pub details: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            inputs: Vec::new(),
            methods: Vec::new(),
            solver: None,
            seed,
            outputs: Vec::new(),
            wall_seconds: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    /// Runs `f`, adding its duration to `phase`.
    pub fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.wall_seconds.entry(phase.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }

    /// Writes the manifest to `<primary>.manifest.json` and returns that path.
    pub fn write_beside(&self, primary: &Path) -> CliResult<PathBuf> {
        let path = with_suffix(primary, ".manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

/// `path` with `suffix` appended to its final component.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}
