use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

/// Append-only run log inside each output directory.
pub const RUN_LOG: &str = "runs.jsonl";

/// Record of one command invocation. Timing lives here and never in the
/// metric JSON, which must stay bit-identical across reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hashes: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub dataset_paths: Vec<String>,
    pub checkpoint_path: Option<String>,
    pub metrics_summary: serde_json::Value,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config_hashes: BTreeMap::new(),
            seeds: BTreeMap::new(),
            dataset_paths: Vec::new(),
            checkpoint_path: None,
            metrics_summary: serde_json::Value::Null,
            wall_clock_secs: 0.0,
        }
    }

    /// Appends one JSON line to `dir/runs.jsonl`, creating the directory.
    pub fn append_to(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let path = dir.join(RUN_LOG);
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(CliError::io(&path))?;
        let mut line = serde_json::to_string(self).expect("manifest serializes");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(CliError::io(&path))
    }
}

pub fn read_run_log(dir: &Path) -> Result<Vec<RunManifest>, CliError> {
    let path = dir.join(RUN_LOG);
    let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CliError::json(&path)))
        .collect()
}
