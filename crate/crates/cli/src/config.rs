//! Optional JSON configuration shared by every subcommand. Flags override
//! file values, which override built-in defaults. Schema: docs/config-schema.json.

use std::path::{Path, PathBuf};

use geoecon::align::PairOptions;
use geoecon::dataio::SynthConfig;
use geoecon::model::{ModelConfig, TrainConfig};
use geoecon::pipeline::{Aggregation, PeriodRange, Region};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub store: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Corpus period used by `align`, `train` and `eval`.
    pub period: Option<String>,
    pub synth: Option<SynthConfig>,
    pub pairs: Option<PairOptions>,
    /// Replaces the preset entirely; missing fields take full-size defaults.
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub task: TaskSection,
    pub service: ServiceSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub task_id: Option<String>,
    pub region: Option<Region>,
    pub period: Option<PeriodRange>,
    pub model: Option<String>,
    pub aggregation: Option<Aggregation>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub listen: Option<String>,
    pub cors_origin: Option<String>,
}

impl FileConfig {
    /// Reads `arg` as a file path, or as inline JSON when it starts with `{`.
    pub fn load(arg: Option<&str>) -> Result<FileConfig, CliError> {
        let Some(arg) = arg else { return Ok(FileConfig::default()) };
        let (text, origin) = if arg.trim_start().starts_with('{') {
            (arg.to_string(), "inline config".to_string())
        } else {
            let text = std::fs::read_to_string(arg).map_err(|e| CliError::Usage(format!("config {arg}: {e}")))?;
            (text, arg.to_string())
        };
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{origin}: {e}")))
    }
}

/// First of `flag` and `file`, or a usage error naming the flag.
pub fn need<T: Clone>(flag: &Option<T>, file: &Option<T>, name: &str) -> Result<T, CliError> {
    flag.clone()
        .or_else(|| file.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required (flag or config)")))
}

/// Like [`need`] for an input path that must exist.
pub fn need_path(flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    let p = need(flag, file, name)?;
    existing(&p, name)?;
    Ok(p)
}

pub fn existing(p: &Path, name: &str) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--{name} {} does not exist", p.display())))
    }
}
