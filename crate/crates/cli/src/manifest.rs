use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use multigrain::model::TrainConfig;
use multigrain::synthdata::SynthSpec;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Everything needed to rerun a `train` or `sweep` invocation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    /// `v<crate version>`.
    pub version: String,
    pub run: RunKind,
    /// Resolved configuration after flags and config file were merged.
    pub config: TrainConfig,
    /// Spec the dataset was generated from; replays regenerate from it.
    pub synth_spec: SynthSpec,
    pub artifacts: Artifacts,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunKind {
    Train,
    Sweep { axis: String, values: Vec<String> },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Artifacts {
    pub dataset: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    pub reports: Vec<PathBuf>,
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}
