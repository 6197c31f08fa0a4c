//! Run configuration: one JSON file with sections per stage, overridden by
//! command-line flags and echoed to `resolved_config.json`.

use std::path::{Path, PathBuf};

use oqat_core::search::SearchConfig;
use oqat_core::space::SearchSpace;
use oqat_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::error::{CliError, CliResult};

/// Output directory used when neither the flag nor the config sets one.
pub const OUT_ENV: &str = "OQAT_OUT";
pub const DEFAULT_OUT: &str = "oqat-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Descending consecutive bit widths; the first is trained from scratch.
    pub bits: Vec<u32>,
    /// Also train every lower bit width from scratch for comparison.
    pub scratch_baseline: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { bits: vec![4, 3, 2], scratch_baseline: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Architectures drawn by `eval --sample` when no count is given.
    pub sample: usize,
    /// FP FLOPs range for sampled architectures; the whole space when unset.
    pub flops_range: Option<[f64; 2]>,
    pub buckets: usize,
    pub batch_size: usize,
    pub calib_batches: usize,
    pub workers: usize,
    /// Evaluate at these weight/activation bits instead of the checkpoint's.
    pub weight_bits: Option<u32>,
    pub act_bits: Option<u32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sample: 100, flops_range: None, buckets: 1, batch_size: 128, calib_batches: 4, workers: 1, weight_bits: None, act_bits: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Bit label the QF score is computed at.
    pub bit: String,
    /// Cohort size.
    pub k: usize,
    /// Center of the fixed-FLOPs slice; the median FLOPs when unset.
    pub center: Option<f64>,
    /// Relative half-width of the fixed-FLOPs slice.
    pub tolerance: f64,
    /// Minimum |Spearman| for a direction check to count as holding.
    pub threshold: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { bit: "2".into(), k: 10, center: None, tolerance: 0.03, threshold: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seeds of the train and search sections.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    /// Search space; the toy space sized to the dataset when unset. For
    /// commands reading a checkpoint it may narrow the stored space.
    pub space: Option<SearchSpace>,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub search: SearchConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            dataset: DatasetSpec::default(),
            space: None,
            train: TrainConfig::default(),
            schedule: ScheduleConfig::default(),
            search: SearchConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Copy the global seed into the sections and fix the output directory.
    pub fn resolve(&mut self, flag_out: Option<PathBuf>) {
        self.train.seed = self.seed;
        self.search.seed = self.seed;
        let env = std::env::var_os(OUT_ENV).map(PathBuf::from);
        self.out_dir = Some(flag_out.or(self.out_dir.take()).or(env).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)));
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir.as_deref().unwrap_or(Path::new(DEFAULT_OUT))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
