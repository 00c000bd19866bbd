//! Experiment orchestration: run configuration, the continual training loop,
//! per-task accuracy tracking, grid sweeps with confidence intervals, the
//! permuted-MNIST plasticity study, and full-network gradient checking.

mod gradcheck;
mod report;
mod run;
mod sweep;

pub use gradcheck::{gradcheck, gradcheck_corrupted, reference, GradcheckReport, GRADCHECK_TOLERANCE};
pub use report::{report_csv, report_from_csv, ReportError, ReportRow};
pub use run::{
    evaluate, run_continual, run_continual_with_params, run_permuted, PermutedResult,
};
pub use sweep::{aggregate_ci, sweep, SeedOutcome, SweepError, SweepGrid, SweepPoint, SweepResult};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::activations::ActivationSpec;
use crate::data::DataError;
use crate::optim::OptimizerSpec;

/// Which task regime to train on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Five class-incremental tasks of two digits each.
    Split,
    /// All of MNIST as a single task.
    Iid,
    /// A sequence of pixel-permutation tasks.
    Permuted,
}

/// Declarative description of one experiment run.
///
/// Serialized form is the config-file schema; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub activation: ActivationSpec,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs_per_task")]
    pub epochs_per_task: usize,
    /// Permuted mode only: number of permutation tasks.
    #[serde(default = "default_n_tasks")]
    pub n_tasks: usize,
    /// Mid-task evaluation cadence in steps; 0 restricts evaluation to task
    /// boundaries.
    #[serde(default = "default_eval_every_steps")]
    pub eval_every_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_epochs_per_task() -> usize {
    1
}
fn default_n_tasks() -> usize {
    20
}
fn default_eval_every_steps() -> usize {
    50
}
fn default_batch_size() -> usize {
    crate::data::DEFAULT_BATCH_SIZE
}
fn default_hidden_dim() -> usize {
    1000
}

impl RunConfig {
    pub fn new(mode: RunMode, activation: ActivationSpec, optimizer: OptimizerSpec) -> Self {
        RunConfig {
            mode,
            activation,
            optimizer,
            seed: 0,
            epochs_per_task: default_epochs_per_task(),
            n_tasks: default_n_tasks(),
            eval_every_steps: default_eval_every_steps(),
            batch_size: default_batch_size(),
            hidden_dim: default_hidden_dim(),
            data_dir: None,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.activation
            .validate(self.hidden_dim)
            .map_err(|e| RunError::Config(e.to_string()))?;
        self.optimizer
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        if self.epochs_per_task < 1 {
            return Err(RunError::Config("epochs_per_task must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(RunError::Config("batch_size must be >= 1".into()));
        }
        if self.hidden_dim < 1 {
            return Err(RunError::Config("hidden_dim must be >= 1".into()));
        }
        if self.mode == RunMode::Permuted && self.n_tasks < 1 {
            return Err(RunError::Config("n_tasks must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self, RunError> {
        let cfg: RunConfig = serde_json::from_str(json)?;
        // serde's deny_unknown_fields does not reach inside internally
        // tagged enum variants, so compare the input keys against the
        // canonical re-serialization.
        let input: serde_json::Value = serde_json::from_str(json)?;
        let canonical = serde_json::to_value(&cfg)?;
        check_no_unknown_keys(&input, &canonical, "config")
            .map_err(RunError::Config)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every key present in `input` must exist in `canonical` (the full
/// serialized form, where defaults make all known keys explicit).
fn check_no_unknown_keys(
    input: &serde_json::Value,
    canonical: &serde_json::Value,
    path: &str,
) -> Result<(), String> {
    if let (Some(in_map), Some(canon_map)) = (input.as_object(), canonical.as_object()) {
        for (key, value) in in_map {
            match canon_map.get(key) {
                None => return Err(format!("unknown key '{path}.{key}'")),
                Some(c) => check_no_unknown_keys(value, c, &format!("{path}.{key}"))?,
            }
        }
    }
    Ok(())
}

/// One evaluation record: per-task test accuracies at a training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub step: u64,
    pub training_task: usize,
    pub per_task_accuracy: Vec<f32>,
    pub overall_accuracy: f32,
}

/// Outcome of one run: the evaluation timeline plus final metrics.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub timeline: Vec<TimelineRow>,
    pub final_per_task_accuracy: Vec<f32>,
    /// Unweighted mean of the final per-task accuracies.
    pub final_mean_accuracy: f32,
    /// Accuracy over the concatenated test subsets.
    pub final_overall_accuracy: f32,
    pub steps: u64,
    pub wall_seconds: f64,
}

impl RunResult {
    /// Renders the timeline as CSV with the
    /// `step,training_task,task0_acc,...,overall_acc` header. Deterministic
    /// byte-for-byte given identical runs.
    pub fn timeline_csv(&self) -> String {
        let n_tasks = self
            .timeline
            .first()
            .map_or(self.final_per_task_accuracy.len(), |r| {
                r.per_task_accuracy.len()
            });
        let mut out = String::from("step,training_task");
        for t in 0..n_tasks {
            out.push_str(&format!(",task{t}_acc"));
        }
        out.push_str(",overall_acc\n");
        for row in &self.timeline {
            out.push_str(&format!("{},{}", row.step, row.training_task));
            for acc in &row.per_task_accuracy {
                out.push_str(&format!(",{acc:.6}"));
            }
            out.push_str(&format!(",{:.6}\n", row.overall_accuracy));
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("config parse: {0}")]
    ConfigParse(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
