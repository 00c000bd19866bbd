//! The continual training loop and its evaluation protocol.

use std::time::Instant;

use serde::Serialize;

use super::{RunConfig, RunError, RunMode, RunResult, TimelineRow};
use crate::activations::ActivationSpec;
use crate::data::{
    assemble_batch, make_iid_task, make_permuted_tasks, make_split_tasks, shuffled_batches,
    Dataset, Task, TaskStream, NUM_CLASSES,
};
use crate::matrix::Matrix2D;
use crate::model::{mlp_backward, mlp_forward, softmax_cross_entropy, MlpDims, MlpParams};
use crate::optim::{apply_step, clip_gradients, OptimizerState};
use crate::rng::RngStream;

const EVAL_BATCH: usize = 512;

/// Accuracy of `params` on one task's test subset.
fn task_accuracy(
    params: &MlpParams,
    spec: &ActivationSpec,
    test: &Dataset,
    task: &Task,
) -> (usize, usize) {
    let mut correct = 0;
    for chunk in task.test_indices.chunks(EVAL_BATCH) {
        let (batch, labels) = assemble_batch(test, chunk, task);
        let (logits, _) = mlp_forward(params, spec, &batch);
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            // Ties resolve to the lowest class id.
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label as usize {
                correct += 1;
            }
        }
    }
    (correct, task.test_indices.len())
}

/// Per-task test accuracies plus overall accuracy over the concatenated
/// test subsets.
pub fn evaluate(
    params: &MlpParams,
    spec: &ActivationSpec,
    stream: &TaskStream,
    test: &Dataset,
) -> (Vec<f32>, f32) {
    let mut per_task = Vec::with_capacity(stream.len());
    let mut correct_total = 0usize;
    let mut count_total = 0usize;
    for task in &stream.tasks {
        let (correct, count) = task_accuracy(params, spec, test, task);
        per_task.push(if count == 0 {
            0.0
        } else {
            correct as f32 / count as f32
        });
        correct_total += correct;
        count_total += count;
    }
    let overall = if count_total == 0 {
        0.0
    } else {
        correct_total as f32 / count_total as f32
    };
    (per_task, overall)
}

fn build_stream(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> TaskStream {
    match cfg.mode {
        RunMode::Split => make_split_tasks(train, test),
        RunMode::Iid => make_iid_task(train, test),
        RunMode::Permuted => {
            make_permuted_tasks(train, test, cfg.n_tasks, &RngStream::new(cfg.seed))
        }
    }
}

fn unweighted_mean(accs: &[f32]) -> f32 {
    if accs.is_empty() {
        0.0
    } else {
        accs.iter().sum::<f32>() / accs.len() as f32
    }
}

/// Trains tasks sequentially with no replay, no resets, and no task-id
/// input; model and optimizer state persist across task boundaries.
///
/// Evaluates all tasks' test subsets before training, every
/// `eval_every_steps` steps (0 = boundaries only), and at every task
/// boundary. Supports split and i.i.d. modes; permuted runs use
/// [`run_permuted`], which records only the two curves the study needs.
pub fn run_continual(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunResult, RunError> {
    run_continual_with_params(cfg, train, test).map(|(result, _)| result)
}

/// [`run_continual`], also returning the trained parameters (for
/// checkpointing).
pub fn run_continual_with_params(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(RunResult, MlpParams), RunError> {
    cfg.validate()?;
    if cfg.mode == RunMode::Permuted {
        return Err(RunError::Config(
            "run_continual handles split and iid modes; use run_permuted".into(),
        ));
    }
    let start = Instant::now();
    let stream = build_stream(cfg, train, test);
    let root = RngStream::new(cfg.seed);
    let dims = MlpDims {
        input: train.images.cols(),
        hidden: cfg.hidden_dim,
        output: NUM_CLASSES,
    };
    let mut params = MlpParams::init(dims, &root);
    let mut opt_state = OptimizerState::new(&cfg.optimizer, &params.tensor_lens());

    let mut timeline: Vec<TimelineRow> = Vec::new();
    let mut global_step = 0u64;
    let record = |step: u64, training_task: usize, params: &MlpParams| {
        let (per_task, overall) = evaluate(params, &cfg.activation, &stream, test);
        TimelineRow {
            step,
            training_task,
            per_task_accuracy: per_task,
            overall_accuracy: overall,
        }
    };
    timeline.push(record(0, 0, &params));

    for task in &stream.tasks {
        for epoch in 0..cfg.epochs_per_task {
            for indices in shuffled_batches(task, epoch, &root, cfg.batch_size) {
                let (batch, labels) = assemble_batch(train, &indices, task);
                train_step(cfg, &mut params, &mut opt_state, &batch, &labels);
                global_step += 1;
                if cfg.eval_every_steps > 0 && global_step % cfg.eval_every_steps as u64 == 0 {
                    timeline.push(record(global_step, task.id, &params));
                }
            }
        }
        if timeline.last().map(|r| r.step) != Some(global_step) {
            timeline.push(record(global_step, task.id, &params));
        }
    }

    let last = timeline.last().expect("timeline has the initial row");
    let final_per_task = last.per_task_accuracy.clone();
    let final_overall = last.overall_accuracy;
    let result = RunResult {
        final_mean_accuracy: unweighted_mean(&final_per_task),
        final_per_task_accuracy: final_per_task,
        final_overall_accuracy: final_overall,
        steps: global_step,
        wall_seconds: start.elapsed().as_secs_f64(),
        timeline,
    };
    Ok((result, params))
}

/// One gradient step: forward, loss, backward, elementwise clip, update.
fn train_step(
    cfg: &RunConfig,
    params: &mut MlpParams,
    opt_state: &mut OptimizerState,
    batch: &Matrix2D,
    labels: &[u8],
) {
    let (logits, cache) = mlp_forward(params, &cfg.activation, batch);
    let (_, dlogits) = softmax_cross_entropy(&logits, labels);
    let mut grads = mlp_backward(params, &cfg.activation, &cache, &dlogits);
    clip_gradients(&mut grads.tensors_mut(), cfg.optimizer.clip_value);
    apply_step(
        &cfg.optimizer,
        opt_state,
        &mut params.tensors_mut(),
        &grads.tensors(),
    );
}

/// Outcome of a permuted-MNIST run: after each task, accuracy on that task
/// (plasticity) and on task 0 (stability).
#[derive(Debug, Clone, Serialize)]
pub struct PermutedResult {
    /// `latest[t]` = accuracy on task t's test set right after training it.
    pub latest_task_accuracy: Vec<f32>,
    /// `task0[t]` = accuracy on task 0's test set after training task t.
    pub task0_accuracy: Vec<f32>,
    pub wall_seconds: f64,
}

impl PermutedResult {
    /// Two-column CSV (`task,accuracy`) for one of the curves.
    pub fn curve_csv(curve: &[f32]) -> String {
        let mut out = String::from("task,accuracy\n");
        for (t, acc) in curve.iter().enumerate() {
            out.push_str(&format!("{t},{acc:.6}\n"));
        }
        out
    }
}

/// The plasticity/stability study: a sequence of pixel-permutation tasks,
/// one epoch each by default, recording the latest-task and first-task
/// accuracies after every task.
pub fn run_permuted(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<PermutedResult, RunError> {
    cfg.validate()?;
    if cfg.mode != RunMode::Permuted {
        return Err(RunError::Config("run_permuted requires mode=permuted".into()));
    }
    let start = Instant::now();
    let stream = build_stream(cfg, train, test);
    let root = RngStream::new(cfg.seed);
    let dims = MlpDims {
        input: train.images.cols(),
        hidden: cfg.hidden_dim,
        output: NUM_CLASSES,
    };
    let mut params = MlpParams::init(dims, &root);
    let mut opt_state = OptimizerState::new(&cfg.optimizer, &params.tensor_lens());

    let mut latest = Vec::with_capacity(stream.len());
    let mut task0 = Vec::with_capacity(stream.len());
    for task in &stream.tasks {
        for epoch in 0..cfg.epochs_per_task {
            for indices in shuffled_batches(task, epoch, &root, cfg.batch_size) {
                let (batch, labels) = assemble_batch(train, &indices, task);
                train_step(cfg, &mut params, &mut opt_state, &batch, &labels);
            }
        }
        let (correct, count) = task_accuracy(&params, &cfg.activation, test, task);
        latest.push(correct as f32 / count as f32);
        let (correct, count) = task_accuracy(&params, &cfg.activation, test, &stream.tasks[0]);
        task0.push(correct as f32 / count as f32);
    }
    Ok(PermutedResult {
        latest_task_accuracy: latest,
        task0_accuracy: task0,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
