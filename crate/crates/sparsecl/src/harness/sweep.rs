//! Hyperparameter grid sweeps: the Cartesian product of named axes, each
//! point run over a fixed seed set, aggregated with Student-t confidence
//! intervals. Independent runs may execute in parallel; aggregation is
//! independent of completion order.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Deserialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{run_continual, RunConfig, RunError};
use crate::activations::ActivationSpec;
use crate::data::Dataset;
use crate::optim::{LrSchedule, OptimizerAlgo};

/// A sweep grid: named axes (sorted by name) and the seed set.
///
/// The JSON schema is a flat object of `axis: [values...]` plus an optional
/// `"seeds"` array; unknown axis names are hard errors at application time.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub axes: BTreeMap<String, Vec<f64>>,
    pub seeds: Vec<u64>,
}

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("grid parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("confidence interval needs at least 2 values, got {0}")]
    TooFewValues(usize),
}

impl SweepGrid {
    pub fn from_json(json: &str) -> Result<Self, SweepError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Axis {
            Values(Vec<f64>),
        }
        let raw: BTreeMap<String, Axis> = serde_json::from_str(json)?;
        let mut axes = BTreeMap::new();
        let mut seeds = DEFAULT_SEEDS.to_vec();
        for (name, Axis::Values(values)) in raw {
            if values.is_empty() {
                return Err(SweepError::Grid(format!("axis {name} is empty")));
            }
            if name == "seeds" {
                seeds = values.iter().map(|&v| v as u64).collect();
            } else {
                axes.insert(name, values);
            }
        }
        if seeds.is_empty() {
            return Err(SweepError::Grid("seed set is empty".into()));
        }
        Ok(SweepGrid { axes, seeds })
    }

    pub fn point_count(&self) -> usize {
        self.axes.values().map(Vec::len).product()
    }

    /// Enumerates the Cartesian product as `(axis name, value)` assignments,
    /// axes in name order, last axis fastest.
    fn assignments(&self) -> Vec<Vec<(String, f64)>> {
        let mut points: Vec<Vec<(String, f64)>> = vec![Vec::new()];
        for (name, values) in &self.axes {
            points = points
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push((name.clone(), v));
                        p
                    })
                })
                .collect();
        }
        points
    }
}

/// Applies one `axis = value` assignment onto a config clone.
fn apply_axis(cfg: &mut RunConfig, name: &str, value: f64) -> Result<(), SweepError> {
    let act_kind = cfg.activation.kind_name();
    let opt_kind = cfg.optimizer.kind_name();
    let incompatible = move |what: &str| {
        Err(SweepError::Grid(format!(
            "axis {what} does not apply to activation '{act_kind}' / optimizer '{opt_kind}'"
        )))
    };
    let as_usize = |v: f64| -> Result<usize, SweepError> {
        if v.fract() != 0.0 || v < 0.0 {
            return Err(SweepError::Grid(format!("axis {name} needs an integer, got {v}")));
        }
        Ok(v as usize)
    };
    match name {
        "alpha" => match &mut cfg.activation {
            ActivationSpec::Ash { alpha, .. } | ActivationSpec::HardAsh { alpha, .. } => {
                *alpha = value as f32
            }
            _ => return incompatible("alpha"),
        },
        "z_k" => match &mut cfg.activation {
            ActivationSpec::Ash { z_k, .. } | ActivationSpec::HardAsh { z_k, .. } => {
                *z_k = value as f32
            }
            _ => return incompatible("z_k"),
        },
        "x_max" => match &mut cfg.activation {
            ActivationSpec::HardAsh { x_max, .. } => *x_max = value as f32,
            _ => return incompatible("x_max"),
        },
        "k" => match &mut cfg.activation {
            ActivationSpec::TopKSubtract { k } | ActivationSpec::TopKMask { k } => {
                *k = as_usize(value)?
            }
            _ => return incompatible("k"),
        },
        "groups" => match &mut cfg.activation {
            ActivationSpec::Lwta { groups } => *groups = as_usize(value)?,
            _ => return incompatible("groups"),
        },
        "learning_rate" => match &mut cfg.optimizer.algo {
            OptimizerAlgo::Sgd { learning_rate }
            | OptimizerAlgo::Sgdm { learning_rate, .. }
            | OptimizerAlgo::Adagrad { learning_rate, .. }
            | OptimizerAlgo::Rmsprop { learning_rate, .. }
            | OptimizerAlgo::Adam { learning_rate, .. } => *learning_rate = value as f32,
        },
        "momentum" => match &mut cfg.optimizer.algo {
            OptimizerAlgo::Sgdm { momentum, .. } => *momentum = value as f32,
            _ => return incompatible("momentum"),
        },
        "decay" => match &mut cfg.optimizer.algo {
            OptimizerAlgo::Rmsprop { decay, .. } => *decay = value as f32,
            _ => return incompatible("decay"),
        },
        "beta1" => match &mut cfg.optimizer.algo {
            OptimizerAlgo::Adam { beta1, .. } => *beta1 = value as f32,
            _ => return incompatible("beta1"),
        },
        "beta2" => match &mut cfg.optimizer.algo {
            OptimizerAlgo::Adam { beta2, .. } => *beta2 = value as f32,
            _ => return incompatible("beta2"),
        },
        "initial_accumulator" => match &mut cfg.optimizer.algo {
            OptimizerAlgo::Adagrad {
                initial_accumulator,
                ..
            } => *initial_accumulator = value as f32,
            _ => return incompatible("initial_accumulator"),
        },
        "clip_value" => cfg.optimizer.clip_value = value as f32,
        "base_lr" | "decay_factor" | "interval_steps" => match &mut cfg.optimizer.schedule {
            LrSchedule::Exponential {
                base_lr,
                decay_factor,
                interval_steps,
            } => match name {
                "base_lr" => *base_lr = value as f32,
                "decay_factor" => *decay_factor = value as f32,
                _ => *interval_steps = as_usize(value)? as u64,
            },
            LrSchedule::None => {
                return Err(SweepError::Grid(format!(
                    "axis {name} needs an exponential schedule in the base config"
                )))
            }
        },
        other => return Err(SweepError::Grid(format!("unknown grid axis '{other}'"))),
    }
    Ok(())
}

/// One seed's outcome at a grid point.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub mean_accuracy: f32,
    pub overall_accuracy: f32,
}

/// One grid point with its per-seed outcomes and aggregate.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub assignment: String,
    pub config: RunConfig,
    pub per_seed: Vec<SeedOutcome>,
    /// Mean over seeds of the per-run final mean accuracy.
    pub mean_accuracy: f32,
    /// 95% Student-t half-width over seeds (0 for a single seed).
    pub ci_half_width: f32,
}

/// A completed sweep: every point, plus the winner index.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub winner: usize,
}

impl SweepResult {
    pub fn winning_point(&self) -> &SweepPoint {
        &self.points[self.winner]
    }

    /// One row per grid point per seed:
    /// `assignment,activation,optimizer,seed,mean_accuracy,overall_accuracy`.
    pub fn csv(&self) -> String {
        let mut out = String::from("assignment,activation,optimizer,seed,mean_accuracy,overall_accuracy\n");
        for point in &self.points {
            for seed in &point.per_seed {
                out.push_str(&format!(
                    "{},{},{},{},{:.6},{:.6}\n",
                    point.assignment,
                    point.config.activation.describe(),
                    point.config.optimizer.describe(),
                    seed.seed,
                    seed.mean_accuracy,
                    seed.overall_accuracy
                ));
            }
        }
        out
    }
}

fn assignment_label(assignment: &[(String, f64)]) -> String {
    if assignment.is_empty() {
        return "base".to_string();
    }
    assignment
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Mean and 95% confidence half-width (Student-t, sample standard
/// deviation). Errors below two values.
pub fn aggregate_ci(values: &[f32]) -> Result<(f32, f32), SweepError> {
    let n = values.len();
    if n < 2 {
        return Err(SweepError::TooFewValues(n));
    }
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid t distribution")
        .inverse_cdf(0.975);
    let half = t * var.sqrt() / (n as f64).sqrt();
    Ok((mean as f32, half as f32))
}

/// Runs the full grid: every point trained with every seed, in parallel,
/// then aggregated. The winner maximizes mean accuracy (ties break to the
/// earlier point in axis order).
pub fn sweep(
    base: &RunConfig,
    grid: &SweepGrid,
    train: &Dataset,
    test: &Dataset,
) -> Result<SweepResult, SweepError> {
    let assignments = grid.assignments();
    let mut configs = Vec::with_capacity(assignments.len());
    for assignment in &assignments {
        let mut cfg = base.clone();
        for (name, value) in assignment {
            apply_axis(&mut cfg, name, *value)?;
        }
        cfg.validate()?;
        configs.push(cfg);
    }

    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|p| grid.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let outcomes: Result<Vec<(usize, SeedOutcome)>, RunError> = jobs
        .par_iter()
        .map(|&(point_idx, seed)| {
            let mut cfg = configs[point_idx].clone();
            cfg.seed = seed;
            let result = run_continual(&cfg, train, test)?;
            Ok((
                point_idx,
                SeedOutcome {
                    seed,
                    mean_accuracy: result.final_mean_accuracy,
                    overall_accuracy: result.final_overall_accuracy,
                },
            ))
        })
        .collect();
    let mut outcomes = outcomes?;
    // Deterministic aggregation regardless of completion order.
    outcomes.sort_by_key(|(p, o)| (*p, o.seed));

    let mut points = Vec::with_capacity(configs.len());
    for (idx, (assignment, config)) in assignments.iter().zip(configs).enumerate() {
        let per_seed: Vec<SeedOutcome> = outcomes
            .iter()
            .filter(|(p, _)| *p == idx)
            .map(|(_, o)| o.clone())
            .collect();
        let accs: Vec<f32> = per_seed.iter().map(|o| o.mean_accuracy).collect();
        let (mean, ci) = if accs.len() >= 2 {
            aggregate_ci(&accs)?
        } else {
            (accs[0], 0.0)
        };
        points.push(SweepPoint {
            assignment: assignment_label(assignment),
            config,
            per_seed,
            mean_accuracy: mean,
            ci_half_width: ci,
        });
    }
    let winner = points
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.mean_accuracy
                .total_cmp(&b.mean_accuracy)
                .then(ib.cmp(ia))
        })
        .map(|(i, _)| i)
        .expect("grid is nonempty");
    Ok(SweepResult { points, winner })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run::tests::synthetic_mnist;
    use crate::harness::RunMode;
    use crate::optim::OptimizerSpec;

    #[test]
    fn ci_examples() {
        let (mean, hw) = aggregate_ci(&[70.0, 70.0, 70.0]).unwrap();
        assert_eq!(mean, 70.0);
        assert_eq!(hw, 0.0);

        // Hand oracle: mean 74, s = sqrt(10), t_{0.975,4} = 2.776.
        let (mean, hw) = aggregate_ci(&[70.0, 72.0, 74.0, 76.0, 78.0]).unwrap();
        assert!((mean - 74.0).abs() < 1e-5);
        let oracle = 2.7764451 * 10f64.sqrt() / 5f64.sqrt();
        assert!((hw as f64 - oracle).abs() < 1e-4, "{hw} vs {oracle}");
        assert!((hw - 3.93).abs() < 0.01);

        assert!(matches!(
            aggregate_ci(&[1.0]),
            Err(SweepError::TooFewValues(1))
        ));
    }

    #[test]
    fn half_width_shrinks_like_inverse_sqrt_n() {
        // Same sample std at n and 4n: the half width should shrink by a bit
        // more than half (the t quantile also falls).
        let a: Vec<f32> = vec![1.0, 3.0, 1.0, 3.0];
        let b: Vec<f32> = a.iter().cycle().take(16).copied().collect();
        let (_, hw_a) = aggregate_ci(&a).unwrap();
        let (_, hw_b) = aggregate_ci(&b).unwrap();
        assert!(hw_b < hw_a / 2.0, "{hw_b} vs {hw_a}");
    }

    #[test]
    fn grid_parses_and_enumerates_in_axis_order() {
        let grid = SweepGrid::from_json(
            r#"{"z_k": [2.2, 2.3], "alpha": [3.0, 4.0], "seeds": [0, 1]}"#,
        )
        .unwrap();
        assert_eq!(grid.seeds, vec![0, 1]);
        assert_eq!(grid.point_count(), 4);
        let assignments = grid.assignments();
        // Axes sorted by name: alpha varies slowest.
        assert_eq!(assignment_label(&assignments[0]), "alpha=3;z_k=2.2");
        assert_eq!(assignment_label(&assignments[1]), "alpha=3;z_k=2.3");
        assert_eq!(assignment_label(&assignments[3]), "alpha=4;z_k=2.3");
    }

    #[test]
    fn unknown_axis_is_a_hard_error() {
        let grid = SweepGrid::from_json(r#"{"warp_factor": [9]}"#).unwrap();
        let base = RunConfig::new(
            RunMode::Iid,
            ActivationSpec::Relu,
            OptimizerSpec::new(OptimizerAlgo::Sgd { learning_rate: 0.01 }),
        );
        let (train, test) = synthetic_mnist(4, 3);
        let err = sweep(&base, &grid, &train, &test).unwrap_err();
        assert!(err.to_string().contains("warp_factor"), "{err}");
    }

    #[test]
    fn incompatible_axis_is_a_hard_error() {
        let grid = SweepGrid::from_json(r#"{"alpha": [3.0]}"#).unwrap();
        let base = RunConfig::new(
            RunMode::Iid,
            ActivationSpec::Relu,
            OptimizerSpec::new(OptimizerAlgo::Sgd { learning_rate: 0.01 }),
        );
        let (train, test) = synthetic_mnist(4, 3);
        assert!(sweep(&base, &grid, &train, &test).is_err());
    }

    #[test]
    fn singleton_grid_matches_direct_runs() {
        let (train, test) = synthetic_mnist(20, 5);
        let mut base = RunConfig::new(
            RunMode::Split,
            ActivationSpec::Relu,
            OptimizerSpec::new(OptimizerAlgo::Adagrad {
                learning_rate: 1e-2,
                initial_accumulator: 1e-6,
            }),
        );
        base.hidden_dim = 32;
        base.batch_size = 16;
        base.eval_every_steps = 0;
        let grid = SweepGrid::from_json(r#"{"learning_rate": [0.01], "seeds": [0, 1]}"#).unwrap();
        let result = sweep(&base, &grid, &train, &test).unwrap();
        assert_eq!(result.points.len(), 1);
        assert_eq!(result.points[0].per_seed.len(), 2);

        for seed in [0u64, 1] {
            let mut cfg = base.clone();
            cfg.seed = seed;
            let direct = run_continual(&cfg, &train, &test).unwrap();
            let outcome = result.points[0]
                .per_seed
                .iter()
                .find(|o| o.seed == seed)
                .unwrap();
            assert_eq!(outcome.mean_accuracy, direct.final_mean_accuracy);
        }
        // Winner must be reproducible from the emitted CSV alone.
        let csv = result.csv();
        assert_eq!(csv.lines().count(), 1 + 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("learning_rate=0.01,relu,"));
    }

    #[test]
    fn sweep_row_count_is_points_times_seeds() {
        let (train, test) = synthetic_mnist(10, 7);
        let mut base = RunConfig::new(
            RunMode::Iid,
            ActivationSpec::TopKSubtract { k: 4 },
            OptimizerSpec::new(OptimizerAlgo::Sgd { learning_rate: 0.05 }),
        );
        base.hidden_dim = 16;
        base.batch_size = 16;
        base.eval_every_steps = 0;
        let grid =
            SweepGrid::from_json(r#"{"k": [2, 4], "learning_rate": [0.05, 0.1], "seeds": [0, 1, 2]}"#)
                .unwrap();
        let result = sweep(&base, &grid, &train, &test).unwrap();
        assert_eq!(result.points.len(), 4);
        assert_eq!(result.csv().lines().count(), 1 + 4 * 3);
        let w = result.winning_point();
        assert!(result
            .points
            .iter()
            .all(|p| p.mean_accuracy <= w.mean_accuracy));
    }
}
