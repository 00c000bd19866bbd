//! Full-network gradient verification: the analytic f32 backward pass is
//! compared against central finite differences of an independent,
//! straight-line double-precision re-implementation of the forward pass.
//!
//! The backward pass treats row statistics, Top-K thresholds, and winner
//! sets as constants, so the reference differences the same detached
//! function: those quantities are frozen at the values cached by the
//! unperturbed forward. Weight normalization is never detached; the check
//! exercises the full projection term. Inputs near a kink of a piecewise
//! activation are rejected and resampled.

use crate::activations::{ActivationCache, ActivationSpec};
use crate::matrix::Matrix2D;
use crate::model::{mlp_backward, mlp_forward, softmax_cross_entropy, MlpDims, MlpParams};
use crate::rng::RngStream;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub activation: ActivationSpec,
    pub hidden_dim: usize,
    /// Worst relative error over all parameters.
    pub worst_rel_error: f64,
    /// Worst relative error per tensor, in (w1, b1, w2, b2) order.
    pub per_tensor: [f64; 4],
    pub tolerance: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "gradcheck {} (hidden {}): worst relative error {:.3e} (tolerance {:.0e})",
            self.activation.describe(),
            self.hidden_dim,
            self.worst_rel_error,
            self.tolerance
        )?;
        for (name, err) in ["w1", "b1", "w2", "b2"].iter().zip(self.per_tensor) {
            writeln!(f, "  {name}: {err:.3e}")?;
        }
        write!(f, "  {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

/// Double-precision straight-line reference used by the finite-difference
/// oracle and by forward-pass comparison tests.
pub mod reference {
    use super::*;

    /// Gate state captured from an unperturbed forward pass. `Live` computes
    /// statistics and winners from the perturbed values instead.
    #[derive(Debug, Clone)]
    pub enum FrozenGates {
        Live,
        /// Per-row (mean, std) for the ASH family.
        Stats(Vec<(f64, f64)>),
        TopK {
            winners: Vec<u32>,
            per_row: usize,
            thresholds: Vec<f64>,
            subtract: bool,
        },
        Lwta {
            winners: Vec<u32>,
            per_row: usize,
        },
    }

    /// Captures the detached quantities from a production forward cache.
    pub fn freeze_gates(spec: &ActivationSpec, cache: &ActivationCache) -> FrozenGates {
        match *spec {
            ActivationSpec::Ash { .. } | ActivationSpec::HardAsh { .. } => FrozenGates::Stats(
                cache
                    .row_stats()
                    .iter()
                    .map(|&(m, s)| (m as f64, s as f64))
                    .collect(),
            ),
            ActivationSpec::TopKSubtract { k } | ActivationSpec::TopKMask { k } => {
                FrozenGates::TopK {
                    winners: cache.winners().to_vec(),
                    per_row: k,
                    thresholds: cache.thresholds().iter().map(|&t| t as f64).collect(),
                    subtract: matches!(spec, ActivationSpec::TopKSubtract { .. }),
                }
            }
            ActivationSpec::Lwta { groups } => FrozenGates::Lwta {
                winners: cache.winners().to_vec(),
                per_row: groups,
            },
            _ => FrozenGates::Live,
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn hard_sigmoid(x: f64) -> f64 {
        (x + 3.0).clamp(0.0, 6.0) / 6.0
    }

    fn activation_row(
        spec: &ActivationSpec,
        z: &[f64],
        row_idx: usize,
        gates: &FrozenGates,
    ) -> Vec<f64> {
        let live_stats = || {
            let n = z.len() as f64;
            let mu = z.iter().sum::<f64>() / n;
            let sigma = (z.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
            (mu, sigma)
        };
        match *spec {
            ActivationSpec::Ash { alpha, z_k } => {
                let (mu, sigma) = match gates {
                    FrozenGates::Stats(s) => s[row_idx],
                    _ => live_stats(),
                };
                let c = mu + z_k as f64 * sigma;
                z.iter()
                    .map(|&v| v * sigmoid(alpha as f64 * (v - c)))
                    .collect()
            }
            ActivationSpec::HardAsh { alpha, z_k, x_max } => {
                let (mu, sigma) = match gates {
                    FrozenGates::Stats(s) => s[row_idx],
                    _ => live_stats(),
                };
                let c = mu + z_k as f64 * sigma;
                z.iter()
                    .map(|&v| {
                        v.clamp(0.0, x_max as f64) * hard_sigmoid(alpha as f64 * (v - c))
                    })
                    .collect()
            }
            ActivationSpec::TopKSubtract { k } | ActivationSpec::TopKMask { k } => {
                let subtract = matches!(spec, ActivationSpec::TopKSubtract { .. });
                let (winners, threshold): (Vec<u32>, f64) = match gates {
                    FrozenGates::TopK {
                        winners,
                        per_row,
                        thresholds,
                        ..
                    } => (
                        winners[row_idx * per_row..(row_idx + 1) * per_row].to_vec(),
                        thresholds[row_idx],
                    ),
                    _ => {
                        let mut idx: Vec<u32> = (0..z.len() as u32).collect();
                        idx.sort_by(|a, b| {
                            z[*b as usize]
                                .total_cmp(&z[*a as usize])
                                .then(a.cmp(b))
                        });
                        let winners = idx[..k].to_vec();
                        (winners.clone(), z[idx[k - 1] as usize])
                    }
                };
                let mut out = vec![0.0; z.len()];
                for &w in &winners {
                    out[w as usize] = if subtract {
                        z[w as usize] - threshold
                    } else {
                        z[w as usize]
                    };
                }
                out
            }
            ActivationSpec::Lwta { groups } => {
                let mut out = vec![0.0; z.len()];
                match gates {
                    FrozenGates::Lwta { winners, per_row } => {
                        for &w in &winners[row_idx * per_row..(row_idx + 1) * per_row] {
                            out[w as usize] = z[w as usize];
                        }
                    }
                    _ => {
                        let block = z.len() / groups;
                        for g in 0..groups {
                            let start = g * block;
                            let mut best = start;
                            for j in start + 1..start + block {
                                if z[j] > z[best] {
                                    best = j;
                                }
                            }
                            out[best] = z[best];
                        }
                    }
                }
                out
            }
            ActivationSpec::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
            ActivationSpec::Swish => z.iter().map(|&v| v * sigmoid(v)).collect(),
            ActivationSpec::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
            ActivationSpec::HardSigmoid => z.iter().map(|&v| hard_sigmoid(v)).collect(),
        }
    }

    /// Flattens parameters into the checkpoint order (w1, b1, w2, b2).
    pub fn flatten(params: &MlpParams) -> Vec<f64> {
        params
            .tensors()
            .iter()
            .flat_map(|t| t.iter().map(|&v| v as f64))
            .collect()
    }

    /// Logits of the reference forward for flattened parameters `theta`.
    pub fn logits(
        theta: &[f64],
        dims: MlpDims,
        weightnorm: (bool, bool),
        spec: &ActivationSpec,
        gates: &FrozenGates,
        batch: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let (n_in, n_hid, n_out) = (dims.input, dims.hidden, dims.output);
        let w1 = &theta[..n_in * n_hid];
        let b1 = &theta[n_in * n_hid..n_in * n_hid + n_hid];
        let w2_off = n_in * n_hid + n_hid;
        let w2 = &theta[w2_off..w2_off + n_hid * n_out];
        let b2 = &theta[w2_off + n_hid * n_out..];

        let normalize = |w: &[f64], rows: usize, cols: usize| -> Vec<f64> {
            let mut norms = vec![0.0f64; cols];
            for i in 0..rows {
                for j in 0..cols {
                    norms[j] += w[i * cols + j] * w[i * cols + j];
                }
            }
            for n in &mut norms {
                *n = n.sqrt();
            }
            let mut out = w.to_vec();
            for i in 0..rows {
                for j in 0..cols {
                    out[i * cols + j] /= norms[j];
                }
            }
            out
        };
        let w1_eff = if weightnorm.0 {
            normalize(w1, n_in, n_hid)
        } else {
            w1.to_vec()
        };
        let w2_eff = if weightnorm.1 {
            normalize(w2, n_hid, n_out)
        } else {
            w2.to_vec()
        };

        batch
            .iter()
            .enumerate()
            .map(|(row_idx, x)| {
                let mut z1 = b1.to_vec();
                for (i, &xi) in x.iter().enumerate() {
                    for j in 0..n_hid {
                        z1[j] += xi * w1_eff[i * n_hid + j];
                    }
                }
                let h = activation_row(spec, &z1, row_idx, gates);
                let mut out = b2.to_vec();
                for (i, &hi) in h.iter().enumerate() {
                    for j in 0..n_out {
                        out[j] += hi * w2_eff[i * n_out + j];
                    }
                }
                out
            })
            .collect()
    }

    /// Mean softmax cross-entropy of the reference forward.
    pub fn loss(
        theta: &[f64],
        dims: MlpDims,
        weightnorm: (bool, bool),
        spec: &ActivationSpec,
        gates: &FrozenGates,
        batch: &[Vec<f64>],
        labels: &[u8],
    ) -> f64 {
        let logits = logits(theta, dims, weightnorm, spec, gates, batch);
        let mut total = 0.0;
        for (row, &label) in logits.iter().zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            total += -((row[label as usize] - max) - sum.ln());
        }
        total / batch.len() as f64
    }
}

/// Picks a hidden width compatible with the activation's hyperparameters
/// but small enough for finite differences over every parameter.
fn gradcheck_hidden_dim(spec: &ActivationSpec) -> usize {
    match *spec {
        ActivationSpec::TopKSubtract { k } | ActivationSpec::TopKMask { k } => (2 * k).max(16),
        ActivationSpec::Lwta { groups } => groups * (16usize.div_ceil(groups)).max(2),
        _ => 16,
    }
}

/// Distance from the nearest kink for one pre-activation, in input units.
fn kink_margin(spec: &ActivationSpec, z: f32, threshold: f32) -> f64 {
    let z = z as f64;
    match *spec {
        ActivationSpec::Relu => z.abs(),
        ActivationSpec::HardSigmoid => (z.abs() - 3.0).abs(),
        ActivationSpec::HardAsh { alpha, x_max, .. } => {
            let u = alpha as f64 * (z - threshold as f64);
            z.abs()
                .min((z - x_max as f64).abs())
                .min((u.abs() - 3.0).abs() / alpha as f64)
        }
        // Smooth everywhere, or piecewise only through frozen winner sets.
        _ => f64::INFINITY,
    }
}

const KINK_MARGIN: f64 = 0.02;
const FD_STEP: f64 = 1e-3;
const BATCH: usize = 3;
const INPUT_DIM: usize = 12;

struct CheckSetup {
    params: MlpParams,
    batch: Matrix2D,
    labels: Vec<u8>,
}

/// Draws setups until every pre-activation clears the kink margin.
fn sample_setup(spec: &ActivationSpec, seed: u64) -> CheckSetup {
    let hidden = gradcheck_hidden_dim(spec);
    let dims = MlpDims {
        input: INPUT_DIM,
        hidden,
        output: 10,
    };
    let root = RngStream::new(seed).derive("gradcheck");
    let mut params = MlpParams::init(dims, &root);
    let mut bias_rng = root.derive("bias");
    for b in &mut params.b1 {
        *b = bias_rng.uniform(-0.2, 0.2) as f32;
    }
    for b in &mut params.b2 {
        *b = bias_rng.uniform(-0.2, 0.2) as f32;
    }

    for attempt in 0..500u64 {
        let mut rng = root.derive_indexed("batch", attempt);
        let batch = Matrix2D::from_vec(
            BATCH,
            INPUT_DIM,
            (0..BATCH * INPUT_DIM)
                .map(|_| rng.uniform(-1.0, 1.0) as f32)
                .collect(),
        );
        let labels: Vec<u8> = (0..BATCH).map(|_| rng.below(10) as u8).collect();
        let (_, cache) = mlp_forward(&params, spec, &batch);
        let act = &cache;
        let pre = act.activation_cache().pre_activations();
        let stats = act.activation_cache().row_stats();
        let clear = (0..pre.rows()).all(|i| {
            let threshold = stats
                .get(i)
                .map(|&(m, s)| match spec {
                    ActivationSpec::Ash { z_k, .. } | ActivationSpec::HardAsh { z_k, .. } => {
                        m + z_k * s
                    }
                    _ => 0.0,
                })
                .unwrap_or(0.0);
            pre.row(i)
                .iter()
                .all(|&z| kink_margin(spec, z, threshold) > KINK_MARGIN)
        });
        if clear {
            return CheckSetup {
                params,
                batch,
                labels,
            };
        }
    }
    panic!(
        "gradcheck: could not sample a kink-free batch for {}",
        spec.describe()
    );
}

fn run_check(spec: &ActivationSpec, seed: u64, corrupt: Option<(usize, f32)>) -> GradcheckReport {
    let setup = sample_setup(spec, seed);
    let CheckSetup {
        params,
        batch,
        labels,
    } = &setup;
    let dims = params.dims();

    let (logits, cache) = mlp_forward(params, spec, batch);
    let (_, dlogits) = softmax_cross_entropy(&logits, labels);
    let grads = mlp_backward(params, spec, &cache, &dlogits);
    let mut analytic: Vec<f32> = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter().copied())
        .collect();
    if let Some((idx, factor)) = corrupt {
        analytic[idx] += 0.05 * factor;
    }

    let gates = reference::freeze_gates(spec, cache.activation_cache());
    let batch_f64: Vec<Vec<f64>> = (0..batch.rows())
        .map(|i| batch.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let weightnorm = (params.weightnorm_layer1, params.weightnorm_layer2);
    let theta = reference::flatten(params);

    let tensor_lens = params.tensor_lens();
    let mut per_tensor = [0.0f64; 4];
    let mut worst = 0.0f64;
    let mut offset = 0usize;
    for (tensor_idx, &len) in tensor_lens.iter().enumerate() {
        for i in 0..len {
            let idx = offset + i;
            let mut plus = theta.clone();
            plus[idx] += FD_STEP;
            let mut minus = theta.clone();
            minus[idx] -= FD_STEP;
            let fd = (reference::loss(&plus, dims, weightnorm, spec, &gates, &batch_f64, labels)
                - reference::loss(&minus, dims, weightnorm, spec, &gates, &batch_f64, labels))
                / (2.0 * FD_STEP);
            let an = analytic[idx] as f64;
            // The floor turns the criterion into an absolute check for
            // near-zero gradients, where f32-vs-f64 representation noise
            // (~1e-8) would otherwise dominate the ratio.
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            per_tensor[tensor_idx] = per_tensor[tensor_idx].max(rel);
            worst = worst.max(rel);
        }
        offset += len;
    }
    GradcheckReport {
        activation: *spec,
        hidden_dim: dims.hidden,
        worst_rel_error: worst,
        per_tensor,
        tolerance: GRADCHECK_TOLERANCE,
        pass: worst < GRADCHECK_TOLERANCE,
    }
}

/// Checks every parameter's analytic gradient against central finite
/// differences of the double-precision reference, at kink-free inputs.
pub fn gradcheck(spec: &ActivationSpec, seed: u64) -> GradcheckReport {
    run_check(spec, seed, None)
}

/// Negative-control entry point: deliberately corrupts one analytic
/// gradient before comparing, so the check must fail.
#[doc(hidden)]
pub fn gradcheck_corrupted(spec: &ActivationSpec, seed: u64) -> GradcheckReport {
    run_check(spec, seed, Some((0, 1.0)))
}
