//! The hidden-layer activation functions under study, as paired
//! forward/backward operations applied independently to each example (row).
//!
//! The ASH family gates each unit against a threshold built from the row's
//! own mean and standard deviation:
//!
//! ```text
//! ASH(x_i)      = x_i * sigmoid(alpha * (x_i - mu - z_k * sigma))
//! HardASH(x_i)  = clip(x_i, 0, x_max) * hard_sigmoid(alpha * (x_i - mu - z_k * sigma))
//! ```
//!
//! Top-K keeps the `k` largest units per row (the subtract variant shifts
//! them down by the k-th value first), LWTA keeps the maximum of each
//! contiguous group, and ReLU/Swish/Sigmoid/HardSigmoid are the usual
//! pointwise baselines.
//!
//! Backward passes treat the row statistics, the Top-K threshold, and the
//! winner sets as constants of the forward pass (detached), so gradients
//! flow only through the units themselves.

use serde::{Deserialize, Serialize};

use crate::matrix::{row_mean_std, Matrix2D};

/// Which activation to use, plus its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActivationSpec {
    Ash { alpha: f32, z_k: f32 },
    HardAsh { alpha: f32, z_k: f32, x_max: f32 },
    TopKSubtract { k: usize },
    TopKMask { k: usize },
    Lwta { groups: usize },
    Relu,
    Swish,
    Sigmoid,
    HardSigmoid,
}

/// Invalid activation hyperparameters for a given layer width.
#[derive(Debug, thiserror::Error)]
#[error("invalid activation: {0}")]
pub struct InvalidActivation(pub String);

impl ActivationSpec {
    /// Checks the hyperparameters against the layer width they will act on.
    pub fn validate(&self, width: usize) -> Result<(), InvalidActivation> {
        match *self {
            ActivationSpec::Ash { alpha, z_k } => {
                if alpha <= 0.0 || !alpha.is_finite() {
                    return Err(InvalidActivation(format!("ash alpha {alpha} must be > 0")));
                }
                if !z_k.is_finite() {
                    return Err(InvalidActivation(format!("ash z_k {z_k} must be finite")));
                }
            }
            ActivationSpec::HardAsh { alpha, z_k, x_max } => {
                if alpha <= 0.0 || !alpha.is_finite() {
                    return Err(InvalidActivation(format!(
                        "hard_ash alpha {alpha} must be > 0"
                    )));
                }
                if !z_k.is_finite() {
                    return Err(InvalidActivation(format!(
                        "hard_ash z_k {z_k} must be finite"
                    )));
                }
                if x_max <= 0.0 || !x_max.is_finite() {
                    return Err(InvalidActivation(format!(
                        "hard_ash x_max {x_max} must be > 0"
                    )));
                }
            }
            ActivationSpec::TopKSubtract { k } | ActivationSpec::TopKMask { k } => {
                if k < 1 || k > width {
                    return Err(InvalidActivation(format!(
                        "top-k k {k} must be in 1..={width}"
                    )));
                }
            }
            ActivationSpec::Lwta { groups } => {
                if groups < 1 || width % groups != 0 {
                    return Err(InvalidActivation(format!(
                        "lwta groups {groups} must divide layer width {width}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ActivationSpec::Ash { .. } => "ash",
            ActivationSpec::HardAsh { .. } => "hard_ash",
            ActivationSpec::TopKSubtract { .. } => "top_k_subtract",
            ActivationSpec::TopKMask { .. } => "top_k_mask",
            ActivationSpec::Lwta { .. } => "lwta",
            ActivationSpec::Relu => "relu",
            ActivationSpec::Swish => "swish",
            ActivationSpec::Sigmoid => "sigmoid",
            ActivationSpec::HardSigmoid => "hard_sigmoid",
        }
    }

    /// Compact single-token description, used in CSV output.
    pub fn describe(&self) -> String {
        match *self {
            ActivationSpec::Ash { alpha, z_k } => format!("ash(alpha={alpha},z_k={z_k})"),
            ActivationSpec::HardAsh { alpha, z_k, x_max } => {
                format!("hard_ash(alpha={alpha},z_k={z_k},x_max={x_max})")
            }
            ActivationSpec::TopKSubtract { k } => format!("top_k_subtract(k={k})"),
            ActivationSpec::TopKMask { k } => format!("top_k_mask(k={k})"),
            ActivationSpec::Lwta { groups } => format!("lwta(groups={groups})"),
            _ => self.kind_name().to_string(),
        }
    }

    /// True for the kinds whose output is mostly exact zeros.
    pub fn is_sparse(&self) -> bool {
        matches!(
            self,
            ActivationSpec::Ash { .. }
                | ActivationSpec::HardAsh { .. }
                | ActivationSpec::TopKSubtract { .. }
                | ActivationSpec::TopKMask { .. }
                | ActivationSpec::Lwta { .. }
        )
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// `clip(x + 3, 0, 6) / 6`: exactly 0 below -3, exactly 1 above 3,
/// slope 1/6 between.
#[inline]
pub fn hard_sigmoid(v: f32) -> f32 {
    (v + 3.0).clamp(0.0, 6.0) / 6.0
}

/// Everything the backward pass needs from a forward call.
///
/// `winners` is row-major with a fixed number of entries per row (`k` for
/// Top-K, `groups` for LWTA); `stats` holds per-row `(mean, std)` for the
/// ASH family; `thresholds` holds the per-row k-th highest value for the
/// Top-K subtract variant.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    spec: ActivationSpec,
    pre: Matrix2D,
    stats: Vec<(f32, f32)>,
    winners: Vec<u32>,
    thresholds: Vec<f32>,
}

impl ActivationCache {
    pub fn spec(&self) -> &ActivationSpec {
        &self.spec
    }

    pub fn pre_activations(&self) -> &Matrix2D {
        &self.pre
    }

    /// Per-row `(mean, std)` of the pre-activations (ASH family only).
    pub fn row_stats(&self) -> &[(f32, f32)] {
        &self.stats
    }

    pub fn winners(&self) -> &[u32] {
        &self.winners
    }

    pub fn thresholds(&self) -> &[f32] {
        &self.thresholds
    }

    fn new(spec: ActivationSpec, pre: Matrix2D) -> Self {
        ActivationCache {
            spec,
            pre,
            stats: Vec::new(),
            winners: Vec::new(),
            thresholds: Vec::new(),
        }
    }
}

/// Applies `spec` to every row of `x`.
pub fn activation_forward(spec: &ActivationSpec, x: &Matrix2D) -> (Matrix2D, ActivationCache) {
    spec.validate(x.cols())
        .unwrap_or_else(|e| panic!("activation_forward: {e}"));
    match *spec {
        ActivationSpec::Ash { alpha, z_k } => ash_forward(x, alpha, z_k),
        ActivationSpec::HardAsh { alpha, z_k, x_max } => hard_ash_forward(x, alpha, z_k, x_max),
        ActivationSpec::TopKSubtract { k } => topk_subtract(x, k),
        ActivationSpec::TopKMask { k } => topk_mask(x, k),
        ActivationSpec::Lwta { groups } => lwta(x, groups),
        _ => pointwise_forward(spec, x),
    }
}

/// `x_i * sigmoid(alpha * (x_i - mu - z_k * sigma))` per row.
pub fn ash_forward(x: &Matrix2D, alpha: f32, z_k: f32) -> (Matrix2D, ActivationCache) {
    let mut out = x.clone();
    let mut cache = ActivationCache::new(ActivationSpec::Ash { alpha, z_k }, x.clone());
    cache.stats.reserve(x.rows());
    for i in 0..x.rows() {
        let (mu, sigma) = row_mean_std(x.row(i));
        cache.stats.push((mu, sigma));
        let threshold = mu + z_k * sigma;
        for v in out.row_mut(i) {
            *v *= sigmoid(alpha * (*v - threshold));
        }
    }
    (out, cache)
}

/// `clip(x_i, 0, x_max) * hard_sigmoid(alpha * (x_i - mu - z_k * sigma))` per row.
///
/// Output is exactly zero wherever the input is non-positive or the gate
/// argument is at or below -3, and saturates at `x_max` when both factors
/// saturate.
pub fn hard_ash_forward(
    x: &Matrix2D,
    alpha: f32,
    z_k: f32,
    x_max: f32,
) -> (Matrix2D, ActivationCache) {
    let mut out = x.clone();
    let mut cache = ActivationCache::new(ActivationSpec::HardAsh { alpha, z_k, x_max }, x.clone());
    cache.stats.reserve(x.rows());
    for i in 0..x.rows() {
        let (mu, sigma) = row_mean_std(x.row(i));
        cache.stats.push((mu, sigma));
        let threshold = mu + z_k * sigma;
        for v in out.row_mut(i) {
            *v = v.clamp(0.0, x_max) * hard_sigmoid(alpha * (*v - threshold));
        }
    }
    (out, cache)
}

/// Ranks `row` descending by value with ties broken toward lower indices,
/// and returns the winner indices (ascending) plus the k-th highest value.
fn select_top_k(row: &[f32], k: usize) -> (Vec<u32>, f32) {
    let mut idx: Vec<u32> = (0..row.len() as u32).collect();
    let rank = |a: &u32, b: &u32| {
        row[*b as usize]
            .total_cmp(&row[*a as usize])
            .then(a.cmp(b))
    };
    idx.select_nth_unstable_by(k - 1, rank);
    let threshold = row[idx[k - 1] as usize];
    let mut winners = idx[..k].to_vec();
    winners.sort_unstable();
    (winners, threshold)
}

/// Keeps the `k` largest units per row and subtracts the k-th highest value
/// from them; everything else becomes zero, so at most `k - 1` nonzeros
/// survive (the k-th winner itself lands exactly on zero).
pub fn topk_subtract(x: &Matrix2D, k: usize) -> (Matrix2D, ActivationCache) {
    assert!(
        k >= 1 && k <= x.cols(),
        "topk_subtract: k {k} out of range for width {}",
        x.cols()
    );
    let mut out = Matrix2D::zeros(x.rows(), x.cols());
    let mut cache = ActivationCache::new(ActivationSpec::TopKSubtract { k }, x.clone());
    for i in 0..x.rows() {
        let (winners, t) = select_top_k(x.row(i), k);
        let row = x.row(i);
        let out_row = out.row_mut(i);
        for &w in &winners {
            out_row[w as usize] = row[w as usize] - t;
        }
        cache.winners.extend_from_slice(&winners);
        cache.thresholds.push(t);
    }
    (out, cache)
}

/// Keeps the `k` largest units per row unchanged; everything else zero.
pub fn topk_mask(x: &Matrix2D, k: usize) -> (Matrix2D, ActivationCache) {
    assert!(
        k >= 1 && k <= x.cols(),
        "topk_mask: k {k} out of range for width {}",
        x.cols()
    );
    let mut out = Matrix2D::zeros(x.rows(), x.cols());
    let mut cache = ActivationCache::new(ActivationSpec::TopKMask { k }, x.clone());
    for i in 0..x.rows() {
        let (winners, t) = select_top_k(x.row(i), k);
        let row = x.row(i);
        let out_row = out.row_mut(i);
        for &w in &winners {
            out_row[w as usize] = row[w as usize];
        }
        cache.winners.extend_from_slice(&winners);
        cache.thresholds.push(t);
    }
    (out, cache)
}

/// Local winner-take-all over contiguous groups: within each block of
/// `width / groups` units the maximum survives (ties to the lowest index),
/// the rest become zero.
pub fn lwta(x: &Matrix2D, groups: usize) -> (Matrix2D, ActivationCache) {
    assert!(
        groups >= 1 && x.cols() % groups == 0,
        "lwta: groups {groups} must divide width {}",
        x.cols()
    );
    let block = x.cols() / groups;
    let mut out = Matrix2D::zeros(x.rows(), x.cols());
    let mut cache = ActivationCache::new(ActivationSpec::Lwta { groups }, x.clone());
    for i in 0..x.rows() {
        let row = x.row(i);
        let out_row = out.row_mut(i);
        for g in 0..groups {
            let start = g * block;
            let mut best = start;
            for j in start + 1..start + block {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out_row[best] = row[best];
            cache.winners.push(best as u32);
        }
    }
    (out, cache)
}

/// The pointwise baselines: ReLU, Swish, Sigmoid, HardSigmoid.
pub fn pointwise_forward(spec: &ActivationSpec, x: &Matrix2D) -> (Matrix2D, ActivationCache) {
    let mut out = x.clone();
    match spec {
        ActivationSpec::Relu => {
            for v in out.data_mut() {
                *v = v.max(0.0);
            }
        }
        ActivationSpec::Swish => {
            for v in out.data_mut() {
                *v *= sigmoid(*v);
            }
        }
        ActivationSpec::Sigmoid => {
            for v in out.data_mut() {
                *v = sigmoid(*v);
            }
        }
        ActivationSpec::HardSigmoid => {
            for v in out.data_mut() {
                *v = hard_sigmoid(*v);
            }
        }
        other => panic!("pointwise_forward: {} is not pointwise", other.kind_name()),
    }
    (out, ActivationCache::new(*spec, x.clone()))
}

/// Propagates `upstream` (dL/d out) back to dL/d pre-activation.
///
/// Row statistics, Top-K thresholds, and winner sets are detached: gradient
/// flows only through the unit's own value. Saturated regions of Hard ASH,
/// hard sigmoid, and ReLU contribute exactly zero.
pub fn activation_backward(
    spec: &ActivationSpec,
    cache: &ActivationCache,
    upstream: &Matrix2D,
) -> Matrix2D {
    assert_eq!(
        spec, &cache.spec,
        "activation_backward: cache was produced by a different spec"
    );
    assert_eq!(
        (upstream.rows(), upstream.cols()),
        (cache.pre.rows(), cache.pre.cols()),
        "activation_backward: upstream shape mismatch"
    );
    let x = &cache.pre;
    let mut dx = Matrix2D::zeros(x.rows(), x.cols());
    match *spec {
        ActivationSpec::Ash { alpha, z_k } => {
            for i in 0..x.rows() {
                let (mu, sigma) = cache.stats[i];
                let threshold = mu + z_k * sigma;
                let (xr, ur, dr) = (x.row(i), upstream.row(i), dx.row_mut(i));
                for j in 0..xr.len() {
                    let s = sigmoid(alpha * (xr[j] - threshold));
                    dr[j] = ur[j] * (s + xr[j] * alpha * s * (1.0 - s));
                }
            }
        }
        ActivationSpec::HardAsh { alpha, z_k, x_max } => {
            for i in 0..x.rows() {
                let (mu, sigma) = cache.stats[i];
                let threshold = mu + z_k * sigma;
                let (xr, ur, dr) = (x.row(i), upstream.row(i), dx.row_mut(i));
                for j in 0..xr.len() {
                    let u = alpha * (xr[j] - threshold);
                    let clip_grad = if xr[j] > 0.0 && xr[j] < x_max {
                        hard_sigmoid(u)
                    } else {
                        0.0
                    };
                    let gate_grad = if u > -3.0 && u < 3.0 {
                        xr[j].clamp(0.0, x_max) * alpha / 6.0
                    } else {
                        0.0
                    };
                    dr[j] = ur[j] * (clip_grad + gate_grad);
                }
            }
        }
        ActivationSpec::TopKSubtract { k } | ActivationSpec::TopKMask { k } => {
            for i in 0..x.rows() {
                let winners = &cache.winners[i * k..(i + 1) * k];
                let (ur, dr) = (upstream.row(i), dx.row_mut(i));
                for &w in winners {
                    dr[w as usize] = ur[w as usize];
                }
            }
        }
        ActivationSpec::Lwta { groups } => {
            for i in 0..x.rows() {
                let winners = &cache.winners[i * groups..(i + 1) * groups];
                let (ur, dr) = (upstream.row(i), dx.row_mut(i));
                for &w in winners {
                    dr[w as usize] = ur[w as usize];
                }
            }
        }
        ActivationSpec::Relu => {
            for ((&xv, &uv), dv) in x.data().iter().zip(upstream.data()).zip(dx.data_mut()) {
                *dv = if xv > 0.0 { uv } else { 0.0 };
            }
        }
        ActivationSpec::Swish => {
            for ((&xv, &uv), dv) in x.data().iter().zip(upstream.data()).zip(dx.data_mut()) {
                let s = sigmoid(xv);
                *dv = uv * (s + xv * s * (1.0 - s));
            }
        }
        ActivationSpec::Sigmoid => {
            for ((&xv, &uv), dv) in x.data().iter().zip(upstream.data()).zip(dx.data_mut()) {
                let s = sigmoid(xv);
                *dv = uv * s * (1.0 - s);
            }
        }
        ActivationSpec::HardSigmoid => {
            for ((&xv, &uv), dv) in x.data().iter().zip(upstream.data()).zip(dx.data_mut()) {
                *dv = if xv > -3.0 && xv < 3.0 { uv / 6.0 } else { 0.0 };
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn row(values: &[f32]) -> Matrix2D {
        Matrix2D::from_vec(1, values.len(), values.to_vec())
    }

    fn assert_row_close(m: &Matrix2D, expected: &[f32], tol: f32) {
        assert_eq!(m.cols(), expected.len());
        for (a, b) in m.row(0).iter().zip(expected) {
            assert!((a - b).abs() <= tol, "{:?} !~ {:?}", m.row(0), expected);
        }
    }

    /// Scalar double-precision oracle for the ASH forward formula.
    fn ash_oracle(values: &[f64], alpha: f64, z_k: f64) -> Vec<f64> {
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let sigma = (values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
        values
            .iter()
            .map(|&v| v / (1.0 + (-(alpha * (v - mu - z_k * sigma))).exp()))
            .collect()
    }

    #[test]
    fn ash_constant_row_halves() {
        let (out, _) = ash_forward(&row(&[2.0, 2.0, 2.0]), 3.0, 0.0);
        assert_row_close(&out, &[1.0, 1.0, 1.0], 1e-6);
    }

    #[test]
    fn ash_matches_double_precision_oracle() {
        let (out, _) = ash_forward(&row(&[0.0, 1.0, 2.0, 3.0]), 1.0, 1.0);
        let oracle = ash_oracle(&[0.0, 1.0, 2.0, 3.0], 1.0, 1.0);
        let expected: Vec<f32> = oracle.iter().map(|&v| v as f32).collect();
        assert_row_close(&out, &expected, 1e-6);
        // Frozen from the oracle: mu = 1.5, sigma = 1.118034, threshold 2.618034.
        assert_row_close(&out, &[0.0, 0.165476, 0.700457, 1.783042], 1e-5);
    }

    #[test]
    fn ash_density_tracks_z_k_on_gaussian_input() {
        // The gate passes a unit when x > mu + z_k * sigma; on standard
        // normal input the off fraction is ~Phi(z_k): 97.7% at z_k = 2,
        // 99.4% at z_k = 2.5.
        let mut rng = RngStream::new(11).derive("ash-density");
        let n = 10_000;
        let x = Matrix2D::from_vec(1, n, (0..n).map(|_| rng.gaussian() as f32).collect());
        for z_k in [2.0f32, 2.5] {
            let (mu, sigma) = row_mean_std(x.row(0));
            let threshold = mu + z_k * sigma;
            let off = x.row(0).iter().filter(|&&v| v <= threshold).count();
            let frac = off as f64 / n as f64;
            assert!(
                (0.97..=0.999).contains(&frac),
                "z_k {z_k}: off fraction {frac}"
            );
        }
    }

    #[test]
    fn hard_sigmoid_endpoints() {
        assert_eq!(hard_sigmoid(0.0), 0.5);
        assert_eq!(hard_sigmoid(-3.0), 0.0);
        assert_eq!(hard_sigmoid(3.0), 1.0);
        assert_eq!(hard_sigmoid(1.5), 0.75);
        assert_eq!(hard_sigmoid(-10.0), 0.0);
        assert_eq!(hard_sigmoid(10.0), 1.0);
    }

    #[test]
    fn hard_ash_matches_scalar_oracle() {
        // mu = 1.5, sigma = sqrt(1.25), threshold = 2.618034.
        let (out, _) = hard_ash_forward(&row(&[0.0, 1.0, 2.0, 3.0]), 4.0, 1.0, 2.0);
        assert_row_close(&out, &[0.0, 0.0, 0.175955, 1.509288], 1e-5);
    }

    #[test]
    fn hard_ash_constant_positive_row_halves() {
        let (out, _) = hard_ash_forward(&row(&[1.25, 1.25, 1.25]), 4.0, 2.0, 2.0);
        assert_row_close(&out, &[0.625, 0.625, 0.625], 1e-6);
    }

    #[test]
    fn hard_ash_saturates_to_x_max_exactly() {
        // One large unit: both the clip and the gate saturate.
        let (out, _) = hard_ash_forward(&row(&[50.0, 0.0, 0.0, 0.0]), 4.0, 1.0, 2.0);
        assert_eq!(out.get(0, 0), 2.0);
    }

    #[test]
    fn hard_ash_output_bounded_by_x_max() {
        let mut rng = RngStream::new(5).derive("bound");
        for _ in 0..50 {
            let x = Matrix2D::from_vec(
                2,
                16,
                (0..32).map(|_| rng.uniform(-8.0, 8.0) as f32).collect(),
            );
            let (out, _) = hard_ash_forward(&x, 4.0, 1.5, 2.0);
            for &v in out.data() {
                assert!((0.0..=2.0).contains(&v));
            }
        }
    }

    #[test]
    fn hard_ash_zero_set_matches_definition() {
        let mut rng = RngStream::new(6).derive("zeroset");
        let x = Matrix2D::from_vec(
            1,
            256,
            (0..256).map(|_| rng.gaussian() as f32).collect(),
        );
        let (alpha, z_k) = (4.0f32, 1.5f32);
        let (out, cache) = hard_ash_forward(&x, alpha, z_k, 2.0);
        let (mu, sigma) = cache.row_stats()[0];
        let threshold = mu + z_k * sigma;
        for j in 0..256 {
            let xv = x.get(0, j);
            let expect_zero = xv <= 0.0 || alpha * (xv - threshold) <= -3.0;
            assert_eq!(out.get(0, j) == 0.0, expect_zero, "x = {xv}");
        }
    }

    #[test]
    fn hard_ash_sparsity_monotone_in_z_k() {
        let mut rng = RngStream::new(7).derive("monotone");
        let x = Matrix2D::from_vec(
            4,
            64,
            (0..256).map(|_| rng.gaussian() as f32).collect(),
        );
        let mut last_active = usize::MAX;
        for z_k in [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0] {
            let (out, _) = hard_ash_forward(&x, 4.0, z_k, 2.0);
            let active = out.data().iter().filter(|v| v.abs() > 1e-6).count();
            assert!(active <= last_active, "z_k {z_k}: {active} > {last_active}");
            last_active = active;
        }
    }

    #[test]
    fn topk_subtract_example() {
        let (out, _) = topk_subtract(&row(&[5.0, 1.0, 3.0, 2.0]), 2);
        assert_row_close(&out, &[2.0, 0.0, 0.0, 0.0], 0.0);
    }

    #[test]
    fn topk_subtract_full_width_subtracts_min() {
        let (out, _) = topk_subtract(&row(&[5.0, 1.0, 3.0, 2.0]), 4);
        assert_row_close(&out, &[4.0, 0.0, 2.0, 1.0], 0.0);
    }

    #[test]
    fn topk_mask_example() {
        let (out, _) = topk_mask(&row(&[5.0, 1.0, 3.0, 2.0]), 2);
        assert_row_close(&out, &[5.0, 0.0, 3.0, 0.0], 0.0);

        let x = row(&[5.0, 1.0, 3.0, 2.0]);
        let (out, _) = topk_mask(&x, 4);
        assert_eq!(out, x);
    }

    #[test]
    fn topk_ties_break_toward_lower_index() {
        let (out, _) = topk_mask(&row(&[2.0, 3.0, 3.0, 1.0]), 2);
        assert_row_close(&out, &[0.0, 3.0, 3.0, 0.0], 0.0);
        let (out, _) = topk_mask(&row(&[2.0, 3.0, 3.0, 1.0]), 1);
        assert_row_close(&out, &[0.0, 3.0, 0.0, 0.0], 0.0);
        // Subtract variant: both tied winners land on zero.
        let (out, _) = topk_subtract(&row(&[2.0, 3.0, 3.0, 1.0]), 2);
        assert_row_close(&out, &[0.0, 0.0, 0.0, 0.0], 0.0);
    }

    #[test]
    fn topk_nonzero_counts() {
        let mut rng = RngStream::new(9).derive("counts");
        for _ in 0..20 {
            let x = Matrix2D::from_vec(
                1,
                50,
                (0..50).map(|_| rng.gaussian() as f32 + 5.0).collect(),
            );
            let (mask_out, _) = topk_mask(&x, 7);
            assert_eq!(mask_out.data().iter().filter(|v| **v != 0.0).count(), 7);
            let (sub_out, _) = topk_subtract(&x, 7);
            assert!(sub_out.data().iter().filter(|v| **v != 0.0).count() <= 7);
        }
    }

    #[test]
    fn topk_sparsity_at_paper_widths() {
        let mut rng = RngStream::new(10).derive("width1000");
        let x = Matrix2D::from_vec(
            8,
            1000,
            (0..8000).map(|_| rng.gaussian() as f32).collect(),
        );
        for (k, lo, hi) in [(64usize, 0.90, 0.94), (96, 0.88, 0.92)] {
            let (out, _) = topk_subtract(&x, k);
            let zeros = out.data().iter().filter(|v| **v == 0.0).count();
            let frac = zeros as f64 / out.data().len() as f64;
            assert!(frac >= lo && frac <= hi + 0.02, "k {k}: zero fraction {frac}");
        }
    }

    #[test]
    fn lwta_example() {
        let (out, _) = lwta(&row(&[3.0, 1.0, 0.0, 5.0]), 2);
        assert_row_close(&out, &[3.0, 0.0, 0.0, 5.0], 0.0);
    }

    #[test]
    fn lwta_one_unit_groups_are_identity() {
        let x = row(&[3.0, -1.0, 0.0, 5.0]);
        let (out, _) = lwta(&x, 4);
        assert_eq!(out, x);
    }

    #[test]
    fn lwta_winner_count_per_row() {
        let mut rng = RngStream::new(12).derive("lwta1000");
        let x = Matrix2D::from_vec(
            4,
            1000,
            (0..4000).map(|_| rng.gaussian() as f32).collect(),
        );
        for (groups, sparsity) in [(25usize, 0.975), (50, 0.95)] {
            let (out, cache) = lwta(&x, groups);
            assert_eq!(cache.winners().len(), 4 * groups);
            let zeros = out.data().iter().filter(|v| **v == 0.0).count();
            let frac = zeros as f64 / out.data().len() as f64;
            assert!((frac - sparsity).abs() < 0.01, "groups {groups}: {frac}");
        }
    }

    #[test]
    #[should_panic(expected = "must divide")]
    fn lwta_rejects_non_divisor_groups() {
        lwta(&row(&[1.0, 2.0, 3.0]), 2);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn topk_rejects_k_above_width() {
        topk_mask(&row(&[1.0, 2.0]), 3);
    }

    #[test]
    fn pointwise_examples() {
        let (out, _) = pointwise_forward(&ActivationSpec::Relu, &row(&[-1.0, 0.0, 2.0]));
        assert_row_close(&out, &[0.0, 0.0, 2.0], 0.0);

        let (out, _) = pointwise_forward(&ActivationSpec::Swish, &row(&[0.0, 1.0]));
        assert!((out.get(0, 0)).abs() < 1e-7);
        assert!((out.get(0, 1) - 0.731059).abs() < 1e-5);

        let (out, _) = pointwise_forward(&ActivationSpec::Sigmoid, &row(&[0.0]));
        assert_eq!(out.get(0, 0), 0.5);
    }

    #[test]
    fn relu_backward_example() {
        let x = row(&[-1.0, 2.0]);
        let (_, cache) = pointwise_forward(&ActivationSpec::Relu, &x);
        let dx = activation_backward(&ActivationSpec::Relu, &cache, &row(&[1.0, 1.0]));
        assert_row_close(&dx, &[0.0, 1.0], 0.0);
    }

    #[test]
    #[should_panic(expected = "different spec")]
    fn backward_rejects_mismatched_cache() {
        let x = row(&[1.0, 2.0]);
        let (_, cache) = pointwise_forward(&ActivationSpec::Relu, &x);
        activation_backward(&ActivationSpec::Swish, &cache, &row(&[1.0, 1.0]));
    }

    /// Central finite differences of the detached surrogate: row statistics,
    /// thresholds and winner sets are frozen at their cached values, which is
    /// exactly the function the backward pass claims to differentiate. For
    /// the pointwise kinds the surrogate equals the true function.
    fn fd_surrogate_grad(
        spec: &ActivationSpec,
        cache: &ActivationCache,
        x: &[f64],
        row_idx: usize,
        j: usize,
        h: f64,
    ) -> f64 {
        let eval = |xj: f64| -> f64 {
            match *spec {
                ActivationSpec::Ash { alpha, z_k } => {
                    let (mu, sigma) = cache.stats[row_idx];
                    let c = mu as f64 + z_k as f64 * sigma as f64;
                    xj / (1.0 + (-(alpha as f64 * (xj - c))).exp())
                }
                ActivationSpec::HardAsh { alpha, z_k, x_max } => {
                    let (mu, sigma) = cache.stats[row_idx];
                    let c = mu as f64 + z_k as f64 * sigma as f64;
                    let u = alpha as f64 * (xj - c);
                    let hs = ((u + 3.0).clamp(0.0, 6.0)) / 6.0;
                    xj.clamp(0.0, x_max as f64) * hs
                }
                ActivationSpec::TopKSubtract { k } => {
                    let winners = &cache.winners[row_idx * k..(row_idx + 1) * k];
                    if winners.contains(&(j as u32)) {
                        xj - cache.thresholds[row_idx] as f64
                    } else {
                        0.0
                    }
                }
                ActivationSpec::TopKMask { k } => {
                    let winners = &cache.winners[row_idx * k..(row_idx + 1) * k];
                    if winners.contains(&(j as u32)) {
                        xj
                    } else {
                        0.0
                    }
                }
                ActivationSpec::Lwta { groups } => {
                    let winners = &cache.winners[row_idx * groups..(row_idx + 1) * groups];
                    if winners.contains(&(j as u32)) {
                        xj
                    } else {
                        0.0
                    }
                }
                ActivationSpec::Relu => xj.max(0.0),
                ActivationSpec::Swish => xj / (1.0 + (-xj).exp()),
                ActivationSpec::Sigmoid => 1.0 / (1.0 + (-xj).exp()),
                ActivationSpec::HardSigmoid => ((xj + 3.0).clamp(0.0, 6.0)) / 6.0,
            }
        };
        let _ = x;
        (eval(x[j] + h) - eval(x[j] - h)) / (2.0 * h)
    }

    fn kink_distance(spec: &ActivationSpec, cache: &ActivationCache, row_idx: usize, j: usize) -> f64 {
        let xj = cache.pre.get(row_idx, j) as f64;
        match *spec {
            ActivationSpec::Ash { .. } | ActivationSpec::Sigmoid | ActivationSpec::Swish => {
                f64::INFINITY
            }
            ActivationSpec::HardAsh { alpha, z_k, x_max } => {
                let (mu, sigma) = cache.stats[row_idx];
                let c = mu as f64 + z_k as f64 * sigma as f64;
                let u = alpha as f64 * (xj - c);
                let d_gate = (u.abs() - 3.0).abs() / alpha as f64;
                xj.abs().min((xj - x_max as f64).abs()).min(d_gate)
            }
            ActivationSpec::Relu => xj.abs(),
            ActivationSpec::HardSigmoid => (xj.abs() - 3.0).abs(),
            // Winner sets are frozen in the surrogate, so there is no kink.
            _ => f64::INFINITY,
        }
    }

    #[test]
    fn all_kinds_pass_gradient_check_at_non_kink_points() {
        let specs = [
            ActivationSpec::Ash { alpha: 3.0, z_k: 1.0 },
            ActivationSpec::HardAsh { alpha: 4.0, z_k: 1.0, x_max: 2.0 },
            ActivationSpec::TopKSubtract { k: 3 },
            ActivationSpec::TopKMask { k: 3 },
            ActivationSpec::Lwta { groups: 4 },
            ActivationSpec::Relu,
            ActivationSpec::Swish,
            ActivationSpec::Sigmoid,
            ActivationSpec::HardSigmoid,
        ];
        let mut rng = RngStream::new(21).derive("gradcheck");
        for spec in &specs {
            let mut checked = 0;
            while checked < 20 {
                let x = Matrix2D::from_vec(
                    1,
                    8,
                    (0..8).map(|_| rng.uniform(-3.0, 3.0) as f32).collect(),
                );
                let (_, cache) = activation_forward(spec, &x);
                let upstream = Matrix2D::from_vec(1, 8, vec![1.0; 8]);
                let dx = activation_backward(spec, &cache, &upstream);
                let xs: Vec<f64> = x.row(0).iter().map(|&v| v as f64).collect();
                for j in 0..8 {
                    if kink_distance(spec, &cache, 0, j) < 1e-3 {
                        continue;
                    }
                    let fd = fd_surrogate_grad(spec, &cache, &xs, 0, j, 1e-4);
                    let analytic = dx.get(0, j) as f64;
                    let denom = fd.abs().max(analytic.abs()).max(1e-4);
                    assert!(
                        (fd - analytic).abs() / denom < 1e-4,
                        "{}: x {} analytic {analytic} fd {fd}",
                        spec.kind_name(),
                        xs[j]
                    );
                    checked += 1;
                }
            }
        }
    }

    #[test]
    fn hard_ash_gradients_mostly_zero_at_high_alpha() {
        let mut rng = RngStream::new(31).derive("gradsparse");
        let x = Matrix2D::from_vec(
            16,
            1000,
            (0..16_000).map(|_| rng.gaussian() as f32).collect(),
        );
        let spec = ActivationSpec::HardAsh { alpha: 8.0, z_k: 2.3, x_max: 2.0 };
        let (_, cache) = activation_forward(&spec, &x);
        let upstream = Matrix2D::from_vec(16, 1000, vec![1.0; 16_000]);
        let dx = activation_backward(&spec, &cache, &upstream);
        let zeros = dx.data().iter().filter(|v| **v == 0.0).count();
        let frac = zeros as f64 / dx.data().len() as f64;
        assert!(frac >= 0.90, "zero-gradient fraction {frac}");
    }

    #[test]
    fn ash_family_is_permutation_equivariant() {
        let mut rng = RngStream::new(41).derive("perm-equiv");
        let x: Vec<f32> = (0..12).map(|_| rng.uniform(-2.0, 2.0) as f32).collect();
        let mut perm_rng = RngStream::new(42).derive("perm");
        let perm = perm_rng.permutation(12);
        let permuted: Vec<f32> = perm.iter().map(|&p| x[p as usize]).collect();
        for spec in [
            ActivationSpec::Ash { alpha: 3.0, z_k: 1.0 },
            ActivationSpec::HardAsh { alpha: 4.0, z_k: 1.0, x_max: 2.0 },
        ] {
            let (out, _) = activation_forward(&spec, &row(&x));
            let (out_p, _) = activation_forward(&spec, &row(&permuted));
            for (i, &p) in perm.iter().enumerate() {
                assert_eq!(out_p.get(0, i), out.get(0, p as usize));
            }
        }
    }

    #[test]
    fn batch_equals_row_by_row() {
        let mut rng = RngStream::new(51).derive("rows");
        let batch = Matrix2D::from_vec(
            5,
            12,
            (0..60).map(|_| rng.uniform(-2.0, 2.0) as f32).collect(),
        );
        for spec in [
            ActivationSpec::Ash { alpha: 3.0, z_k: 1.0 },
            ActivationSpec::HardAsh { alpha: 4.0, z_k: 1.5, x_max: 2.0 },
            ActivationSpec::TopKSubtract { k: 4 },
            ActivationSpec::Lwta { groups: 3 },
            ActivationSpec::Swish,
        ] {
            let (full, _) = activation_forward(&spec, &batch);
            for i in 0..batch.rows() {
                let (single, _) =
                    activation_forward(&spec, &Matrix2D::from_vec(1, 12, batch.row(i).to_vec()));
                assert_eq!(single.row(0), full.row(i), "{}", spec.kind_name());
            }
        }
    }

    #[test]
    fn validate_rejects_bad_parameters() {
        assert!(ActivationSpec::Ash { alpha: 0.0, z_k: 1.0 }.validate(10).is_err());
        assert!(ActivationSpec::HardAsh { alpha: 4.0, z_k: 1.0, x_max: 0.0 }
            .validate(10)
            .is_err());
        assert!(ActivationSpec::TopKSubtract { k: 0 }.validate(10).is_err());
        assert!(ActivationSpec::TopKSubtract { k: 11 }.validate(10).is_err());
        assert!(ActivationSpec::Lwta { groups: 3 }.validate(10).is_err());
        assert!(ActivationSpec::Lwta { groups: 5 }.validate(10).is_ok());
    }
}
