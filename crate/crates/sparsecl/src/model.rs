//! The network under study: a single-hidden-layer MLP with Kaiming
//! initialization, weight normalization (fixed gain 1, first layer by
//! default), a pluggable hidden activation, and softmax cross-entropy over
//! all classes. Forward and backward are written out by hand.
//!
//! With weight normalization enabled the stored first-layer matrix holds the
//! direction vectors `v`; the effective weights are `v / ||v||` per hidden
//! unit (one column per unit), and the backward pass projects the effective
//! gradient back onto `v` with the `(I - w w^T) / ||v||` correction.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::activations::{activation_backward, activation_forward, ActivationCache, ActivationSpec};
use crate::matrix::{matmul, matmul_a_bt, matmul_at_b, Matrix2D};
use crate::rng::RngStream;

/// Layer sizes. The paper configuration is 784-1000-10.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl MlpDims {
    pub const PAPER: MlpDims = MlpDims {
        input: 784,
        hidden: 1000,
        output: 10,
    };
}

/// The full learnable state.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    /// input x hidden; holds the direction vectors `v` when
    /// `weightnorm_layer1` is set.
    pub w1: Matrix2D,
    pub b1: Vec<f32>,
    /// hidden x output.
    pub w2: Matrix2D,
    pub b2: Vec<f32>,
    pub weightnorm_layer1: bool,
    pub weightnorm_layer2: bool,
}

impl MlpParams {
    /// Kaiming-initialized parameters; weight norm on the first layer only.
    pub fn init(dims: MlpDims, root: &RngStream) -> Self {
        let mut w1_rng = root.derive("init/w1");
        let mut w2_rng = root.derive("init/w2");
        MlpParams {
            w1: kaiming_init(dims.input, dims.hidden, &mut w1_rng),
            b1: vec![0.0; dims.hidden],
            w2: kaiming_init(dims.hidden, dims.output, &mut w2_rng),
            b2: vec![0.0; dims.output],
            weightnorm_layer1: true,
            weightnorm_layer2: false,
        }
    }

    pub fn dims(&self) -> MlpDims {
        MlpDims {
            input: self.w1.rows(),
            hidden: self.w1.cols(),
            output: self.w2.cols(),
        }
    }

    /// The four parameter tensors in checkpoint order (w1, b1, w2, b2).
    pub fn tensor_lens(&self) -> [usize; 4] {
        [
            self.w1.data().len(),
            self.b1.len(),
            self.w2.data().len(),
            self.b2.len(),
        ]
    }

    pub fn tensors(&self) -> [&[f32]; 4] {
        [self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f32]; 4] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
        ]
    }

    /// Writes the flat binary checkpoint: magic `SCL1`, then input, hidden,
    /// and output dims as little-endian u32, then w1, b1, w2, b2 as
    /// little-endian f32 arrays.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        let dims = self.dims();
        for d in [dims.input, dims.hidden, dims.output] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for tensor in self.tensors() {
            for v in tensor {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let mut dim = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            r.read_exact(&mut dim)?;
            *d = u32::from_le_bytes(dim) as usize;
        }
        let [input, hidden, output] = dims;
        let read_tensor = |r: &mut BufReader<File>, len: usize| -> Result<Vec<f32>, CheckpointError> {
            let mut bytes = vec![0u8; len * 4];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let params = MlpParams {
            w1: Matrix2D::from_vec(input, hidden, read_tensor(&mut r, input * hidden)?),
            b1: read_tensor(&mut r, hidden)?,
            w2: Matrix2D::from_vec(hidden, output, read_tensor(&mut r, hidden * output)?),
            b2: read_tensor(&mut r, output)?,
            weightnorm_layer1: true,
            weightnorm_layer2: false,
        };
        Ok(params)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SCL1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint magic {0:?} is not SCL1")]
    BadMagic([u8; 4]),
}

/// Gaussian Kaiming initialization: i.i.d. entries with mean 0 and standard
/// deviation `sqrt(2 / fan_in)`, shaped `fan_in x fan_out`.
pub fn kaiming_init(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Matrix2D {
    assert!(fan_in >= 1 && fan_out >= 1, "kaiming_init: degenerate dims");
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| (rng.gaussian() * std) as f32)
        .collect();
    Matrix2D::from_vec(fan_in, fan_out, data)
}

/// L2 norm of each column (one incoming weight vector per unit).
pub fn column_norms(v: &Matrix2D) -> Vec<f32> {
    let mut sq = vec![0.0f64; v.cols()];
    for i in 0..v.rows() {
        for (s, &x) in sq.iter_mut().zip(v.row(i)) {
            *s += x as f64 * x as f64;
        }
    }
    sq.into_iter().map(|s| s.sqrt() as f32).collect()
}

/// Scales every unit's incoming weight vector to unit L2 norm (fixed g = 1).
/// Panics if any column has zero norm.
pub fn weightnorm_apply(v: &Matrix2D) -> Matrix2D {
    weightnorm_apply_with_norms(v).0
}

fn weightnorm_apply_with_norms(v: &Matrix2D) -> (Matrix2D, Vec<f32>) {
    let norms = column_norms(v);
    for (j, &n) in norms.iter().enumerate() {
        assert!(
            n > 0.0,
            "weightnorm_apply: unit {j} has a zero-norm weight vector"
        );
    }
    let mut out = v.clone();
    for i in 0..v.rows() {
        for (x, &n) in out.row_mut(i).iter_mut().zip(&norms) {
            *x /= n;
        }
    }
    (out, norms)
}

/// Everything backward needs from a forward pass.
pub struct ForwardCache {
    input: Matrix2D,
    activation: ActivationCache,
    hidden: Matrix2D,
    l1_norms: Option<Vec<f32>>,
    w2_eff: Option<Matrix2D>,
    l2_norms: Option<Vec<f32>>,
}

impl ForwardCache {
    pub fn activation_cache(&self) -> &ActivationCache {
        &self.activation
    }
}

/// Gradients shaped exactly like [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub w1: Matrix2D,
    pub b1: Vec<f32>,
    pub w2: Matrix2D,
    pub b2: Vec<f32>,
}

impl MlpGradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        let d = params.dims();
        MlpGradients {
            w1: Matrix2D::zeros(d.input, d.hidden),
            b1: vec![0.0; d.hidden],
            w2: Matrix2D::zeros(d.hidden, d.output),
            b2: vec![0.0; d.output],
        }
    }

    pub fn tensors(&self) -> [&[f32]; 4] {
        [self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f32]; 4] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
        ]
    }
}

fn add_row_bias(m: &mut Matrix2D, bias: &[f32]) {
    for i in 0..m.rows() {
        for (v, &b) in m.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Forward pass over a batch (one example per row). Returns the logits and
/// the cache for [`mlp_backward`].
pub fn mlp_forward(
    params: &MlpParams,
    spec: &ActivationSpec,
    batch: &Matrix2D,
) -> (Matrix2D, ForwardCache) {
    assert_eq!(
        batch.cols(),
        params.w1.rows(),
        "mlp_forward: batch width {} does not match input dim {}",
        batch.cols(),
        params.w1.rows()
    );
    let (w1_eff, l1_norms) = if params.weightnorm_layer1 {
        let (w, n) = weightnorm_apply_with_norms(&params.w1);
        (w, Some(n))
    } else {
        (params.w1.clone(), None)
    };
    let (w2_eff, l2_norms) = if params.weightnorm_layer2 {
        let (w, n) = weightnorm_apply_with_norms(&params.w2);
        (Some(w), Some(n))
    } else {
        (None, None)
    };

    let mut z1 = matmul(batch, &w1_eff);
    add_row_bias(&mut z1, &params.b1);
    let (hidden, activation) = activation_forward(spec, &z1);
    let mut logits = matmul(&hidden, w2_eff.as_ref().unwrap_or(&params.w2));
    add_row_bias(&mut logits, &params.b2);

    let cache = ForwardCache {
        input: batch.clone(),
        activation,
        hidden,
        l1_norms,
        w2_eff,
        l2_norms,
    };
    (logits, cache)
}

/// Forward pass without building a backward cache.
pub fn mlp_forward_eval(params: &MlpParams, spec: &ActivationSpec, batch: &Matrix2D) -> Matrix2D {
    let (logits, _) = mlp_forward(params, spec, batch);
    logits
}

/// Numerically stable softmax cross-entropy, averaged over the batch.
///
/// Returns the mean loss and `d loss / d logits = (softmax - onehot) / B`.
/// Labels must lie in `0..logits.cols()`.
pub fn softmax_cross_entropy(logits: &Matrix2D, labels: &[u8]) -> (f32, Matrix2D) {
    assert_eq!(
        logits.rows(),
        labels.len(),
        "softmax_cross_entropy: {} logit rows vs {} labels",
        logits.rows(),
        labels.len()
    );
    let classes = logits.cols();
    let batch = logits.rows();
    let mut dlogits = logits.clone();
    let mut loss_sum = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        assert!(
            (label as usize) < classes,
            "softmax_cross_entropy: label {label} out of range for {classes} classes"
        );
        let row = dlogits.row_mut(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let p_label = row[label as usize] / sum;
        loss_sum += -(p_label.max(f32::MIN_POSITIVE) as f64).ln();
        let inv = 1.0 / (batch as f32);
        for v in row.iter_mut() {
            *v = *v / sum * inv;
        }
        row[label as usize] -= inv;
    }
    ((loss_sum / batch as f64) as f32, dlogits)
}

/// Per-column sums of a matrix (bias gradients).
fn column_sums(m: &Matrix2D) -> Vec<f32> {
    let mut out = vec![0.0f32; m.cols()];
    for i in 0..m.rows() {
        for (acc, &v) in out.iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    out
}

/// Projects the gradient w.r.t. the effective (unit-norm) weights back to
/// the stored direction vectors: `dV = (dW - (w.dW) w) / ||v||` per column,
/// with `w = v / ||v||`.
fn weightnorm_backward(d_eff: &Matrix2D, v: &Matrix2D, norms: &[f32]) -> Matrix2D {
    let cols = v.cols();
    let mut proj = vec![0.0f32; cols];
    for i in 0..v.rows() {
        let (dr, vr) = (d_eff.row(i), v.row(i));
        for j in 0..cols {
            proj[j] += dr[j] * vr[j] / norms[j];
        }
    }
    let mut dv = Matrix2D::zeros(v.rows(), cols);
    for i in 0..v.rows() {
        let (dr, vr, out) = (d_eff.row(i), v.row(i), dv.row_mut(i));
        for j in 0..cols {
            out[j] = (dr[j] - proj[j] * vr[j] / norms[j]) / norms[j];
        }
    }
    dv
}

/// Backward pass: exact gradients of the mean loss for all four tensors,
/// including the weight-normalization correction where enabled.
pub fn mlp_backward(
    params: &MlpParams,
    spec: &ActivationSpec,
    cache: &ForwardCache,
    dlogits: &Matrix2D,
) -> MlpGradients {
    assert_eq!(
        dlogits.rows(),
        cache.input.rows(),
        "mlp_backward: dlogits batch size mismatch"
    );
    let d_w2_eff = matmul_at_b(&cache.hidden, dlogits);
    let b2 = column_sums(dlogits);
    let w2_for_dh = cache.w2_eff.as_ref().unwrap_or(&params.w2);
    let dhidden = matmul_a_bt(dlogits, w2_for_dh);
    let dz1 = activation_backward(spec, &cache.activation, &dhidden);
    let d_w1_eff = matmul_at_b(&cache.input, &dz1);
    let b1 = column_sums(&dz1);

    let w1 = match &cache.l1_norms {
        Some(norms) => weightnorm_backward(&d_w1_eff, &params.w1, norms),
        None => d_w1_eff,
    };
    let w2 = match &cache.l2_norms {
        Some(norms) => weightnorm_backward(&d_w2_eff, &params.w2, norms),
        None => d_w2_eff,
    };
    MlpGradients { w1, b1, w2, b2 }
}
