//! The five optimizers of the study with their unusual continual-learning
//! tunings: elementwise gradient clipping, an Adagrad accumulator pre-filled
//! with a tiny constant instead of an epsilon, a bias-correction toggle for
//! Adam, and a staircase exponential learning-rate schedule.
//!
//! Updates are pure elementwise maps over `(param, grad, state)` triples;
//! callers clip gradients first and then apply one step.

use serde::{Deserialize, Serialize};

/// Which update rule to run, with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerAlgo {
    Sgd {
        learning_rate: f32,
    },
    Sgdm {
        learning_rate: f32,
        momentum: f32,
    },
    Adagrad {
        learning_rate: f32,
        /// Initial accumulator fill; doubles as the epsilon.
        #[serde(default = "default_adagrad_initial")]
        initial_accumulator: f32,
    },
    Rmsprop {
        learning_rate: f32,
        decay: f32,
        #[serde(default = "default_epsilon")]
        epsilon: f32,
    },
    Adam {
        learning_rate: f32,
        #[serde(default = "default_beta1")]
        beta1: f32,
        #[serde(default = "default_beta2")]
        beta2: f32,
        #[serde(default = "default_bias_correction")]
        bias_correction: bool,
        #[serde(default = "default_epsilon")]
        epsilon: f32,
    },
}

fn default_adagrad_initial() -> f32 {
    1e-6
}
fn default_epsilon() -> f32 {
    1e-8
}
fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_bias_correction() -> bool {
    true
}
fn default_clip_value() -> f32 {
    0.01
}

/// Learning-rate schedule. `Exponential` is a staircase: the rate drops by
/// `decay_factor` once per `interval_steps` completed steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    None,
    Exponential {
        base_lr: f32,
        decay_factor: f32,
        interval_steps: u64,
    },
}

/// Full optimizer configuration: the algorithm, the elementwise gradient
/// clip bound, and an optional schedule (which overrides the constant rate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub algo: OptimizerAlgo,
    #[serde(default = "default_clip_value")]
    pub clip_value: f32,
    #[serde(default)]
    pub schedule: LrSchedule,
}

#[derive(Debug, thiserror::Error)]
#[error("invalid optimizer: {0}")]
pub struct InvalidOptimizer(pub String);

impl OptimizerSpec {
    pub fn new(algo: OptimizerAlgo) -> Self {
        OptimizerSpec {
            algo,
            clip_value: default_clip_value(),
            schedule: LrSchedule::None,
        }
    }

    pub fn validate(&self) -> Result<(), InvalidOptimizer> {
        let err = |msg: String| Err(InvalidOptimizer(msg));
        if self.clip_value <= 0.0 {
            return err(format!("clip_value {} must be > 0", self.clip_value));
        }
        let lr = self.base_learning_rate();
        if lr <= 0.0 || !lr.is_finite() {
            return err(format!("learning_rate {lr} must be > 0"));
        }
        match self.algo {
            OptimizerAlgo::Sgdm { momentum, .. } => {
                if !(0.0..1.0).contains(&momentum) {
                    return err(format!("momentum {momentum} must be in [0, 1)"));
                }
            }
            OptimizerAlgo::Adagrad {
                initial_accumulator,
                ..
            } => {
                if initial_accumulator <= 0.0 {
                    return err(format!(
                        "adagrad initial_accumulator {initial_accumulator} must be > 0"
                    ));
                }
            }
            OptimizerAlgo::Rmsprop { decay, .. } => {
                if !(0.0..1.0).contains(&decay) {
                    return err(format!("rmsprop decay {decay} must be in [0, 1)"));
                }
            }
            OptimizerAlgo::Adam { beta1, beta2, .. } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return err(format!("adam betas ({beta1}, {beta2}) must be in [0, 1)"));
                }
            }
            OptimizerAlgo::Sgd { .. } => {}
        }
        if let LrSchedule::Exponential {
            base_lr,
            decay_factor,
            interval_steps,
        } = self.schedule
        {
            if base_lr <= 0.0 || decay_factor <= 0.0 || interval_steps < 1 {
                return err(format!(
                    "exponential schedule (base {base_lr}, decay {decay_factor}, interval {interval_steps}) is degenerate"
                ));
            }
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self.algo {
            OptimizerAlgo::Sgd { .. } => "sgd",
            OptimizerAlgo::Sgdm { .. } => "sgdm",
            OptimizerAlgo::Adagrad { .. } => "adagrad",
            OptimizerAlgo::Rmsprop { .. } => "rmsprop",
            OptimizerAlgo::Adam { .. } => "adam",
        }
    }

    pub fn describe(&self) -> String {
        let algo = match self.algo {
            OptimizerAlgo::Sgd { learning_rate } => format!("sgd(lr={learning_rate})"),
            OptimizerAlgo::Sgdm {
                learning_rate,
                momentum,
            } => format!("sgdm(lr={learning_rate},momentum={momentum})"),
            OptimizerAlgo::Adagrad {
                learning_rate,
                initial_accumulator,
            } => format!("adagrad(lr={learning_rate},initial={initial_accumulator})"),
            OptimizerAlgo::Rmsprop {
                learning_rate,
                decay,
                ..
            } => format!("rmsprop(lr={learning_rate},decay={decay})"),
            OptimizerAlgo::Adam {
                learning_rate,
                beta1,
                beta2,
                bias_correction,
                ..
            } => format!(
                "adam(lr={learning_rate},beta1={beta1},beta2={beta2},bias_correction={bias_correction})"
            ),
        };
        match self.schedule {
            LrSchedule::None => algo,
            LrSchedule::Exponential {
                base_lr,
                decay_factor,
                interval_steps,
            } => format!("{algo}+exp(base={base_lr},decay={decay_factor},every={interval_steps})"),
        }
    }

    fn base_learning_rate(&self) -> f32 {
        match self.algo {
            OptimizerAlgo::Sgd { learning_rate }
            | OptimizerAlgo::Sgdm { learning_rate, .. }
            | OptimizerAlgo::Adagrad { learning_rate, .. }
            | OptimizerAlgo::Rmsprop { learning_rate, .. }
            | OptimizerAlgo::Adam { learning_rate, .. } => learning_rate,
        }
    }

    /// The learning rate in effect for the step that is about to run
    /// (`step` counts completed steps, so the first step sees the base rate).
    pub fn effective_lr(&self, step: u64) -> f32 {
        match self.schedule {
            LrSchedule::None => self.base_learning_rate(),
            LrSchedule::Exponential {
                base_lr,
                decay_factor,
                interval_steps,
            } => exp_decay_lr(step, base_lr, decay_factor, interval_steps),
        }
    }
}

/// Staircase exponential decay:
/// `base_lr * decay_factor ^ floor(step / interval_steps)`.
pub fn exp_decay_lr(step: u64, base_lr: f32, decay_factor: f32, interval_steps: u64) -> f32 {
    assert!(interval_steps >= 1, "exp_decay_lr: interval must be >= 1");
    base_lr * decay_factor.powi((step / interval_steps) as i32)
}

/// Clamps every gradient element to `[-clip_value, clip_value]`.
pub fn clip_gradients(grads: &mut [&mut [f32]], clip_value: f32) {
    assert!(clip_value > 0.0, "clip_gradients: bound must be > 0");
    for tensor in grads {
        for g in tensor.iter_mut() {
            *g = g.clamp(-clip_value, clip_value);
        }
    }
}

/// Per-parameter accumulator and moment buffers plus the step counter.
///
/// Buffer shapes mirror the parameter tensors exactly; which buffers exist
/// depends on the algorithm (Adagrad's accumulator starts at its fill value,
/// everything else starts at zero).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    step: u64,
    /// Momentum buffer (SGDM) or first-moment EMA (Adam).
    m: Vec<Vec<f32>>,
    /// Squared-gradient accumulator (Adagrad) or EMA (RMSprop, Adam).
    v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(spec: &OptimizerSpec, tensor_lens: &[usize]) -> Self {
        let zeros = || tensor_lens.iter().map(|&n| vec![0.0; n]).collect();
        let (m, v): (Vec<Vec<f32>>, Vec<Vec<f32>>) = match spec.algo {
            OptimizerAlgo::Sgd { .. } => (Vec::new(), Vec::new()),
            OptimizerAlgo::Sgdm { .. } => (zeros(), Vec::new()),
            OptimizerAlgo::Adagrad {
                initial_accumulator,
                ..
            } => (
                Vec::new(),
                tensor_lens
                    .iter()
                    .map(|&n| vec![initial_accumulator; n])
                    .collect(),
            ),
            OptimizerAlgo::Rmsprop { .. } => (Vec::new(), zeros()),
            OptimizerAlgo::Adam { .. } => (zeros(), zeros()),
        };
        OptimizerState { step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Squared-gradient buffers (for inspection in tests).
    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }
}

/// Applies one optimizer step in place. Gradients must already be clipped.
pub fn apply_step(
    spec: &OptimizerSpec,
    state: &mut OptimizerState,
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
) {
    assert_eq!(
        params.len(),
        grads.len(),
        "apply_step: {} param tensors vs {} grad tensors",
        params.len(),
        grads.len()
    );
    for (p, g) in params.iter().zip(grads) {
        assert_eq!(p.len(), g.len(), "apply_step: tensor shape mismatch");
    }
    let lr = spec.effective_lr(state.step);
    match spec.algo {
        OptimizerAlgo::Sgd { .. } => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (pv, &gv) in p.iter_mut().zip(*g) {
                    *pv -= lr * gv;
                }
            }
        }
        OptimizerAlgo::Sgdm { momentum, .. } => {
            for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut state.m) {
                assert_eq!(p.len(), m.len(), "apply_step: state shape mismatch");
                for ((pv, &gv), mv) in p.iter_mut().zip(*g).zip(m.iter_mut()) {
                    *mv = momentum * *mv + gv;
                    *pv -= lr * *mv;
                }
            }
        }
        OptimizerAlgo::Adagrad { .. } => {
            for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut state.v) {
                assert_eq!(p.len(), acc.len(), "apply_step: state shape mismatch");
                for ((pv, &gv), av) in p.iter_mut().zip(*g).zip(acc.iter_mut()) {
                    *av += gv * gv;
                    *pv -= lr * gv / av.sqrt();
                }
            }
        }
        OptimizerAlgo::Rmsprop { decay, epsilon, .. } => {
            for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.v) {
                assert_eq!(p.len(), v.len(), "apply_step: state shape mismatch");
                for ((pv, &gv), vv) in p.iter_mut().zip(*g).zip(v.iter_mut()) {
                    *vv = decay * *vv + (1.0 - decay) * gv * gv;
                    *pv -= lr * gv / (vv.sqrt() + epsilon);
                }
            }
        }
        OptimizerAlgo::Adam {
            beta1,
            beta2,
            bias_correction,
            epsilon,
            ..
        } => {
            let t = state.step + 1;
            let (bc1, bc2) = if bias_correction {
                (
                    1.0 - (beta1 as f64).powi(t as i32) as f32,
                    1.0 - (beta2 as f64).powi(t as i32) as f32,
                )
            } else {
                (1.0, 1.0)
            };
            for (((p, g), m), v) in params
                .iter_mut()
                .zip(grads)
                .zip(&mut state.m)
                .zip(&mut state.v)
            {
                assert_eq!(p.len(), m.len(), "apply_step: state shape mismatch");
                for (((pv, &gv), mv), vv) in
                    p.iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut())
                {
                    *mv = beta1 * *mv + (1.0 - beta1) * gv;
                    *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                    let m_hat = *mv / bc1;
                    let v_hat = *vv / bc2;
                    *pv -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
    }
    state.step += 1;
}
