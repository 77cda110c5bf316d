//! Dataset splits, the optimizer, the training loop and dB evaluation.

mod eval;
mod fit;

pub use eval::{evaluate, evaluate_with, EvalReport, EVAL_COLUMNS};
pub use fit::{train_model, LogRow, TrainOutputs, TrainReport, LOG_COLUMNS};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{round_f32, Ablation, ModelParams, Pooling};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub frequency_hz: u32,
    pub learning_rate0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub pooling: Pooling,
    /// Points per cloud after furthest-point reduction (0 keeps all).
    pub input_points: usize,
    /// Stop after this many epochs in this invocation (the run can be
    /// resumed later); `None` runs to `epochs`.
    pub stop_after: Option<usize>,
}

impl TrainConfig {
    pub fn new(frequency_hz: u32) -> Self {
        Self {
            frequency_hz,
            learning_rate0: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_rate: 0.9,
            epochs: 100,
            batch_size: 16,
            seed: 0,
            ablation: Ablation::default(),
            pooling: Pooling::Max,
            input_points: 512,
            stop_after: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::sphharm::check_band(self.frequency_hz)?;
        if !(self.learning_rate0 > 0.0) || !self.learning_rate0.is_finite() {
            return Err(Error::param("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("Adam betas must lie in [0, 1)"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::param("decay rate must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::param("batch size and epochs must be positive"));
        }
        Ok(())
    }

    /// Schedule for a training split of `n_train` examples; one decay
    /// period is ten passes over the split.
    pub fn schedule(&self, n_train: usize) -> LrSchedule {
        LrSchedule {
            lr0: self.learning_rate0,
            decay_rate: self.decay_rate,
            decay_step: 10 * n_train.max(1) as u64,
        }
    }

    /// One `key: value` line per field, for provenance headers.
    pub fn describe(&self) -> Vec<String> {
        vec![
            format!("frequency_hz: {}", self.frequency_hz),
            format!("learning_rate0: {}", self.learning_rate0),
            format!("adam: beta1={} beta2={} epsilon={}", self.beta1, self.beta2, self.epsilon),
            format!("decay_rate: {}", self.decay_rate),
            format!("epochs: {}", self.epochs),
            format!("batch_size: {}", self.batch_size),
            format!("seed: {}", self.seed),
            format!("ablation: {}", self.ablation),
            format!("pooling: {}", self.pooling),
            format!("input_points: {}", self.input_points),
        ]
    }
}

/// Exponential decay `lr0 * rate^(step / decay_step)` with a continuous
/// exponent; `step` counts training examples processed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub decay_rate: f64,
    pub decay_step: u64,
}

pub fn lr_schedule(s: &LrSchedule, step: u64) -> f64 {
    s.lr0 * s.decay_rate.powf(step as f64 / s.decay_step as f64)
}

/// Train / validation / test ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    /// Dataset directory the ids refer to, when known.
    #[serde(default)]
    pub dataset: Option<String>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("split manifest", e.to_string()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::textio::write_string(path, &self.to_json())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&crate::textio::read_to_string(path)?)
    }

    pub fn get(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "validation" | "val" => Ok(&self.validation),
            "test" => Ok(&self.test),
            _ => Err(Error::param(format!("unknown split {name:?} (train, validation or test)"))),
        }
    }
}

/// Seeded shuffle then an 8:1:1 cut; validation and test get
/// `floor(n / 10)` each and the remainder goes to training.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<SplitManifest> {
    if ids.len() < 10 {
        return Err(Error::param(format!("need at least 10 examples to split, got {}", ids.len())));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tenth = ids.len() / 10;
    let test = shuffled.split_off(shuffled.len() - tenth);
    let validation = shuffled.split_off(shuffled.len() - tenth);
    Ok(SplitManifest {
        seed,
        dataset: None,
        train: shuffled,
        validation,
        test,
    })
}

/// Adam moments over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

/// One Adam step on a model. Non-finite gradients are rejected before any
/// parameter changes; updated values are rounded to `f32`.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, grads: &ModelParams, lr: f64) -> Result<()> {
    for (name, block) in params.block_names().iter().zip(&grads.blocks) {
        if block.values().any(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient in block {name}")));
        }
    }
    let mut flat: Vec<f64> = params.values().copied().collect();
    let g: Vec<f64> = grads.values().copied().collect();
    if state.m.len() != flat.len() {
        return Err(Error::param("optimizer state does not match the model"));
    }
    state.step(&mut flat, &g, lr);
    for (p, v) in params.values_mut().zip(flat) {
        *p = round_f32(v);
    }
    Ok(())
}
