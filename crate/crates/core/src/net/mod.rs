//! Permutation-invariant point-cloud network.
//!
//! Per point `i` the network computes
//!
//! 1. `x_i`: RBF-weighted (or uniform) differential coordinates;
//! 2. `z_i = encoder(x_i)`: shared ReLU MLP into the latent space;
//! 3. a `(1 + 2K) x D` feature block: `z_i`, then `K` Euclidean-weighted
//!    latent differences `phi(v_i - v_j)(z_i - z_j) / sum phi`, then `K`
//!    latent-weighted differences `phi(z_i - z_j)(z_i - z_j) / sum phi`;
//! 4. a `[1, 1 + 2K]` convolution over the block (a dense layer on the
//!    flattened block) followed by two shared ReLU layers.
//!
//! A symmetric pooling over points then feeds four `tanh` dense layers
//! producing 16 coefficients in `(-1, 1)`.
//!
//! Parameters are `f32` values held in `f64` (every update is rounded back
//! to `f32`), so checkpoints are lossless and all arithmetic is `f64`.

mod checkpoint;
mod model;

pub use checkpoint::{load_model, save_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{
    backward, build_features, encode_points, forward, forward_prepared, loss_and_grad, prepare, ForwardCache,
    Prepared,
};

use std::fmt;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::sphharm::{self, NUM_COEFFS};

/// Symmetric aggregation over points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Mean,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
        })
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::param(format!("unknown pooling {s:?} (expected max or mean)"))),
        }
    }
}

/// The two ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    /// RBF-weighted differential coordinates and Euclidean weights;
    /// uniform `1/K` averaging when false.
    pub use_rbf_delta: bool,
    /// Latent codes from the shared encoder; the raw differential
    /// coordinates when false.
    pub use_surface_encoder: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_rbf_delta: true,
            use_surface_encoder: true,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if !self.use_rbf_delta {
            parts.push("uniform-delta");
        }
        if !self.use_surface_encoder {
            parts.push("no-surface-encoder");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "uniform-delta" => a.use_rbf_delta = false,
                "no-surface-encoder" => a.use_surface_encoder = false,
                _ => return Err(Error::param(format!("unknown ablation {part:?}"))),
            }
        }
        Ok(a)
    }
}

/// Layer sizes and fixed hyperparameters of one per-band network.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub frequency_hz: u32,
    pub k: usize,
    /// Encoder widths after the 3-wide input; the last is the latent
    /// dimension. Ignored when the surface encoder is ablated.
    pub encoder: Vec<usize>,
    pub conv_channels: usize,
    pub mlp: Vec<usize>,
    /// Fully connected widths; the last must be 16.
    pub fc: Vec<usize>,
    pub pooling: Pooling,
    pub ablation: Ablation,
    pub rbf_scale: f64,
    /// Normalization constant that maps network outputs back to
    /// far-field coefficients.
    pub target_scale: f64,
    /// Clouds are reduced to this many points by furthest-point sampling
    /// before the forward pass (0 keeps every point).
    pub input_points: usize,
}

impl Architecture {
    /// Default layout: encoder 3-32-32-64-128, 8 conv channels, shared
    /// layers 64-64, fully connected 64-32-32-16, K = 5.
    pub fn new(frequency_hz: u32) -> Result<Self> {
        sphharm::check_band(frequency_hz)?;
        Ok(Self {
            frequency_hz,
            k: 5,
            encoder: vec![32, 32, 64, 128],
            conv_channels: 8,
            mlp: vec![64, 64],
            fc: vec![64, 32, 32, NUM_COEFFS],
            pooling: Pooling::Max,
            ablation: Ablation::default(),
            rbf_scale: 1.0,
            target_scale: 1.0,
            input_points: 0,
        })
    }

    pub fn latent_dim(&self) -> usize {
        if self.ablation.use_surface_encoder {
            *self.encoder.last().unwrap_or(&3)
        } else {
            3
        }
    }

    pub(crate) fn encoder_widths(&self) -> &[usize] {
        if self.ablation.use_surface_encoder {
            &self.encoder
        } else {
            &[]
        }
    }

    pub fn feature_width(&self) -> usize {
        (1 + 2 * self.k) * self.latent_dim()
    }

    /// `(name, fan_out, fan_in)` of every dense block in parameter order.
    pub fn blocks(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut inp = 3;
        for (i, &w) in self.encoder_widths().iter().enumerate() {
            out.push((format!("encoder.{i}"), w, inp));
            inp = w;
        }
        out.push(("conv".to_string(), self.conv_channels, self.feature_width()));
        inp = self.conv_channels;
        for (i, &w) in self.mlp.iter().enumerate() {
            out.push((format!("mlp.{i}"), w, inp));
            inp = w;
        }
        for (i, &w) in self.fc.iter().enumerate() {
            out.push((format!("fc.{i}"), w, inp));
            inp = w;
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, o, i)| o * i + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        sphharm::check_band(self.frequency_hz)?;
        if self.k == 0 {
            return Err(Error::param("K must be at least 1"));
        }
        if self.ablation.use_surface_encoder && self.encoder.is_empty() {
            return Err(Error::param("surface encoder needs at least one layer"));
        }
        if self.fc.last() != Some(&NUM_COEFFS) {
            return Err(Error::param(format!("last fully connected layer must have {NUM_COEFFS} outputs")));
        }
        let widths = self.encoder.iter().chain(&self.mlp).chain(&self.fc).chain([&self.conv_channels]);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::param("layer widths must be positive"));
        }
        if !(self.rbf_scale > 0.0) || !self.rbf_scale.is_finite() {
            return Err(Error::param("rbf scale must be positive"));
        }
        if !(self.target_scale > 0.0) || !self.target_scale.is_finite() {
            return Err(Error::param("target scale must be positive"));
        }
        if self.input_points != 0 && self.input_points < self.k + 1 {
            return Err(Error::param(format!("input_points must be 0 or at least K+1 = {}", self.k + 1)));
        }
        Ok(())
    }
}

/// One dense layer: `y = W x + b`, `W` is `fan_out x fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Self {
            w: Array2::zeros((fan_out, fan_in)),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weights (row-major) then biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(self.b.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }
}

/// All learnable weights of one network with its descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub blocks: Vec<Dense>,
}

/// Rounds to the nearest `f32`.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let blocks = arch.blocks().iter().map(|&(_, o, i)| Dense::zeros(o, i)).collect();
        Ok(Self { arch, blocks })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for d in p.blocks.iter_mut() {
            let (o, i) = d.w.dim();
            let lim = (6.0 / (o + i) as f64).sqrt();
            d.w.iter_mut()
                .for_each(|v| *v = round_f32(rng.random_range(-lim..lim)));
        }
        Ok(p)
    }

    pub fn block_names(&self) -> Vec<String> {
        self.arch.blocks().into_iter().map(|b| b.0).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(Dense::len).sum()
    }

    /// Same shapes, all zero (used as a gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            blocks: self.blocks.iter().map(|d| Dense::zeros(d.w.nrows(), d.w.ncols())).collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.blocks.iter().flat_map(Dense::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.blocks.iter_mut().flat_map(Dense::values_mut)
    }

    /// `self += s * other` (shapes must match).
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.w.scaled_add(s, &b.w);
            a.b.scaled_add(s, &b.b);
        }
    }

    pub(crate) fn encoder(&self) -> &[Dense] {
        &self.blocks[..self.arch.encoder_widths().len()]
    }

    pub(crate) fn conv(&self) -> &Dense {
        &self.blocks[self.arch.encoder_widths().len()]
    }

    pub(crate) fn mlp(&self) -> &[Dense] {
        let s = self.arch.encoder_widths().len() + 1;
        &self.blocks[s..s + self.arch.mlp.len()]
    }

    pub(crate) fn fc(&self) -> &[Dense] {
        let s = self.arch.encoder_widths().len() + 1 + self.arch.mlp.len();
        &self.blocks[s..]
    }
}
