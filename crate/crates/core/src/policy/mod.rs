//! Toy modular policy: a frozen visual encoder, a trainable adapter and a
//! small autoregressive language head.
//!
//! Forward pass for a task with visual input `x` and prompt tokens `p`:
//!
//! ```text
//! features = tanh(x · W_enc)            (encoder, never trained)
//! adapted  = (features · P_enc) · W_a + b_a
//! context  = adapted + mean(T[p])
//! h_t      = tanh(context · W_c + mean(E[y_<t]) · W_y + b_h)
//! logits_t = h_t · W_o + b_o
//! ```
//!
//! All parameters live in one flat vector so optimizers, finite-difference
//! checks and checkpoints can treat them uniformly.

mod checkpoint;
mod forward;
mod sample;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::Trace;
pub use sample::{Decoding, Response, Sampler};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{derive_seed, World};

fn d64() -> usize {
    64
}
fn d24() -> usize {
    24
}
fn d12() -> usize {
    12
}
fn d48() -> usize {
    48
}
/// Scale of the frozen encoder weights; large enough that the tanh features
/// are strongly nonlinear in the visual input.
pub const ENCODER_GAIN: f64 = 4.0;

fn default_init_scale() -> f64 {
    0.1
}

/// Layer widths. `vocab` and `visual` must agree with the task family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDims {
    pub vocab: usize,
    pub visual: usize,
    #[serde(default = "d64")]
    pub encoder: usize,
    #[serde(default = "d24")]
    pub context: usize,
    #[serde(default = "d12")]
    pub history: usize,
    #[serde(default = "d48")]
    pub hidden: usize,
}

impl PolicyDims {
    pub fn for_world(world: &World) -> Self {
        PolicyDims {
            vocab: world.vocab.size as usize,
            visual: world.task.visual_dim,
            encoder: d64(),
            context: d24(),
            history: d12(),
            hidden: d48(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab", self.vocab),
            ("visual", self.visual),
            ("encoder", self.encoder),
            ("context", self.context),
            ("history", self.history),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        Ok(())
    }
}

/// Model section of the experiment config; `vocab`/`visual` come from the task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d64")]
    pub encoder: usize,
    #[serde(default = "d24")]
    pub context: usize,
    #[serde(default = "d12")]
    pub history: usize,
    #[serde(default = "d48")]
    pub hidden: usize,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: d64(),
            context: d24(),
            history: d12(),
            hidden: d48(),
            init_scale: default_init_scale(),
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, world: &World) -> PolicyDims {
        PolicyDims {
            vocab: world.vocab.size as usize,
            visual: world.task.visual_dim,
            encoder: self.encoder,
            context: self.context,
            history: self.history,
            hidden: self.hidden,
        }
    }
}

/// Named parameter tensors, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tensor {
    EncoderWeight,
    EncoderProjection,
    AdapterWeight,
    AdapterBias,
    TextEmbedding,
    HistoryEmbedding,
    HiddenFromContext,
    HiddenFromHistory,
    HiddenBias,
    OutputWeight,
    OutputBias,
}

impl Tensor {
    pub const ALL: [Tensor; 11] = [
        Tensor::EncoderWeight,
        Tensor::EncoderProjection,
        Tensor::AdapterWeight,
        Tensor::AdapterBias,
        Tensor::TextEmbedding,
        Tensor::HistoryEmbedding,
        Tensor::HiddenFromContext,
        Tensor::HiddenFromHistory,
        Tensor::HiddenBias,
        Tensor::OutputWeight,
        Tensor::OutputBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::EncoderWeight => "encoder.weight",
            Tensor::EncoderProjection => "adapter.encoder_projection",
            Tensor::AdapterWeight => "adapter.weight",
            Tensor::AdapterBias => "adapter.bias",
            Tensor::TextEmbedding => "head.text_embedding",
            Tensor::HistoryEmbedding => "head.history_embedding",
            Tensor::HiddenFromContext => "head.hidden_from_context",
            Tensor::HiddenFromHistory => "head.hidden_from_history",
            Tensor::HiddenBias => "head.hidden_bias",
            Tensor::OutputWeight => "head.output_weight",
            Tensor::OutputBias => "head.output_bias",
        }
    }

    pub fn block(self) -> Block {
        match self {
            Tensor::EncoderWeight => Block::Encoder,
            Tensor::EncoderProjection | Tensor::AdapterWeight | Tensor::AdapterBias => {
                Block::Adapter
            }
            _ => Block::Head,
        }
    }

    pub fn shape(self, d: &PolicyDims) -> (usize, usize) {
        match self {
            Tensor::EncoderWeight => (d.visual, d.encoder),
            Tensor::EncoderProjection => (d.encoder, d.encoder),
            Tensor::AdapterWeight => (d.encoder, d.context),
            Tensor::AdapterBias => (1, d.context),
            Tensor::TextEmbedding => (d.vocab, d.context),
            Tensor::HistoryEmbedding => (d.vocab, d.history),
            Tensor::HiddenFromContext => (d.context, d.hidden),
            Tensor::HiddenFromHistory => (d.history, d.hidden),
            Tensor::HiddenBias => (1, d.hidden),
            Tensor::OutputWeight => (d.hidden, d.vocab),
            Tensor::OutputBias => (1, d.vocab),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Encoder,
    Adapter,
    Head,
}

/// Per-block trainability (`true` = trainable).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub encoder: bool,
    pub adapter: bool,
    pub head: bool,
}

/// Component-activation configurations.
///
/// The visual encoder itself never trains. `AdapterPlusEncoder` instead
/// unfreezes the encoder-side projection in front of the adapter, which
/// stands in for a trainable encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeConfig {
    AdapterOnly,
    HeadPlusAdapter,
    #[serde(rename = "adapter_plus_encoder_forwardonly")]
    AdapterPlusEncoder,
    /// Nothing trains; used for reference snapshots.
    Frozen,
}

impl FreezeConfig {
    pub const NAMED: [FreezeConfig; 3] = [
        FreezeConfig::AdapterOnly,
        FreezeConfig::HeadPlusAdapter,
        FreezeConfig::AdapterPlusEncoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FreezeConfig::AdapterOnly => "adapter_only",
            FreezeConfig::HeadPlusAdapter => "head_plus_adapter",
            FreezeConfig::AdapterPlusEncoder => "adapter_plus_encoder_forwardonly",
            FreezeConfig::Frozen => "frozen",
        }
    }

    pub fn mask(self) -> FreezeMask {
        match self {
            FreezeConfig::AdapterOnly | FreezeConfig::AdapterPlusEncoder => FreezeMask {
                encoder: false,
                adapter: true,
                head: false,
            },
            FreezeConfig::HeadPlusAdapter => FreezeMask {
                encoder: false,
                adapter: true,
                head: true,
            },
            FreezeConfig::Frozen => FreezeMask {
                encoder: false,
                adapter: false,
                head: false,
            },
        }
    }

    pub fn trains(self, tensor: Tensor) -> bool {
        let mask = self.mask();
        match tensor {
            Tensor::EncoderWeight => false,
            Tensor::EncoderProjection => self == FreezeConfig::AdapterPlusEncoder,
            Tensor::AdapterWeight | Tensor::AdapterBias => mask.adapter,
            _ => mask.head,
        }
    }
}

impl fmt::Display for FreezeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FreezeConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter_only" => Ok(FreezeConfig::AdapterOnly),
            "head_plus_adapter" => Ok(FreezeConfig::HeadPlusAdapter),
            "adapter_plus_encoder_forwardonly" => Ok(FreezeConfig::AdapterPlusEncoder),
            "frozen" => Ok(FreezeConfig::Frozen),
            other => Err(Error::config(
                "freeze",
                format!(
                    "unknown configuration `{other}` (expected adapter_only, head_plus_adapter or adapter_plus_encoder_forwardonly)"
                ),
            )),
        }
    }
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    offsets: [usize; 12],
}

impl Layout {
    pub fn new(dims: &PolicyDims) -> Self {
        let mut offsets = [0usize; 12];
        for (i, t) in Tensor::ALL.iter().enumerate() {
            let (r, c) = t.shape(dims);
            offsets[i + 1] = offsets[i] + r * c;
        }
        Layout { offsets }
    }

    pub fn range(&self, t: Tensor) -> std::ops::Range<usize> {
        let i = t as usize;
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn len(&self) -> usize {
        self.offsets[11]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A flat vector in parameter layout, used for gradients and update directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient(vec![0.0; len])
    }

    pub fn add_scaled(&mut self, other: &Gradient, s: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            *a *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Immutable parameter snapshot. Updates produce a new snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub freeze: FreezeConfig,
    pub seed: u64,
    pub step: u64,
    layout: Layout,
    data: Vec<f64>,
}

impl PolicyParams {
    /// Seed-stable initialization: uniform(-scale, scale) for adapter and head,
    /// an orthonormalized random encoder scaled by [`ENCODER_GAIN`], and an
    /// identity encoder projection.
    pub fn init(dims: PolicyDims, seed: u64, init_scale: f64) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(&dims);
        let mut data = vec![0.0; layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1417));

        let enc: Vec<f64> = orthonormal(dims.visual, dims.encoder, &mut rng)
            .into_iter()
            .map(|w| ENCODER_GAIN * w)
            .collect();
        data[layout.range(Tensor::EncoderWeight)].copy_from_slice(&enc);

        let proj = &mut data[layout.range(Tensor::EncoderProjection)];
        for i in 0..dims.encoder {
            proj[i * dims.encoder + i] = 1.0;
        }

        for t in Tensor::ALL.iter().skip(2) {
            for x in &mut data[layout.range(*t)] {
                *x = rng.gen_range(-init_scale..init_scale);
            }
        }

        Ok(PolicyParams {
            dims,
            freeze: FreezeConfig::AdapterOnly,
            seed,
            step: 0,
            layout,
            data,
        })
    }

    pub fn from_raw(
        dims: PolicyDims,
        freeze: FreezeConfig,
        seed: u64,
        step: u64,
        data: Vec<f64>,
    ) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(&dims);
        if data.len() != layout.len() {
            return Err(Error::input(format!(
                "parameter vector has {} entries, dims require {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(PolicyParams {
            dims,
            freeze,
            seed,
            step,
            layout,
            data,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.data[self.layout.range(t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.layout.range(t);
        &mut self.data[r]
    }

    /// Returns a copy with the given freeze configuration.
    pub fn set_freeze(&self, config: FreezeConfig) -> PolicyParams {
        let mut p = self.clone();
        p.freeze = config;
        p
    }

    pub fn freeze_mask(&self) -> FreezeMask {
        self.freeze.mask()
    }

    pub fn is_trainable(&self, t: Tensor) -> bool {
        self.freeze.trains(t)
    }

    /// Flat indices of every trainable entry.
    pub fn trainable_indices(&self) -> Vec<usize> {
        Tensor::ALL
            .iter()
            .filter(|t| self.is_trainable(**t))
            .flat_map(|t| self.layout.range(*t))
            .collect()
    }

    /// Zeroes every gradient entry that belongs to a frozen tensor.
    pub fn mask_gradient(&self, g: &mut Gradient) {
        for t in Tensor::ALL {
            if !self.is_trainable(t) {
                for x in &mut g.0[self.layout.range(t)] {
                    *x = 0.0;
                }
            }
        }
    }

    pub fn zero_gradient(&self) -> Gradient {
        Gradient::zeros(self.len())
    }

    /// New snapshot with `delta` added to trainable entries only.
    pub fn apply_update(&self, delta: &Gradient) -> PolicyParams {
        let mut p = self.clone();
        for t in Tensor::ALL {
            if self.is_trainable(t) {
                let r = self.layout.range(t);
                for (x, d) in p.data[r.clone()].iter_mut().zip(&delta.0[r]) {
                    *x += d;
                }
            }
        }
        p.step += 1;
        p
    }

    /// Overwrites a single raw entry; used by finite-difference probes.
    pub fn with_entry(&self, index: usize, value: f64) -> PolicyParams {
        let mut p = self.clone();
        p.data[index] = value;
        p
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_task(&self, task: &crate::world::Task) -> Result<()> {
        if task.visual_features.len() != self.dims.visual {
            return Err(Error::config(
                "model.visual",
                format!(
                    "task has {} visual features, policy expects {}",
                    task.visual_features.len(),
                    self.dims.visual
                ),
            ));
        }
        if let Some(&t) = task
            .prompt_tokens
            .iter()
            .find(|&&t| t as usize >= self.dims.vocab)
        {
            return Err(Error::config(
                "model.vocab",
                format!("prompt token {t} outside vocab {}", self.dims.vocab),
            ));
        }
        Ok(())
    }
}

/// Random matrix with orthonormal rows (or columns when rows > cols), row-major.
fn orthonormal(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (n, m) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while vecs.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(u) {
                *a -= d * b;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            vecs.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = if rows <= cols { vecs[i][j] } else { vecs[j][i] };
        }
    }
    out
}
