use std::path::Path;

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use tagrec::encoder::Pooling;
use tagrec::eval::BenchConfig;
use tagrec::model::{Component, ModelConfig};
use tagrec::train::TrainConfig;
use tagrec::vocab::{Truncation, DEFAULT_THETA};

use crate::InputError;

/// Every tunable setting. Built-in defaults are overridden by the
/// `--config` file, which is overridden by command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds weight init, shuffling and benchmark sampling. Replaces the
    /// `seed` fields of the `model`, `train` and `bench` sections.
    pub seed: u64,
    /// Worker threads for ingestion and encoding; 0 uses every core.
    pub workers: usize,
    pub vocab: VocabSettings,
    pub tokenizer: TokenizerSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Write `checkpoints/step-NNNNNN.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub eval: EvalSettings,
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSettings {
    pub theta: u64,
    pub test_count: usize,
}

impl Default for VocabSettings {
    fn default() -> Self {
        Self {
            theta: DEFAULT_THETA,
            test_count: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSettings {
    pub vocab_size: usize,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        Self { vocab_size: 8192 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    /// Tags printed by `predict`.
    pub k: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 3, 4, 5],
            k: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| InputError::new(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = serde_json::from_str(&text)
            .map_err(|e| InputError::new(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Propagates the global seed into every section that consumes one.
    pub fn finish(mut self) -> Self {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.bench.seed = self.seed;
        self
    }

    pub fn write_to(&self, dir: &Path) -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        let path = dir.join("effective_config.json");
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoolingArg {
    Mean,
    ClsFirst,
    Max,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Mean => Pooling::Mean,
            PoolingArg::ClsFirst => Pooling::ClsFirst,
            PoolingArg::Max => Pooling::Max,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TruncationArg {
    HeadOnly,
    TailOnly,
}

impl From<TruncationArg> for Truncation {
    fn from(t: TruncationArg) -> Self {
        match t {
            TruncationArg::HeadOnly => Truncation::HeadOnly,
            TruncationArg::TailOnly => Truncation::TailOnly,
        }
    }
}

/// Model shape overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Components to encode, comma separated [default: title,description,code]
    #[arg(long, value_delimiter = ',', value_parser = parse_component)]
    pub components: Option<Vec<Component>>,
    /// Transformer layers per encoder [default: 2]
    #[arg(long)]
    pub layers: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Hidden size d [default: 128]
    #[arg(long)]
    pub model_dim: Option<usize>,
    /// Feed-forward inner size [default: 512]
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    /// Learned position embeddings [default: 512]
    #[arg(long)]
    pub max_positions: Option<usize>,
    /// Pooling of final hidden states [default: mean]
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
    /// Which end of an over-long component to keep [default: head-only]
    #[arg(long, value_enum)]
    pub truncation: Option<TruncationArg>,
    /// Title token budget incl. CLS and SEP [default: 100]
    #[arg(long)]
    pub title_len: Option<usize>,
    /// Description token budget incl. CLS and SEP [default: 512]
    #[arg(long)]
    pub description_len: Option<usize>,
    /// Code token budget incl. CLS and SEP [default: 512]
    #[arg(long)]
    pub code_len: Option<usize>,
    /// One encoder shared by all components [default: false]
    #[arg(long)]
    pub share_weights: bool,
}

pub fn parse_component(s: &str) -> Result<Component, String> {
    s.parse().map_err(|e: tagrec::model::ModelError| e.to_string())
}

impl ModelArgs {
    pub fn apply(&self, m: &mut ModelConfig) {
        if let Some(c) = &self.components {
            m.components = c.clone();
        }
        set(&mut m.encoder.layers, self.layers);
        set(&mut m.encoder.heads, self.heads);
        set(&mut m.encoder.model_dim, self.model_dim);
        set(&mut m.encoder.ffn_dim, self.ffn_dim);
        set(&mut m.encoder.max_positions, self.max_positions);
        set(&mut m.pooling, self.pooling.map(Into::into));
        set(&mut m.truncation, self.truncation.map(Into::into));
        set(&mut m.max_len.title, self.title_len);
        set(&mut m.max_len.description, self.description_len);
        set(&mut m.max_len.code, self.code_len);
        if self.share_weights {
            m.share_weights = true;
        }
    }
}

/// Optimizer and schedule overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Posts per optimizer step [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate, decayed linearly to 0 [default: 7e-5]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Passes over the training set [default: 1]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Cap on optimizer steps [default: none]
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Decoupled weight decay [default: 0]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Global gradient norm clip [default: none]
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Periodic checkpoint interval in steps, 0 disables [default: 0]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.initial_lr, self.lr);
        set(&mut t.epochs, self.epochs);
        if self.max_steps.is_some() {
            t.max_steps = self.max_steps;
        }
        set(&mut t.weight_decay, self.weight_decay);
        if self.clip_norm.is_some() {
            t.clip_norm = self.clip_norm;
        }
        set(&mut cfg.checkpoint_every, self.checkpoint_every);
    }
}

pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
