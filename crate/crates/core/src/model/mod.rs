//! Triplet (or ablated twin/single) tag classifier: one encoder per post
//! component, pooled embeddings concatenated in (title, description, code)
//! order, then a linear layer and a per-tag sigmoid.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Encoder, EncoderConfig, Pooling};
use crate::ingest::DecomposedPost;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::vocab::{encode, TagVocabulary, TokenSequence, Tokenizer, Truncation};

/// Site limit on tags per post, and the largest `k` evaluated.
pub const MAX_K: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("input components {got:?} do not match model components {expected:?}")]
    ComponentMismatch {
        expected: Vec<Component>,
        got: Vec<Component>,
    },
    #[error("k = {k} is out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Title,
    Description,
    Code,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Title, Component::Description, Component::Code];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Title => "title",
            Component::Description => "description",
            Component::Code => "code",
        }
    }

    pub fn text(self, post: &DecomposedPost) -> &str {
        match self {
            Component::Title => &post.title,
            Component::Description => &post.description,
            Component::Code => &post.code,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "title" => Ok(Component::Title),
            "description" | "desc" => Ok(Component::Description),
            "code" => Ok(Component::Code),
            other => Err(ModelError::InvalidConfig(format!("unknown component {other:?}"))),
        }
    }
}

/// Token budget per component (CLS and SEP included).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComponentLengths {
    pub title: usize,
    pub description: usize,
    pub code: usize,
}

impl Default for ComponentLengths {
    fn default() -> Self {
        Self {
            title: 100,
            description: 512,
            code: 512,
        }
    }
}

impl ComponentLengths {
    pub fn get(&self, c: Component) -> usize {
        match c {
            Component::Title => self.title,
            Component::Description => self.description,
            Component::Code => self.code,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub components: Vec<Component>,
    pub encoder: EncoderConfig,
    pub share_weights: bool,
    pub num_tags: usize,
    pub pooling: Pooling,
    pub max_len: ComponentLengths,
    pub truncation: Truncation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            components: Component::ALL.to_vec(),
            encoder: EncoderConfig::default(),
            share_weights: false,
            num_tags: 1,
            pooling: Pooling::Mean,
            max_len: ComponentLengths::default(),
            truncation: Truncation::HeadOnly,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Sorts components into canonical order and checks every invariant.
    pub fn normalized(mut self) -> Result<Self, ModelError> {
        self.components.sort();
        self.components.dedup();
        if self.components.is_empty() {
            return Err(ModelError::InvalidConfig("at least one component is required".into()));
        }
        if self.num_tags == 0 {
            return Err(ModelError::InvalidConfig("num_tags must be at least 1".into()));
        }
        self.encoder.validate()?;
        for &c in &self.components {
            let len = self.max_len.get(c);
            if len < 2 {
                return Err(ModelError::InvalidConfig(format!("max_len for {c} must be at least 2")));
            }
            if len > self.encoder.max_positions {
                return Err(ModelError::InvalidConfig(format!(
                    "max_len {len} for {c} exceeds max_positions {}",
                    self.encoder.max_positions
                )));
            }
        }
        Ok(self)
    }
}

/// Per-component token sequences for one post.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncodedPost {
    pub components: BTreeMap<Component, TokenSequence>,
}

impl EncodedPost {
    pub fn component_list(&self) -> Vec<Component> {
        self.components.keys().copied().collect()
    }

    /// Same post with every component padded to `lengths`.
    pub fn padded(&self, lengths: &ComponentLengths) -> EncodedPost {
        EncodedPost {
            components: self
                .components
                .iter()
                .map(|(&c, s)| (c, s.padded_to(lengths.get(c).max(s.real_len()))))
                .collect(),
        }
    }
}

/// Tokenizes only the components `config` uses; excluded components are
/// never read.
pub fn encode_post(tok: &Tokenizer, post: &DecomposedPost, config: &ModelConfig) -> EncodedPost {
    EncodedPost {
        components: config
            .components
            .iter()
            .map(|&c| (c, encode(tok, c.text(post), config.max_len.get(c), config.truncation)))
            .collect(),
    }
}

/// Whether padding positions are dropped before running the encoders.
/// Masked positions never influence the result, so trimming only saves
/// time; `Padded` reproduces the full-length cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PaddingMode {
    #[default]
    Trimmed,
    Padded,
}

/// Per-tag probabilities and the ranking derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f32>,
    /// Tag indices by descending probability, ties by ascending index.
    pub ranked: Vec<usize>,
}

impl Prediction {
    pub fn from_probabilities(probabilities: Vec<f32>) -> Self {
        let mut ranked: Vec<usize> = (0..probabilities.len()).collect();
        ranked.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
        Self { probabilities, ranked }
    }
}

/// The `k` most probable tag names.
pub fn predict_top_k(pred: &Prediction, vocab: &TagVocabulary, k: usize) -> Result<Vec<String>, ModelError> {
    let max = MAX_K.min(pred.ranked.len());
    if k == 0 || k > max {
        return Err(ModelError::KOutOfRange { k, max });
    }
    Ok(pred.ranked[..k].iter().map(|&i| vocab.name(i).to_string()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletModel<F: Scalar = f32> {
    config: ModelConfig,
    params: ParamStore<F>,
    encoders: Vec<Encoder>,
    classifier_w: ParamId,
    classifier_b: ParamId,
    vocab: TagVocabulary,
}

impl<F: Scalar> TripletModel<F> {
    /// Freshly initialized model. `config.num_tags` must equal `vocab.len()`.
    pub fn new(config: ModelConfig, vocab: TagVocabulary) -> Result<Self, ModelError> {
        let config = config.normalized()?;
        if config.num_tags != vocab.len() {
            return Err(ModelError::InvalidConfig(format!(
                "num_tags {} does not match vocabulary size {}",
                config.num_tags,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let encoders = if config.share_weights {
            vec![Encoder::new(&config.encoder, "shared", &mut params, &mut rng)?]
        } else {
            config
                .components
                .iter()
                .map(|c| Encoder::new(&config.encoder, c.as_str(), &mut params, &mut rng))
                .collect::<Result<_, _>>()?
        };
        let in_dim = config.components.len() * config.encoder.model_dim;
        let classifier_w = params.add(
            "classifier.weight",
            Tensor::randn(vec![config.num_tags, in_dim], 0.02, &mut rng),
        );
        let classifier_b = params.add("classifier.bias", Tensor::zeros(vec![config.num_tags]));
        Ok(Self {
            config,
            params,
            encoders,
            classifier_w,
            classifier_b,
            vocab,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &TagVocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn encoders(&self) -> &[Encoder] {
        &self.encoders
    }

    pub fn classifier(&self) -> (ParamId, ParamId) {
        (self.classifier_w, self.classifier_b)
    }

    /// The same model in another precision.
    pub fn cast<G: Scalar>(&self) -> TripletModel<G> {
        TripletModel {
            config: self.config.clone(),
            params: self.params.cast(),
            encoders: self.encoders.clone(),
            classifier_w: self.classifier_w,
            classifier_b: self.classifier_b,
            vocab: self.vocab.clone(),
        }
    }

    fn encoder_for(&self, idx: usize) -> &Encoder {
        if self.config.share_weights {
            &self.encoders[0]
        } else {
            &self.encoders[idx]
        }
    }

    pub fn encode(&self, tok: &Tokenizer, post: &DecomposedPost) -> EncodedPost {
        encode_post(tok, post, &self.config)
    }

    /// Records the forward pass on `g` and returns the `[1, L]`
    /// probability node.
    pub fn forward_graph<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        input: &EncodedPost,
        mode: PaddingMode,
    ) -> Result<Var, ModelError> {
        let got = input.component_list();
        if got != self.config.components {
            return Err(ModelError::ComponentMismatch {
                expected: self.config.components.clone(),
                got,
            });
        }
        let mut pooled = Vec::with_capacity(got.len());
        for (i, c) in self.config.components.iter().enumerate() {
            let seq = &input.components[c];
            let trimmed;
            let seq = match mode {
                PaddingMode::Trimmed => {
                    trimmed = seq.trimmed();
                    &trimmed
                }
                PaddingMode::Padded => seq,
            };
            pooled.push(self.encoder_for(i).embed(g, seq, self.config.pooling)?);
        }
        let z = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat_cols(&pooled)?
        };
        let w = g.param(self.classifier_w);
        let b = g.param(self.classifier_b);
        let logits = g.matmul_t(z, w)?;
        let logits = g.add_bias(logits, b)?;
        Ok(g.sigmoid(logits))
    }

    pub fn forward_with(&self, input: &EncodedPost, mode: PaddingMode) -> Result<Prediction, ModelError> {
        let mut g = Graph::new(&self.params);
        let probs = self.forward_graph(&mut g, input, mode)?;
        let p = g.value(probs).iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        Ok(Prediction::from_probabilities(p))
    }

    pub fn forward(&self, input: &EncodedPost) -> Result<Prediction, ModelError> {
        self.forward_with(input, PaddingMode::Trimmed)
    }

    /// Tokenizes, runs the model and returns the top `k` tags with their
    /// probabilities.
    pub fn recommend(
        &self,
        tok: &Tokenizer,
        post: &DecomposedPost,
        k: usize,
    ) -> Result<Vec<(String, f32)>, ModelError> {
        let pred = self.forward(&self.encode(tok, post))?;
        let names = predict_top_k(&pred, &self.vocab, k)?;
        Ok(names
            .into_iter()
            .zip(&pred.ranked)
            .map(|(n, &i)| (n, pred.probabilities[i]))
            .collect())
    }
}
