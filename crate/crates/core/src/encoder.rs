//! A small pre-norm transformer encoder that maps a token sequence to one
//! fixed-size component embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::vocab::TokenSequence;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub dropout_rate: f32,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 128,
            ffn_dim: 512,
            max_positions: 512,
            dropout_rate: 0.0,
            vocab_size: 8192,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return bad("layers, heads, model_dim and ffn_dim must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.max_positions < 2 {
            return bad("max_positions must be at least 2".into());
        }
        if self.dropout_rate != 0.0 {
            return bad("dropout is not supported; dropout_rate must be 0".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        Ok(())
    }
}

/// How hidden states are reduced to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    ClsFirst,
    Max,
}

/// Pooled output of one encoder; always `model_dim` finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentEmbedding<F>(pub Vec<F>);

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Handles to one encoder's parameters inside a [`ParamStore`].
///
/// Parameter order (and names, under `prefix`): `tok_emb`, `pos_emb`, then
/// per layer `ln1.gain`, `ln1.bias`, `wq`, `bq`, `wk`, `bk`, `wv`, `bv`,
/// `wo`, `bo`, `ln2.gain`, `ln2.bias`, `w1`, `b1`, `w2`, `b2`, and finally
/// `ln_f.gain`, `ln_f.bias`. Weight matrices are `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<Layer>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
}

impl Encoder {
    /// Registers freshly initialized parameters: N(0, 0.02) for matrices and
    /// embeddings, zeros for biases, ones for layer-norm gains.
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        config: &EncoderConfig,
        prefix: &str,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.model_dim;
        let randn = |store: &mut ParamStore<F>, name: String, shape: Vec<usize>, rng: &mut R| {
            store.add(name, Tensor::randn(shape, INIT_STD, rng))
        };
        let zeros = |store: &mut ParamStore<F>, name: String, n: usize| store.add(name, Tensor::zeros(vec![n]));
        let ones =
            |store: &mut ParamStore<F>, name: String, n: usize| store.add(name, Tensor::filled(vec![n], F::one()));

        let tok_emb = randn(store, format!("{prefix}.tok_emb"), vec![config.vocab_size, d], rng);
        let pos_emb = randn(store, format!("{prefix}.pos_emb"), vec![config.max_positions, d], rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("{prefix}.layer{l}");
            layers.push(Layer {
                ln1_gain: ones(store, format!("{p}.ln1.gain"), d),
                ln1_bias: zeros(store, format!("{p}.ln1.bias"), d),
                wq: randn(store, format!("{p}.wq"), vec![d, d], rng),
                bq: zeros(store, format!("{p}.bq"), d),
                wk: randn(store, format!("{p}.wk"), vec![d, d], rng),
                bk: zeros(store, format!("{p}.bk"), d),
                wv: randn(store, format!("{p}.wv"), vec![d, d], rng),
                bv: zeros(store, format!("{p}.bv"), d),
                wo: randn(store, format!("{p}.wo"), vec![d, d], rng),
                bo: zeros(store, format!("{p}.bo"), d),
                ln2_gain: ones(store, format!("{p}.ln2.gain"), d),
                ln2_bias: zeros(store, format!("{p}.ln2.bias"), d),
                w1: randn(store, format!("{p}.w1"), vec![d, config.ffn_dim], rng),
                b1: zeros(store, format!("{p}.b1"), config.ffn_dim),
                w2: randn(store, format!("{p}.w2"), vec![config.ffn_dim, d], rng),
                b2: zeros(store, format!("{p}.b2"), d),
            });
        }
        let lnf_gain = ones(store, format!("{prefix}.ln_f.gain"), d);
        let lnf_bias = zeros(store, format!("{prefix}.ln_f.bias"), d);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_gain,
            lnf_bias,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Parameter ids owned by this encoder, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            ids.extend([
                l.ln1_gain, l.ln1_bias, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_gain, l.ln2_bias, l.w1,
                l.b1, l.w2, l.b2,
            ]);
        }
        ids.extend([self.lnf_gain, self.lnf_bias]);
        ids
    }

    /// Final hidden states `[len, d]` for every position of `seq`
    /// (padding included; padded keys receive zero attention).
    pub fn hidden_states<F: Scalar>(&self, g: &mut Graph<'_, F>, seq: &TokenSequence) -> Result<Var, ModelError> {
        let n = seq.len();
        if n > self.config.max_positions {
            return Err(ModelError::SequenceTooLong {
                len: n,
                max: self.config.max_positions,
            });
        }
        if n == 0 || seq.mask.len() != n {
            return Err(ModelError::InvalidInput("empty or inconsistent token sequence".into()));
        }
        let d = self.config.model_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..n).collect();

        let tok = g.param(self.tok_emb);
        let pos = g.param(self.pos_emb);
        let te = g.embedding(tok, &ids)?;
        let pe = g.embedding(pos, &positions)?;
        let mut x = g.add(te, pe)?;

        let key_bias = if seq.mask.iter().all(|&m| m) {
            None
        } else {
            let row: Vec<F> = seq
                .mask
                .iter()
                .map(|&m| if m { F::zero() } else { F::neg_infinity() })
                .collect();
            let data = row.iter().copied().cycle().take(n * n).collect();
            Some(g.constant(n, n, data)?)
        };
        let inv_sqrt = F::one() / F::from_usize(dh).unwrap().sqrt();

        for l in &self.layers {
            let (gain, bias) = (g.param(l.ln1_gain), g.param(l.ln1_bias));
            let h = g.layer_norm(x, gain, bias)?;
            let q = self.linear(g, h, l.wq, l.bq)?;
            let k = self.linear(g, h, l.wk, l.bk)?;
            let v = self.linear(g, h, l.wv, l.bv)?;
            let mut head_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let scores = g.matmul_t(qh, kh)?;
                let mut scores = g.scale(scores, inv_sqrt);
                if let Some(b) = key_bias {
                    scores = g.add(scores, b)?;
                }
                let probs = g.softmax_rows(scores)?;
                head_out.push(g.matmul(probs, vh)?);
            }
            let attn = g.concat_cols(&head_out)?;
            let attn = self.linear(g, attn, l.wo, l.bo)?;
            x = g.add(x, attn)?;

            let (gain, bias) = (g.param(l.ln2_gain), g.param(l.ln2_bias));
            let h = g.layer_norm(x, gain, bias)?;
            let f = self.linear(g, h, l.w1, l.b1)?;
            let f = g.gelu(f);
            let f = self.linear(g, f, l.w2, l.b2)?;
            x = g.add(x, f)?;
        }
        let (gain, bias) = (g.param(self.lnf_gain), g.param(self.lnf_bias));
        Ok(g.layer_norm(x, gain, bias)?)
    }

    fn linear<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, w: ParamId, b: ParamId) -> Result<Var, ModelError> {
        let wv = g.param(w);
        let bv = g.param(b);
        let y = g.matmul(x, wv)?;
        Ok(g.add_bias(y, bv)?)
    }

    /// Hidden states reduced by `pooling` to a `[1, d]` node.
    pub fn embed<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        seq: &TokenSequence,
        pooling: Pooling,
    ) -> Result<Var, ModelError> {
        let hidden = self.hidden_states(g, seq)?;
        pool(g, hidden, &seq.mask, pooling)
    }
}

/// Reduces `[len, d]` hidden states to `[1, d]`.
pub fn pool<F: Scalar>(g: &mut Graph<'_, F>, hidden: Var, mask: &[bool], strategy: Pooling) -> Result<Var, ModelError> {
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::InvalidInput(
            "pooling needs at least one unmasked position".into(),
        ));
    }
    Ok(match strategy {
        Pooling::Mean => g.masked_mean(hidden, mask)?,
        Pooling::Max => g.masked_max(hidden, mask)?,
        Pooling::ClsFirst => g.select_row(hidden, 0)?,
    })
}

/// Runs one encoder on one sequence and returns its pooled embedding.
pub fn encode_component<F: Scalar>(
    encoder: &Encoder,
    params: &ParamStore<F>,
    seq: &TokenSequence,
    pooling: Pooling,
) -> Result<ComponentEmbedding<F>, ModelError> {
    let mut g = Graph::new(params);
    let out = encoder.embed(&mut g, seq, pooling)?;
    Ok(ComponentEmbedding(g.value(out).to_vec()))
}
