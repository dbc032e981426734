//! Mini-batch training with binary cross-entropy, Adam and a linearly
//! decaying learning rate.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::DecomposedPost;
use crate::model::{EncodedPost, ModelError, PaddingMode, TripletModel, MAX_K};
use crate::tensor::{GradStore, Graph, ParamStore, Scalar, TensorError, Var};
use crate::vocab::Tokenizer;

/// Probabilities are clipped to `[EPS, 1 - EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Posts per gradient work unit. Fixed so that the summation order, and
/// therefore every bit of the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("post {post}: tag {tag:?} is not in the vocabulary")]
    UnknownTag { post: u64, tag: String },
    #[error("post {post}: {count} target tags, expected 1 to {MAX_K}")]
    BadTargets { post: u64, count: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(
        "non-finite loss or gradient (loss {loss}) at step {step} (lr {lr}, batch post ids {post_ids:?}, \
         non-finite parameters {bad_params:?})"
    )]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        loss: f64,
        post_ids: Vec<u64>,
        bad_params: Vec<String>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub epochs: usize,
    /// Caps the total step count `T`; the schedule decays to 0 over the
    /// capped count.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            initial_lr: 7e-5,
            epochs: 1,
            max_steps: None,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    /// Total optimizer steps `T` for a corpus of `n` posts.
    pub fn total_steps(&self, n: usize) -> usize {
        let full = n.div_ceil(self.batch_size) * self.epochs;
        self.max_steps.map_or(full, |m| m.min(full))
    }

    /// `initial_lr * (1 - t / T)`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.initial_lr;
        }
        self.initial_lr * (1.0 - step as f64 / total as f64)
    }
}

/// Binary cross-entropy summed over tags and averaged over the batch:
/// `-(1/N) sum_i sum_j [y log f + (1 - y) log(1 - f)]`.
pub fn bce_loss(probabilities: &[Vec<f32>], targets: &[Vec<f32>]) -> Result<f64> {
    if probabilities.len() != targets.len() || probabilities.is_empty() {
        return Err(TrainError::Shape(format!(
            "{} prediction rows vs {} target rows",
            probabilities.len(),
            targets.len()
        )));
    }
    let n = probabilities.len() as f64;
    let mut total = 0.0;
    for (f, y) in probabilities.iter().zip(targets) {
        if f.len() != y.len() {
            return Err(TrainError::Shape(format!(
                "{} probabilities vs {} targets",
                f.len(),
                y.len()
            )));
        }
        for (&f, &y) in f.iter().zip(y) {
            let f = (f as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
            let y = y as f64;
            total += y * f.ln() + (1.0 - y) * (1.0 - f).ln();
        }
    }
    Ok(-total / n)
}

/// One post's share of the batch loss, recorded on the graph so it can be
/// differentiated: `probs` is `[1, L]`, `batch` is N.
pub fn bce_graph<F: Scalar>(g: &mut Graph<'_, F>, probs: Var, targets: &[F], batch: usize) -> Result<Var> {
    let (_, l) = g.dims(probs);
    if targets.len() != l {
        return Err(TrainError::Shape(format!(
            "{l} probabilities vs {} targets",
            targets.len()
        )));
    }
    let eps = F::lit(BCE_EPS);
    let f = g.clamp(probs, eps, F::one() - eps);
    let log_f = g.log(f);
    let one_minus_f = g.affine(f, -F::one(), F::one());
    let log_1f = g.log(one_minus_f);
    let y = g.constant(1, l, targets.to_vec())?;
    let not_y = g.constant(1, l, targets.iter().map(|&t| F::one() - t).collect())?;
    let a = g.mul(y, log_f)?;
    let b = g.mul(not_y, log_1f)?;
    let s = g.add(a, b)?;
    let s = g.sum(s);
    Ok(g.scale(s, -F::one() / F::lit(batch as f64)))
}

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: i32,
    beta1: F,
    beta2: F,
    eps: F,
    weight_decay: F,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamStore<F>, cfg: &TrainConfig) -> Self {
        Self {
            m: params.tensors().iter().map(|t| vec![F::zero(); t.numel()]).collect(),
            v: params.tensors().iter().map(|t| vec![F::zero(); t.numel()]).collect(),
            t: 0,
            beta1: F::lit(cfg.beta1),
            beta2: F::lit(cfg.beta2),
            eps: F::lit(cfg.eps),
            weight_decay: F::lit(cfg.weight_decay),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &GradStore<F>, lr: F) {
        self.t += 1;
        let c1 = F::one() - self.beta1.powi(self.t);
        let c2 = F::one() - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.grad(id) else { continue };
            let i = id.index();
            let p = params.get_mut(id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(&mut self.m[i]).zip(&mut self.v[i]) {
                *m = self.beta1 * *m + (F::one() - self.beta1) * g;
                *v = self.beta2 * *v + (F::one() - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps) + self.weight_decay * *p;
                *p = *p - lr * update;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub steps: Vec<StepRecord>,
}

impl LossTrace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,lr,loss")?;
        for r in &self.steps {
            writeln!(out, "{},{},{}", r.step, r.lr, r.loss)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w)?;
        w.flush()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.steps.last().map(|r| r.loss)
    }
}

/// A post ready for training: its token sequences and multi-hot targets.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: u64,
    pub input: EncodedPost,
    pub targets: Vec<f32>,
}

pub fn prepare_examples(
    model: &TripletModel<f32>,
    tok: &Tokenizer,
    corpus: &[DecomposedPost],
) -> Result<Vec<TrainingExample>> {
    let vocab = model.vocab();
    corpus
        .par_iter()
        .map(|post| {
            if let Some(t) = post.tags.iter().find(|t| !vocab.contains(t)) {
                return Err(TrainError::UnknownTag {
                    post: post.id,
                    tag: t.clone(),
                });
            }
            let targets = vocab.targets(&post.tags);
            let count = targets.iter().filter(|&&y| y > 0.0).count();
            if !(1..=MAX_K).contains(&count) {
                return Err(TrainError::BadTargets { post: post.id, count });
            }
            Ok(TrainingExample {
                id: post.id,
                input: model.encode(tok, post),
                targets,
            })
        })
        .collect()
}

/// Loss and summed parameter gradients for one mini-batch.
pub fn batch_gradients(model: &TripletModel<f32>, batch: &[&TrainingExample]) -> Result<(f64, GradStore<f32>)> {
    let n = batch.len();
    let partials: Vec<(f64, GradStore<f32>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = GradStore::new(model.params());
            let mut loss = 0.0f64;
            for ex in chunk {
                let mut g = Graph::new(model.params());
                let probs = model.forward_graph(&mut g, &ex.input, PaddingMode::Trimmed)?;
                let l = bce_graph(&mut g, probs, &ex.targets, n)?;
                loss += g.value(l)[0] as f64;
                g.backward(l, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut total = GradStore::new(model.params());
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        total.accumulate(g);
    }
    Ok((loss, total))
}

pub fn train(
    model: &mut TripletModel<f32>,
    tok: &Tokenizer,
    corpus: &[DecomposedPost],
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    train_with(model, tok, corpus, cfg, |_, _| Ok(()))
}

/// Like [`train`], calling `on_step` after every optimizer update (for
/// progress logs and periodic checkpoints).
pub fn train_with<C>(
    model: &mut TripletModel<f32>,
    tok: &Tokenizer,
    corpus: &[DecomposedPost],
    cfg: &TrainConfig,
    on_step: C,
) -> Result<LossTrace>
where
    C: FnMut(&StepRecord, &TripletModel<f32>) -> Result<()>,
{
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let examples = prepare_examples(model, tok, corpus)?;
    train_examples(model, &examples, cfg, on_step)
}

pub fn train_examples<C>(
    model: &mut TripletModel<f32>,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    mut on_step: C,
) -> Result<LossTrace>
where
    C: FnMut(&StepRecord, &TripletModel<f32>) -> Result<()>,
{
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let total = cfg.total_steps(examples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg);
    let mut trace = LossTrace::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();

    for step in 0..total {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<&TrainingExample> = order[cursor..end].iter().map(|&i| &examples[i]).collect();
        cursor = end;

        let lr = cfg.lr_at(step, total);
        let (loss, mut grads) = batch_gradients(model, &batch)?;
        if !loss.is_finite() || !grads.norm().is_finite() {
            let params = model.params();
            let bad_params = params
                .ids()
                .filter(|&id| params.get(id).data().iter().any(|v| !v.is_finite()))
                .map(|id| params.name(id).to_string())
                .collect();
            return Err(TrainError::NonFiniteLoss {
                step,
                lr,
                loss,
                post_ids: batch.iter().map(|e| e.id).collect(),
                bad_params,
            });
        }
        if let Some(c) = cfg.clip_norm {
            let norm = grads.norm() as f64;
            if norm > c {
                grads.scale((c / norm) as f32);
            }
        }
        adam.step(model.params_mut(), &grads, lr as f32);
        let record = StepRecord { step, lr, loss };
        trace.steps.push(record);
        tracing::debug!(step, lr, loss, "train step");
        on_step(&record, model)?;
    }
    Ok(trace)
}
