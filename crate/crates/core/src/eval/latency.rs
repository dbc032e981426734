use std::fmt;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::ingest::DecomposedPost;
use crate::model::{PaddingMode, TripletModel};
use crate::vocab::Tokenizer;

/// Summary of single-post inference times in milliseconds. Fields are
/// declared (and serialized) in the order std, min, 25%, 50%, 75%, max,
/// followed by the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub std: f64,
    pub min: f64,
    #[serde(rename = "25%")]
    pub p25: f64,
    #[serde(rename = "50%")]
    pub p50: f64,
    #[serde(rename = "75%")]
    pub p75: f64,
    pub max: f64,
    pub mean: f64,
}

impl fmt::Display for LatencyStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "std", "min", "25%", "50%", "75%", "max", "mean"
        )?;
        write!(
            f,
            "{:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            self.std, self.min, self.p25, self.p50, self.p75, self.max, self.mean
        )
    }
}

/// Linear interpolation between order statistics of sorted data:
/// position `q * (n - 1)`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean, sample standard deviation (n - 1 denominator; 0 for one sample)
/// and quantiles.
pub fn summarize(samples: &[f64]) -> Result<LatencyStats> {
    if samples.is_empty() {
        return Err(EvalError::Invalid("no latency samples".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let std = if sorted.len() > 1 {
        (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(LatencyStats {
        std,
        min: sorted[0],
        p25: quantile(&sorted, 0.25),
        p50: quantile(&sorted, 0.5),
        p75: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
        mean,
    })
}

/// Measures one call in milliseconds.
pub trait Timer {
    fn time(&mut self, run: &mut dyn FnMut()) -> f64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct WallClock;

impl Timer for WallClock {
    fn time(&mut self, run: &mut dyn FnMut()) -> f64 {
        let start = Instant::now();
        run();
        start.elapsed().as_secs_f64() * 1e3
    }
}

/// Runs the work but reports scripted durations, cycling through them.
#[derive(Debug, Clone)]
pub struct FixedTimer {
    values: Vec<f64>,
    next: usize,
}

impl FixedTimer {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "FixedTimer needs at least one value");
        Self { values, next: 0 }
    }
}

impl Timer for FixedTimer {
    fn time(&mut self, run: &mut dyn FnMut()) -> f64 {
        run();
        let v = self.values[self.next % self.values.len()];
        self.next += 1;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub sample_n: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sample_n: 2000,
            repeats: 5,
            seed: 0,
        }
    }
}

/// Times single-post forward passes. Each repeat draws `sample_n` posts
/// without replacement; inputs are tokenized beforehand and padded to the
/// configured component lengths. Runs on the calling thread only.
pub fn latency_bench<T: Timer + ?Sized>(
    model: &TripletModel<f32>,
    tok: &Tokenizer,
    corpus: &[DecomposedPost],
    cfg: &BenchConfig,
    timer: &mut T,
) -> Result<LatencyStats> {
    if cfg.sample_n == 0 || cfg.repeats == 0 {
        return Err(EvalError::Invalid("sample_n and repeats must be positive".into()));
    }
    if corpus.len() < cfg.sample_n {
        return Err(EvalError::Invalid(format!(
            "corpus has {} posts, fewer than sample_n = {}",
            corpus.len(),
            cfg.sample_n
        )));
    }
    let lengths = model.config().max_len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.sample_n * cfg.repeats);
    let mut failure = None;
    for _ in 0..cfg.repeats {
        let inputs: Vec<_> = corpus
            .choose_multiple(&mut rng, cfg.sample_n)
            .map(|p| model.encode(tok, p).padded(&lengths))
            .collect();
        // warm caches before the first timed call
        model.forward_with(&inputs[0], PaddingMode::Padded)?;
        for input in &inputs {
            let ms = timer.time(&mut || {
                if let Err(e) = model.forward_with(input, PaddingMode::Padded) {
                    failure = Some(e);
                }
            });
            if let Some(e) = failure.take() {
                return Err(e.into());
            }
            samples.push(ms);
        }
    }
    summarize(&samples)
}
