//! Top-k ranking metrics, paired statistics, error analysis and latency
//! benchmarks.

mod latency;
mod stats;

pub use latency::{latency_bench, quantile, summarize, BenchConfig, FixedTimer, LatencyStats, Timer, WallClock};
pub use stats::{cliffs_delta, wilcoxon_signed_rank, EffectSize, Magnitude, WilcoxonMethod, WilcoxonResult};

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::DecomposedPost;
use crate::model::{predict_top_k, ModelError, TripletModel, MAX_K};
use crate::vocab::Tokenizer;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k = {k} is out of range 1..={MAX_K}")]
    KOutOfRange { k: usize },
    #[error("instance {index}: prediction has {len} tags, fewer than k = {k}")]
    PredictionTooShort { index: usize, len: usize, k: usize },
    #[error("instance {index}: {msg}")]
    InvalidInstance { index: usize, msg: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("samples differ in length ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least {min} non-zero differences, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// One evaluated post: its true tag set and the model's ranked tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    #[serde(default)]
    pub id: u64,
    pub ground_truth: Vec<String>,
    pub ranked_prediction: Vec<String>,
}

impl EvalInstance {
    pub fn new(ground_truth: &[&str], ranked_prediction: &[&str]) -> Self {
        Self {
            id: 0,
            ground_truth: ground_truth.iter().map(|s| s.to_string()).collect(),
            ranked_prediction: ranked_prediction.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn hits(&self, k: usize) -> Result<usize> {
        if !(1..=MAX_K).contains(&k) {
            return Err(EvalError::KOutOfRange { k });
        }
        if self.ranked_prediction.len() < k {
            return Err(EvalError::PredictionTooShort {
                index: 0,
                len: self.ranked_prediction.len(),
                k,
            });
        }
        Ok(self.ranked_prediction[..k]
            .iter()
            .filter(|t| self.ground_truth.contains(t))
            .count())
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |msg: &str| {
            Err(EvalError::InvalidInstance {
                index,
                msg: msg.to_string(),
            })
        };
        if self.ground_truth.is_empty() {
            return bad("empty ground truth");
        }
        let unique: HashSet<&String> = self.ground_truth.iter().collect();
        if unique.len() != self.ground_truth.len() {
            return bad("duplicate ground-truth tag");
        }
        let unique: HashSet<&String> = self.ranked_prediction.iter().collect();
        if unique.len() != self.ranked_prediction.len() {
            return bad("duplicate predicted tag");
        }
        Ok(())
    }
}

/// `|GT ∩ top-k| / k`.
pub fn precision_at_k(inst: &EvalInstance, k: usize) -> Result<f64> {
    Ok(inst.hits(k)? as f64 / k as f64)
}

/// `|GT ∩ top-k| / k` when `|GT| > k`, else `|GT ∩ top-k| / |GT|`.
pub fn recall_at_k(inst: &EvalInstance, k: usize) -> Result<f64> {
    let hits = inst.hits(k)? as f64;
    let gt = inst.ground_truth.len();
    if gt == 0 {
        return Ok(0.0);
    }
    Ok(if gt > k { hits / k as f64 } else { hits / gt as f64 })
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_at_k(inst: &EvalInstance, k: usize) -> Result<f64> {
    let p = precision_at_k(inst, k)?;
    let r = recall_at_k(inst, k)?;
    Ok(harmonic(p, r))
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-instance scores, one entry per requested `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScores {
    pub id: u64,
    pub scores: Vec<Scores>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Corpus means per `k`, plus the per-instance table they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub metrics: Vec<KMetrics>,
    #[serde(skip)]
    pub instances: Vec<InstanceScores>,
}

pub fn evaluate_corpus(instances: &[EvalInstance], ks: &[usize]) -> Result<MetricsReport> {
    if instances.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if ks.is_empty() {
        return Err(EvalError::Invalid("no k values requested".into()));
    }
    for &k in ks {
        if !(1..=MAX_K).contains(&k) {
            return Err(EvalError::KOutOfRange { k });
        }
    }
    let rows: Vec<InstanceScores> = instances
        .par_iter()
        .enumerate()
        .map(|(index, inst)| {
            inst.validate(index)?;
            let scores = ks
                .iter()
                .map(|&k| {
                    let p = precision_at_k(inst, k)?;
                    let r = recall_at_k(inst, k)?;
                    Ok(Scores {
                        precision: p,
                        recall: r,
                        f1: harmonic(p, r),
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    EvalError::PredictionTooShort { len, k, .. } => EvalError::PredictionTooShort { index, len, k },
                    other => other,
                })?;
            Ok(InstanceScores { id: inst.id, scores })
        })
        .collect::<Result<_>>()?;

    let n = rows.len() as f64;
    let metrics = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
            for row in &rows {
                p += row.scores[j].precision;
                r += row.scores[j].recall;
                f += row.scores[j].f1;
            }
            KMetrics {
                k,
                precision: p / n,
                recall: r / n,
                f1: f / n,
            }
        })
        .collect();
    Ok(MetricsReport {
        n: rows.len(),
        metrics,
        instances: rows,
    })
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&KMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n = {}", self.n);
        let _ = writeln!(out, "{:>3}  {:>9}  {:>9}  {:>9}", "k", "precision", "recall", "f1");
        for m in &self.metrics {
            let _ = writeln!(
                out,
                "{:>3}  {:>9.4}  {:>9.4}  {:>9.4}",
                m.k, m.precision, m.recall, m.f1
            );
        }
        out
    }

    /// Per-instance scores as CSV: `id`, then `precision@k`, `recall@k`,
    /// `f1@k` for each `k`.
    pub fn write_instances_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string()];
        for m in &self.metrics {
            header.push(format!("precision@{}", m.k));
            header.push(format!("recall@{}", m.k));
            header.push(format!("f1@{}", m.k));
        }
        w.write_record(&header)?;
        for row in &self.instances {
            let mut rec = vec![row.id.to_string()];
            for s in &row.scores {
                rec.extend([s.precision.to_string(), s.recall.to_string(), s.f1.to_string()]);
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// F1@k for every instance, in corpus order.
    pub fn f1_column(&self, k: usize) -> Option<Vec<f64>> {
        let j = self.metrics.iter().position(|m| m.k == k)?;
        Some(self.instances.iter().map(|r| r.scores[j].f1).collect())
    }
}

/// Reads one named column (for example `f1@5`) from a per-instance CSV,
/// returning `(id, value)` pairs in file order.
pub fn read_instance_column<R: Read>(input: R, column: &str) -> Result<Vec<(u64, f64)>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == "id")
        .ok_or_else(|| EvalError::Invalid("missing id column".into()))?;
    let col = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| EvalError::Invalid(format!("missing column {column:?}")))?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse_err = |what: &str| EvalError::Invalid(format!("row {}: bad {what}", line + 1));
        let id = rec[id_col].parse().map_err(|_| parse_err("id"))?;
        let v: f64 = rec[col].parse().map_err(|_| parse_err(column))?;
        out.push((id, v));
    }
    Ok(out)
}

pub fn read_instance_column_file(path: impl AsRef<Path>, column: &str) -> Result<Vec<(u64, f64)>> {
    read_instance_column(std::fs::File::open(path)?, column)
}

/// How often each ground-truth tag occurs among instances whose F1@5 is
/// zero, most frequent first (ties by name).
pub fn missed_tag_analysis(instances: &[EvalInstance], f1_at_5: &[f64]) -> Result<Vec<(String, usize)>> {
    if instances.len() != f1_at_5.len() {
        return Err(EvalError::LengthMismatch {
            a: instances.len(),
            b: f1_at_5.len(),
        });
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (inst, &f1) in instances.iter().zip(f1_at_5) {
        if f1 == 0.0 {
            for t in &inst.ground_truth {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut table: Vec<(String, usize)> = counts.into_iter().map(|(t, c)| (t.to_string(), c)).collect();
    table.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(table)
}

/// Runs the model over `posts` and pairs each post's tags with its top
/// `min(MAX_K, L)` predictions.
pub fn predict_corpus(
    model: &TripletModel<f32>,
    tok: &Tokenizer,
    posts: &[DecomposedPost],
) -> Result<Vec<EvalInstance>> {
    let k = MAX_K.min(model.vocab().len());
    posts
        .par_iter()
        .map(|post| {
            let pred = model.forward(&model.encode(tok, post))?;
            Ok(EvalInstance {
                id: post.id,
                ground_truth: post.tags.clone(),
                ranked_prediction: predict_top_k(&pred, model.vocab(), k)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn worked_example() -> EvalInstance {
        EvalInstance::new(
            &["python", "machine-learning", "neural-network", "tensorflow", "keras"],
            &["python", "pytorch", "neural-network", "tensorflow", "keras"],
        )
    }

    #[test]
    fn worked_example_scores() {
        let inst = worked_example();
        assert_eq!(precision_at_k(&inst, 5).unwrap(), 0.8);
        assert_eq!(recall_at_k(&inst, 5).unwrap(), 0.8);
        assert!((f1_at_k(&inst, 5).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn hand_cases() {
        let top1 = EvalInstance::new(&["a"], &["a", "b"]);
        assert_eq!(precision_at_k(&top1, 1).unwrap(), 1.0);

        let inst = EvalInstance::new(&["a", "b"], &["a", "x", "y"]);
        assert!((precision_at_k(&inst, 3).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_k(&inst, 3).unwrap(), 0.5);
        assert!((f1_at_k(&inst, 3).unwrap() - 0.4).abs() < 1e-15);

        let full = EvalInstance::new(&["a", "b"], &["b", "a", "z"]);
        assert_eq!(recall_at_k(&full, 3).unwrap(), 1.0);

        // |GT| > k divides by k
        let wide = EvalInstance::new(&["a", "b", "c"], &["a", "x"]);
        assert_eq!(recall_at_k(&wide, 2).unwrap(), 0.5);

        let miss = EvalInstance::new(&["a"], &["x"]);
        assert_eq!(f1_at_k(&miss, 1).unwrap(), 0.0);
    }

    #[test]
    fn usage_errors() {
        let inst = EvalInstance::new(&["a"], &["a", "b"]);
        assert!(matches!(
            precision_at_k(&inst, 3),
            Err(EvalError::PredictionTooShort { .. })
        ));
        assert!(matches!(precision_at_k(&inst, 0), Err(EvalError::KOutOfRange { k: 0 })));
        assert!(matches!(recall_at_k(&inst, 6), Err(EvalError::KOutOfRange { k: 6 })));
        assert!(matches!(evaluate_corpus(&[], &[1]), Err(EvalError::EmptyCorpus)));
        let dup = EvalInstance::new(&["a"], &["a", "a"]);
        assert!(matches!(
            evaluate_corpus(&[dup], &[1]),
            Err(EvalError::InvalidInstance { .. })
        ));
        let err = evaluate_corpus(&[inst.clone(), inst.clone(), EvalInstance::new(&["a"], &["a"])], &[2]).unwrap_err();
        assert!(matches!(err, EvalError::PredictionTooShort { index: 2, len: 1, k: 2 }));
    }

    #[test]
    fn corpus_means() {
        let one = evaluate_corpus(&[worked_example()], &[5]).unwrap();
        assert_eq!(one.n, 1);
        assert_eq!(one.at(5).unwrap().precision, 0.8);

        let hit = EvalInstance::new(&["a"], &["a", "b", "c", "d", "e"]);
        let hit = EvalInstance {
            ground_truth: ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect(),
            ..hit
        };
        let miss = EvalInstance::new(&["z"], &["a", "b", "c", "d", "e"]);
        let r = evaluate_corpus(&[hit, miss], &[5]).unwrap();
        assert_eq!(r.at(5).unwrap().f1, 0.5);
        assert_eq!(r.f1_column(5).unwrap(), vec![1.0, 0.0]);
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> EvalInstance {
        let mut pool: Vec<usize> = (0..50).collect();
        let gt_n = rng.random_range(1..=5);
        let mut gt = Vec::new();
        for _ in 0..gt_n {
            gt.push(pool.swap_remove(rng.random_range(0..pool.len())));
        }
        let mut pool: Vec<usize> = (0..50).collect();
        let mut pred = Vec::new();
        for _ in 0..5 {
            pred.push(pool.swap_remove(rng.random_range(0..pool.len())));
        }
        EvalInstance {
            id: 0,
            ground_truth: gt.iter().map(|i| format!("t{i}")).collect(),
            ranked_prediction: pred.iter().map(|i| format!("t{i}")).collect(),
        }
    }

    #[test]
    fn metric_properties_hold_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let inst = random_instance(&mut rng);
            let mut prev_recall = 0.0;
            for k in 1..=5 {
                let p = precision_at_k(&inst, k).unwrap();
                let r = recall_at_k(&inst, k).unwrap();
                let f = f1_at_k(&inst, k).unwrap();
                for v in [p, r, f] {
                    assert!((0.0..=1.0).contains(&v));
                }
                if p + r > 0.0 {
                    assert!(f <= p.max(r) + 1e-15 && f >= p.min(r) - 1e-15);
                }
                if inst.ground_truth.len() < k {
                    assert!(r >= prev_recall);
                }
                prev_recall = r;
            }
        }
    }

    #[test]
    fn permutation_leaves_means_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut insts: Vec<_> = (0..40).map(|_| random_instance(&mut rng)).collect();
        let a = evaluate_corpus(&insts, &[1, 3, 5]).unwrap();
        insts.reverse();
        let b = evaluate_corpus(&insts, &[1, 3, 5]).unwrap();
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert!((x.f1 - y.f1).abs() < 1e-12 && (x.precision - y.precision).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_of_a_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let insts: Vec<_> = (0..7)
            .map(|i| EvalInstance {
                id: i + 100,
                ..random_instance(&mut rng)
            })
            .collect();
        let r = evaluate_corpus(&insts, &[1, 5]).unwrap();
        let mut buf = Vec::new();
        r.write_instances_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,precision@1,recall@1,f1@1,precision@5,recall@5,f1@5\n"));
        let col = read_instance_column(&buf[..], "f1@5").unwrap();
        let ids: Vec<u64> = col.iter().map(|c| c.0).collect();
        assert_eq!(ids, (100..107).collect::<Vec<_>>());
        let vals: Vec<f64> = col.iter().map(|c| c.1).collect();
        assert_eq!(vals, r.f1_column(5).unwrap());
        assert!(read_instance_column(&buf[..], "f1@4").is_err());
    }

    #[test]
    fn json_and_table() {
        let r = evaluate_corpus(&[worked_example()], &[1, 5]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["n"], 1);
        assert_eq!(v["metrics"][1]["k"], 5);
        assert_eq!(v["metrics"][1]["precision"], 0.8);
        let table = r.render_table();
        assert!(table.contains("0.8000"));
    }

    #[test]
    fn missed_tags() {
        let a = EvalInstance::new(&["a", "b"], &["x"]);
        let b = EvalInstance::new(&["b", "c"], &["b"]);
        assert!(missed_tag_analysis(&[a.clone(), b.clone()], &[0.5, 0.5])
            .unwrap()
            .is_empty());
        assert_eq!(
            missed_tag_analysis(std::slice::from_ref(&a), &[0.0]).unwrap(),
            vec![("a".to_string(), 1), ("b".to_string(), 1)]
        );
        assert!(missed_tag_analysis(&[a], &[]).is_err());
    }

    #[test]
    fn missed_tags_match_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let insts: Vec<_> = (0..50).map(|_| random_instance(&mut rng)).collect();
        let f1: Vec<f64> = insts.iter().map(|i| f1_at_k(i, 5).unwrap()).collect();
        let table = missed_tag_analysis(&insts, &f1).unwrap();
        let mut names: Vec<&String> = insts.iter().flat_map(|i| &i.ground_truth).collect();
        names.sort();
        names.dedup();
        for name in names {
            let expected = insts
                .iter()
                .zip(&f1)
                .filter(|(i, &f)| f == 0.0 && i.ground_truth.contains(name))
                .count();
            let got = table.iter().find(|(t, _)| t == name).map_or(0, |(_, c)| *c);
            assert_eq!(got, expected, "{name}");
        }
        assert!(table.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}
