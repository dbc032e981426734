use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tagrec::eval::{
    cliffs_delta, evaluate_corpus, latency_bench, missed_tag_analysis, predict_corpus, read_instance_column_file,
    wilcoxon_signed_rank, EffectSize, EvalError, EvalInstance, KMetrics, LatencyStats, MetricsReport, WallClock,
    WilcoxonResult,
};
use tagrec::ingest::{chronological_split, ingest, read_jsonl, write_jsonl, DecomposedPost, IngestStats};
use tagrec::model::{load_checkpoint, save_checkpoint, Component, ModelConfig, TripletModel, MAX_K};
use tagrec::train::{train_with, LossTrace, TrainError};
use tagrec::vocab::{build_tag_vocab, filter_posts, TagVocabulary, Tokenizer};
use tracing::{info, warn};

use crate::config::RunConfig;
use crate::InputError;

trait OrInput<T> {
    /// Marks a failure as caused by a missing or invalid input.
    fn or_input(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T, E: std::fmt::Display> OrInput<T> for std::result::Result<T, E> {
    fn or_input(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| InputError::new(format!("{}: {e}", what())).into())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_posts(path: &Path, posts: &[DecomposedPost]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_jsonl(&mut out, posts)?;
    out.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<DecomposedPost>> {
    let file = File::open(path).or_input(|| format!("cannot open corpus {}", path.display()))?;
    read_jsonl(BufReader::new(file)).or_input(|| format!("invalid corpus {}", path.display()))
}

pub fn load_vocab(path: &Path) -> Result<TagVocabulary> {
    TagVocabulary::load(path).or_input(|| format!("invalid tag vocabulary {}", path.display()))
}

pub fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    Tokenizer::load(path).or_input(|| format!("invalid tokenizer {}", path.display()))
}

pub fn load_model(path: &Path, vocab: &TagVocabulary, tok: &Tokenizer) -> Result<TripletModel<f32>> {
    let model: TripletModel<f32> =
        load_checkpoint(path, vocab).or_input(|| format!("invalid checkpoint {}", path.display()))?;
    let expected = model.config().encoder.vocab_size;
    if tok.vocab_size() != expected {
        return Err(InputError::new(format!(
            "tokenizer has {} ids but the checkpoint was trained with {expected}",
            tok.vocab_size()
        ))
        .into());
    }
    Ok(model)
}

pub fn effective_workers(workers: usize) -> usize {
    if workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        workers
    }
}

pub fn run_ingest(cfg: &RunConfig, input: &Path, out_dir: &Path) -> Result<()> {
    let file = File::open(input).or_input(|| format!("cannot open dump {}", input.display()))?;
    create_dir(out_dir)?;
    cfg.write_to(out_dir)?;
    let corpus_path = out_dir.join("corpus.jsonl");
    let out = BufWriter::new(File::create(&corpus_path)?);
    let stats: IngestStats = ingest(BufReader::new(file), out, effective_workers(cfg.workers))
        .or_input(|| format!("cannot ingest {}", input.display()))?;
    write_json(&out_dir.join("ingest_stats.json"), &stats)?;
    info!(rows = stats.parse.rows, written = stats.written, "ingested");
    Ok(())
}

#[derive(Serialize)]
struct SplitStats {
    posts_in: usize,
    posts_kept: usize,
    tags_kept: usize,
    theta: u64,
    train: usize,
    test: usize,
}

pub fn run_build_vocab(cfg: &RunConfig, corpus: &Path, out_dir: &Path) -> Result<()> {
    let posts = read_corpus(corpus)?;
    let posts_in = posts.len();
    let vocab = build_tag_vocab(&posts, cfg.vocab.theta).or_input(|| "cannot build tag vocabulary".into())?;
    let kept = filter_posts(posts, &vocab);
    let posts_kept = kept.len();
    let (train, test) = chronological_split(kept, cfg.vocab.test_count).or_input(|| "cannot split corpus".into())?;

    create_dir(out_dir)?;
    cfg.write_to(out_dir)?;
    vocab.save(out_dir.join("vocab.json"))?;
    write_posts(&out_dir.join("train.jsonl"), &train)?;
    write_posts(&out_dir.join("test.jsonl"), &test)?;
    let stats = SplitStats {
        posts_in,
        posts_kept,
        tags_kept: vocab.len(),
        theta: vocab.theta(),
        train: train.len(),
        test: test.len(),
    };
    write_json(&out_dir.join("split_stats.json"), &stats)?;
    info!(
        tags = vocab.len(),
        train = train.len(),
        test = test.len(),
        "built tag vocabulary"
    );
    Ok(())
}

pub fn run_tokenizer_train(cfg: &RunConfig, corpus: &Path, out_dir: &Path) -> Result<()> {
    let posts = read_corpus(corpus)?;
    if posts.is_empty() {
        return Err(InputError::new(format!("corpus {} is empty", corpus.display())).into());
    }
    let texts = posts.iter().flat_map(|p| Component::ALL.map(|c| c.text(p)));
    let tok = Tokenizer::train(texts, cfg.tokenizer.vocab_size).or_input(|| "cannot train tokenizer".into())?;
    create_dir(out_dir)?;
    cfg.write_to(out_dir)?;
    tok.save(out_dir.join("tokenizer.json"))?;
    info!(
        vocab_size = tok.vocab_size(),
        merges = tok.merges().len(),
        "trained tokenizer"
    );
    Ok(())
}

/// Fills in the data-dependent sizes and checks the result.
fn resolve_model(model: &ModelConfig, vocab: &TagVocabulary, tok: &Tokenizer) -> Result<ModelConfig> {
    let mut m = model.clone();
    m.num_tags = vocab.len();
    m.encoder.vocab_size = tok.vocab_size();
    m.normalized().or_input(|| "invalid model configuration".into())
}

#[derive(Serialize)]
struct TrainSummary {
    posts: usize,
    steps: usize,
    parameters: usize,
    final_loss: Option<f64>,
}

fn train_into(
    cfg: &RunConfig,
    model_cfg: ModelConfig,
    vocab: &TagVocabulary,
    tok: &Tokenizer,
    corpus: &[DecomposedPost],
    out_dir: &Path,
) -> Result<TripletModel<f32>> {
    let mut model = TripletModel::<f32>::new(model_cfg, vocab.clone()).or_input(|| "invalid model".into())?;
    let total = cfg.train.total_steps(corpus.len());
    let log_every = (total / 20).max(1);
    let ckpt_dir = out_dir.join("checkpoints");
    if cfg.checkpoint_every > 0 {
        create_dir(&ckpt_dir)?;
    }
    info!(
        posts = corpus.len(),
        steps = total,
        parameters = model.params().num_elements(),
        "training"
    );
    let trace: LossTrace = train_with(&mut model, tok, corpus, &cfg.train, |rec, m| {
        if (rec.step + 1) % log_every == 0 || rec.step + 1 == total {
            info!(step = rec.step + 1, lr = rec.lr, loss = rec.loss, "step");
        }
        if cfg.checkpoint_every > 0 && (rec.step + 1) % cfg.checkpoint_every == 0 {
            let path = ckpt_dir.join(format!("step-{:06}.ckpt", rec.step + 1));
            save_checkpoint(m, &path).map_err(|e| TrainError::Io(std::io::Error::other(e)))?;
        }
        Ok(())
    })
    .map_err(|e| match e {
        TrainError::InvalidConfig(_) | TrainError::UnknownTag { .. } | TrainError::BadTargets { .. } => {
            anyhow::Error::new(InputError::new(e.to_string()))
        }
        other => anyhow::Error::new(other).context("training failed"),
    })?;

    save_checkpoint(&model, out_dir.join("model.ckpt"))?;
    trace.save_csv(out_dir.join("loss.csv"))?;
    let summary = TrainSummary {
        posts: corpus.len(),
        steps: trace.steps.len(),
        parameters: model.params().num_elements(),
        final_loss: trace.last_loss(),
    };
    write_json(&out_dir.join("train_summary.json"), &summary)?;
    Ok(model)
}

pub fn run_train(cfg: &mut RunConfig, corpus: &Path, vocab: &Path, tokenizer: &Path, out_dir: &Path) -> Result<()> {
    let vocab = load_vocab(vocab)?;
    let tok = load_tokenizer(tokenizer)?;
    let posts = read_corpus(corpus)?;
    cfg.train
        .validate()
        .or_input(|| "invalid training configuration".into())?;
    cfg.model = resolve_model(&cfg.model, &vocab, &tok)?;
    create_dir(out_dir)?;
    cfg.write_to(out_dir)?;
    train_into(cfg, cfg.model.clone(), &vocab, &tok, &posts, out_dir)?;
    info!(out = %out_dir.display(), "training done");
    Ok(())
}

/// The requested `k` values that the label space can satisfy.
fn usable_ks(ks: &[usize], labels: usize) -> Result<Vec<usize>> {
    let usable: Vec<usize> = ks.iter().copied().filter(|&k| k <= labels.min(MAX_K)).collect();
    if usable.len() < ks.len() {
        warn!(labels, "dropping k values larger than the label space");
    }
    if usable.is_empty() {
        return Err(InputError::new("no usable k values".into()).into());
    }
    Ok(usable)
}

fn write_report(out_dir: &Path, report: &MetricsReport, instances: &[EvalInstance]) -> Result<()> {
    write_json(&out_dir.join("metrics.json"), report)?;
    std::fs::write(out_dir.join("metrics.txt"), report.render_table())?;
    let mut csv = BufWriter::new(File::create(out_dir.join("instances.csv"))?);
    report.write_instances_csv(&mut csv)?;
    csv.flush()?;
    if let Some(f1) = report.f1_column(5) {
        let missed = missed_tag_analysis(instances, &f1)?;
        let table: Vec<_> = missed
            .into_iter()
            .map(|(tag, count)| serde_json::json!({ "tag": tag, "count": count }))
            .collect();
        write_json(&out_dir.join("missed_tags.json"), &table)?;
    }
    Ok(())
}

fn evaluate_model(
    cfg: &RunConfig,
    model: &TripletModel<f32>,
    tok: &Tokenizer,
    posts: &[DecomposedPost],
) -> Result<(MetricsReport, Vec<EvalInstance>)> {
    if posts.is_empty() {
        return Err(InputError::new("test corpus is empty".into()).into());
    }
    let vocab = model.vocab();
    if let Some((p, t)) = posts
        .iter()
        .find_map(|p| p.tags.iter().find(|t| !vocab.contains(t)).map(|t| (p, t)))
    {
        return Err(InputError::new(format!("post {}: tag {t:?} is not in the vocabulary", p.id)).into());
    }
    let ks = usable_ks(&cfg.eval.ks, vocab.len())?;
    let instances = predict_corpus(model, tok, posts)?;
    let report = evaluate_corpus(&instances, &ks)?;
    Ok((report, instances))
}

pub struct EvaluateInputs<'a> {
    pub corpus: Option<&'a Path>,
    pub model: Option<&'a Path>,
    pub vocab: Option<&'a Path>,
    pub tokenizer: Option<&'a Path>,
    pub predictions: Option<&'a Path>,
}

pub fn run_evaluate(cfg: &RunConfig, inputs: EvaluateInputs<'_>, out_dir: &Path) -> Result<()> {
    let (report, instances) = match inputs {
        EvaluateInputs {
            predictions: Some(path),
            ..
        } => {
            let file = File::open(path).or_input(|| format!("cannot open predictions {}", path.display()))?;
            let mut instances = Vec::new();
            for (i, line) in std::io::BufRead::lines(BufReader::new(file)).enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let inst: EvalInstance = serde_json::from_str(&line)
                    .or_input(|| format!("invalid predictions {} line {}", path.display(), i + 1))?;
                instances.push(inst);
            }
            let report = evaluate_corpus(&instances, &cfg.eval.ks).map_err(classify_eval)?;
            (report, instances)
        }
        EvaluateInputs {
            corpus: Some(corpus),
            model: Some(model),
            vocab: Some(vocab),
            tokenizer: Some(tokenizer),
            ..
        } => {
            let vocab = load_vocab(vocab)?;
            let tok = load_tokenizer(tokenizer)?;
            let model = load_model(model, &vocab, &tok)?;
            let posts = read_corpus(corpus)?;
            evaluate_model(cfg, &model, &tok, &posts)?
        }
        _ => bail!(InputError::new(
            "evaluate needs either --predictions or all of --corpus, --model, --vocab and --tokenizer".into()
        )),
    };
    create_dir(out_dir)?;
    cfg.write_to(out_dir)?;
    let mut preds = BufWriter::new(File::create(out_dir.join("predictions.jsonl"))?);
    for inst in &instances {
        serde_json::to_writer(&mut preds, inst)?;
        preds.write_all(b"\n")?;
    }
    preds.flush()?;
    write_report(out_dir, &report, &instances)?;
    print!("{}", report.render_table());
    Ok(())
}

fn classify_eval(e: EvalError) -> anyhow::Error {
    match e {
        EvalError::Io(_) => anyhow::Error::new(e),
        other => InputError::new(other.to_string()).into(),
    }
}

/// A post read from a JSON file for `predict`; absent fields are empty.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostInput {
    pub title: String,
    pub description: String,
    pub code: String,
}

#[derive(Serialize)]
struct ScoredTag {
    tag: String,
    probability: f32,
}

#[derive(Serialize)]
struct PredictOutput {
    k: usize,
    tags: Vec<ScoredTag>,
}

pub fn run_predict(cfg: &RunConfig, model: &Path, vocab: &Path, tokenizer: &Path, post: PostInput) -> Result<()> {
    let vocab = load_vocab(vocab)?;
    let tok = load_tokenizer(tokenizer)?;
    let model = load_model(model, &vocab, &tok)?;
    let k = cfg.eval.k;
    if k == 0 || k > MAX_K.min(vocab.len()) {
        return Err(InputError::new(format!("k = {k} is out of range 1..={}", MAX_K.min(vocab.len()))).into());
    }
    let post = DecomposedPost {
        id: 0,
        date: Default::default(),
        title: post.title,
        description: post.description,
        code: post.code,
        tags: Vec::new(),
    };
    let tags = model
        .recommend(&tok, &post, k)?
        .into_iter()
        .map(|(tag, probability)| ScoredTag { tag, probability })
        .collect();
    let out = PredictOutput { k, tags };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

pub fn read_post_file(path: &Path) -> Result<PostInput> {
    let text = std::fs::read_to_string(path).or_input(|| format!("cannot read post {}", path.display()))?;
    serde_json::from_str(&text).or_input(|| format!("invalid post {}", path.display()))
}

#[derive(Serialize)]
struct PairedTest {
    wilcoxon: Option<WilcoxonResult>,
    cliffs_delta: EffectSize,
    /// Set when the Wilcoxon test could not be run.
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

fn paired_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    let cliffs_delta = cliffs_delta(a, b).map_err(classify_eval)?;
    let (wilcoxon, note) = match wilcoxon_signed_rank(a, b) {
        Ok(w) => (Some(w), None),
        Err(e @ EvalError::TooFewSamples { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(classify_eval(e)),
    };
    Ok(PairedTest {
        wilcoxon,
        cliffs_delta,
        note,
    })
}

#[derive(Serialize)]
struct VariantResult {
    variant: String,
    components: Vec<Component>,
    metrics: Vec<KMetrics>,
    /// F1@k minus the full model's F1@k, per k.
    f1_delta: Vec<f64>,
    /// Per-instance F1@5 of this variant against the full model.
    #[serde(skip_serializing_if = "Option::is_none")]
    versus_full: Option<PairedTest>,
}

fn variant_name(excluded: Option<Component>) -> String {
    match excluded {
        None => "all".to_string(),
        Some(Component::Title) => "no_title".to_string(),
        Some(Component::Description) => "no_description".to_string(),
        Some(Component::Code) => "no_code".to_string(),
    }
}

pub fn run_ablate(
    cfg: &mut RunConfig,
    train: &Path,
    test: &Path,
    vocab: &Path,
    tokenizer: &Path,
    exclude: &[Component],
    out_dir: &Path,
) -> Result<()> {
    let vocab = load_vocab(vocab)?;
    let tok = load_tokenizer(tokenizer)?;
    let train_posts = read_corpus(train)?;
    let test_posts = read_corpus(test)?;
    cfg.train
        .validate()
        .or_input(|| "invalid training configuration".into())?;
    let mut full_cfg = cfg.model.clone();
    full_cfg.components = Component::ALL.to_vec();
    cfg.model = resolve_model(&full_cfg, &vocab, &tok)?;
    create_dir(out_dir)?;
    cfg.write_to(out_dir)?;

    let mut variants = vec![None];
    let mut excluded: Vec<Component> = exclude.to_vec();
    excluded.sort();
    excluded.dedup();
    variants.extend(excluded.into_iter().map(Some));

    let mut results: Vec<VariantResult> = Vec::new();
    let mut full: Option<(MetricsReport, Vec<f64>)> = None;
    for ex in variants {
        let name = variant_name(ex);
        let mut m = cfg.model.clone();
        m.components.retain(|&c| Some(c) != ex);
        let dir = out_dir.join(&name);
        create_dir(&dir)?;
        info!(variant = %name, "ablation variant");
        let model = train_into(cfg, m.clone(), &vocab, &tok, &train_posts, &dir)?;
        let (report, instances) = evaluate_model(cfg, &model, &tok, &test_posts)?;
        write_report(&dir, &report, &instances)?;
        let f1_5 = report.f1_column(5).unwrap_or_default();

        let (f1_delta, versus_full) = match &full {
            None => (vec![0.0; report.metrics.len()], None),
            Some((base, base_f1)) => {
                let delta = report
                    .metrics
                    .iter()
                    .zip(&base.metrics)
                    .map(|(v, b)| v.f1 - b.f1)
                    .collect();
                let test = if f1_5.is_empty() {
                    None
                } else {
                    Some(paired_test(&f1_5, base_f1)?)
                };
                (delta, test)
            }
        };
        results.push(VariantResult {
            variant: name,
            components: m.components.clone(),
            metrics: report.metrics.clone(),
            f1_delta,
            versus_full,
        });
        if full.is_none() {
            full = Some((report, f1_5));
        }
    }
    write_json(&out_dir.join("ablation.json"), &results)?;
    let table = render_ablation(&results);
    std::fs::write(out_dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn render_ablation(results: &[VariantResult]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let Some(first) = results.first() else {
        return out;
    };
    let _ = write!(out, "{:<16}", "variant");
    for m in &first.metrics {
        let _ = write!(out, " {:>8} {:>8}", format!("F1@{}", m.k), "delta");
    }
    out.push('\n');
    for r in results {
        let _ = write!(out, "{:<16}", r.variant);
        for (m, d) in r.metrics.iter().zip(&r.f1_delta) {
            let _ = write!(out, " {:>8.4} {:>+8.4}", m.f1, d);
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct BenchReport {
    sample_n: usize,
    repeats: usize,
    seed: u64,
    layers: usize,
    model_dim: usize,
    parameters: usize,
    /// Milliseconds per post; wall-clock dependent.
    latency_ms: LatencyStats,
}

pub fn run_bench(
    cfg: &RunConfig,
    model: &Path,
    vocab: &Path,
    tokenizer: &Path,
    corpus: &Path,
    out_dir: &Path,
) -> Result<()> {
    let vocab = load_vocab(vocab)?;
    let tok = load_tokenizer(tokenizer)?;
    let model = load_model(model, &vocab, &tok)?;
    let posts = read_corpus(corpus)?;
    create_dir(out_dir)?;
    cfg.write_to(out_dir)?;
    let stats = latency_bench(&model, &tok, &posts, &cfg.bench, &mut WallClock).map_err(classify_eval)?;
    let report = BenchReport {
        sample_n: cfg.bench.sample_n,
        repeats: cfg.bench.repeats,
        seed: cfg.bench.seed,
        layers: model.config().encoder.layers,
        model_dim: model.config().encoder.model_dim,
        parameters: model.params().num_elements(),
        latency_ms: stats,
    };
    write_json(&out_dir.join("latency.json"), &report)?;
    println!("{stats}");
    Ok(())
}

#[derive(Serialize)]
struct CompareReport {
    column: String,
    n: usize,
    mean_a: f64,
    mean_b: f64,
    #[serde(flatten)]
    test: PairedTest,
}

/// Pairs two per-instance columns by id; both files must cover the same ids.
fn paired_columns(a: &Path, b: &Path, column: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let read = |p: &Path| -> Result<BTreeMap<u64, f64>> {
        let rows =
            read_instance_column_file(p, column).or_input(|| format!("invalid instance table {}", p.display()))?;
        let n = rows.len();
        let map: BTreeMap<u64, f64> = rows.into_iter().collect();
        if map.len() != n {
            return Err(InputError::new(format!("{} has duplicate ids", p.display())).into());
        }
        Ok(map)
    };
    let (ma, mb) = (read(a)?, read(b)?);
    if !ma.keys().eq(mb.keys()) {
        return Err(InputError::new("the two tables cover different instance ids".into()).into());
    }
    Ok((ma.into_values().collect(), mb.into_values().collect()))
}

pub fn run_compare(cfg: &RunConfig, a: &Path, b: &Path, column: &str, out_dir: Option<&PathBuf>) -> Result<()> {
    let (xs, ys) = paired_columns(a, b, column)?;
    if xs.is_empty() {
        return Err(InputError::new("instance tables are empty".into()).into());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = CompareReport {
        column: column.to_string(),
        n: xs.len(),
        mean_a: mean(&xs),
        mean_b: mean(&ys),
        test: paired_test(&xs, &ys)?,
    };
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        cfg.write_to(dir)?;
        write_json(&dir.join("compare.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
