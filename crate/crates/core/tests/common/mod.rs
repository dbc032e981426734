//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tagrec::encoder::EncoderConfig;
use tagrec::ingest::DecomposedPost;
use tagrec::model::{Component, ComponentLengths, EncodedPost, ModelConfig, PaddingMode, TripletModel};
use tagrec::synth::{generate, SynthConfig};
use tagrec::tensor::{GradStore, Graph, ParamStore};
use tagrec::train::bce_graph;
use tagrec::vocab::{build_tag_vocab, Tokenizer};

/// Layer norm, GELU and attention written out with plain loops over
/// parameters looked up by name.
pub fn brute_force_hidden(
    params: &ParamStore<f64>,
    prefix: &str,
    layers: usize,
    heads: usize,
    ids: &[u32],
    mask: &[bool],
) -> Vec<Vec<f64>> {
    let p = |name: &str| params.get(params.find(&format!("{prefix}.{name}")).unwrap()).data();
    let d = p("ln_f.gain").len();
    let n = ids.len();
    let row = |t: &[f64], r: usize| t[r * d..(r + 1) * d].to_vec();
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let a = row(p("tok_emb"), ids[i] as usize);
            let b = row(p("pos_emb"), i);
            a.iter().zip(&b).map(|(u, v)| u + v).collect()
        })
        .collect();
    let ln = |v: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / v.len() as f64;
        v.iter()
            .enumerate()
            .map(|(i, a)| (a - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
            .collect()
    };
    let lin = |v: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
        let out = b.len();
        (0..out)
            .map(|o| b[o] + v.iter().enumerate().map(|(i, a)| a * w[i * out + o]).sum::<f64>())
            .collect()
    };
    let gelu = |a: f64| 0.5 * a * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (a + 0.044715 * a * a * a)).tanh());
    let dh = d / heads;
    for l in 0..layers {
        let q = |s: &str| format!("layer{l}.{s}");
        let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, p(&q("ln1.gain")), p(&q("ln1.bias")))).collect();
        let qs: Vec<Vec<f64>> = h.iter().map(|r| lin(r, p(&q("wq")), p(&q("bq")))).collect();
        let ks: Vec<Vec<f64>> = h.iter().map(|r| lin(r, p(&q("wk")), p(&q("bk")))).collect();
        let vs: Vec<Vec<f64>> = h.iter().map(|r| lin(r, p(&q("wv")), p(&q("bv")))).collect();
        for i in 0..n {
            let mut o = vec![0.0; d];
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        if !mask[j] {
                            return f64::NEG_INFINITY;
                        }
                        cols.clone().map(|c| qs[i][c] * ks[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..n {
                    for c in cols.clone() {
                        o[c] += e[j] / z * vs[j][c];
                    }
                }
            }
            let a = lin(&o, p(&q("wo")), p(&q("bo")));
            // q, k and v were computed up front, so updating row i in place is safe
            x[i] = x[i].iter().zip(&a).map(|(u, v)| u + v).collect();
        }
        for r in x.iter_mut() {
            let h2 = ln(r, p(&q("ln2.gain")), p(&q("ln2.bias")));
            let f: Vec<f64> = lin(&h2, p(&q("w1")), p(&q("b1"))).into_iter().map(gelu).collect();
            let f = lin(&f, p(&q("w2")), p(&q("b2")));
            *r = r.iter().zip(&f).map(|(u, v)| u + v).collect();
        }
    }
    x.iter().map(|r| ln(r, p("ln_f.gain"), p("ln_f.bias"))).collect()
}

/// Redraws every parameter so that no gradient is trivially small:
/// N(0, std) everywhere, gains around 1.
pub fn scramble(params: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let is_gain = params.name(id).ends_with(".gain");
        for v in params.get_mut(id).data_mut() {
            *v = normal.sample(&mut rng) + if is_gain { 1.0 } else { 0.0 };
        }
    }
}

pub fn gradcheck_model() -> (TripletModel<f64>, Vec<(EncodedPost, Vec<f64>)>) {
    let posts: Vec<DecomposedPost> = generate(&SynthConfig {
        posts: 3,
        tags: 5,
        tags_per_post: 2,
        seed: 21,
        ..SynthConfig::default()
    });
    let vocab = build_tag_vocab(&posts, 1).unwrap();
    let cfg = ModelConfig {
        components: Component::ALL.to_vec(),
        encoder: EncoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            max_positions: 16,
            dropout_rate: 0.0,
            vocab_size: 260,
        },
        num_tags: vocab.len(),
        max_len: ComponentLengths {
            title: 8,
            description: 12,
            code: 12,
        },
        seed: 2,
        ..ModelConfig::default()
    };
    let mut model = TripletModel::<f64>::new(cfg, vocab).unwrap();
    scramble(model.params_mut(), 0.3, 8);
    let tok = Tokenizer::byte_level();
    let batch = posts
        .iter()
        .map(|p| {
            let targets = model.vocab().targets(&p.tags).into_iter().map(f64::from).collect();
            (model.encode(&tok, p), targets)
        })
        .collect();
    (model, batch)
}

fn batch_loss(model: &TripletModel<f64>, batch: &[(EncodedPost, Vec<f64>)], grads: Option<&mut GradStore<f64>>) -> f64 {
    let mut total = 0.0;
    let mut grads = grads;
    for (input, y) in batch {
        let mut g = Graph::new(model.params());
        let probs = model.forward_graph(&mut g, input, PaddingMode::Trimmed).unwrap();
        let l = bce_graph(&mut g, probs, y, batch.len()).unwrap();
        total += g.value(l)[0];
        if let Some(gs) = grads.as_deref_mut() {
            g.backward(l, gs).unwrap();
        }
    }
    total
}

pub struct GradCheck {
    pub checked: usize,
    pub failures: Vec<String>,
    /// Over gradients larger than 1e-4, where the ratio is meaningful.
    pub max_rel: f64,
    pub max_abs_grad: f64,
}

/// Central differences with step `h` against back-propagation, for every
/// element of every parameter.
pub fn full_gradient_check(h: f64, rel_tol: f64, abs_floor: f64) -> GradCheck {
    let (mut model, batch) = gradcheck_model();
    let mut grads = GradStore::new(model.params());
    batch_loss(&model, &batch, Some(&mut grads));
    let mut out = GradCheck {
        checked: 0,
        failures: Vec::new(),
        max_rel: 0.0,
        max_abs_grad: 0.0,
    };
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let analytic = grads
            .grad(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; model.params().get(id).numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let plus = batch_loss(&model, &batch, None);
            model.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let minus = batch_loss(&model, &batch, None);
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let diff = (a - numeric).abs();
            out.max_abs_grad = out.max_abs_grad.max(a.abs());
            out.checked += 1;
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-4 {
                out.max_rel = out.max_rel.max(diff / scale);
            }
            if diff > abs_floor && diff / scale > rel_tol {
                out.failures.push(format!(
                    "{}[{i}]: analytic {a:e} numeric {numeric:e}",
                    model.params().name(id)
                ));
            }
        }
    }
    out
}
