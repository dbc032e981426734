//! Finite-difference checks for every primitive (64-bit, central differences).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

const H: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-6;

type BuildFn = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>;

/// Reduces an arbitrary node to a scalar with fixed random weights so that
/// every output entry contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.dims(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::<f64>::randn(vec![r, c], 1.0, &mut rng);
    let wv = g.constant(r, c, w.data().to_vec())?;
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn check(shapes: &[Vec<usize>], build: &BuildFn) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), Tensor::randn(s.clone(), 1.0, &mut rng)))
        .collect();

    let eval = |store: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let y = build(&mut g, &vars).unwrap();
        let loss = weighted_sum(&mut g, y, 99).unwrap();
        g.value(loss)[0]
    };

    let mut grads = GradStore::new(&store);
    {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let y = build(&mut g, &vars).unwrap();
        let loss = weighted_sum(&mut g, y, 99).unwrap();
        g.backward(loss, &mut grads).unwrap();
    }

    for &id in &ids {
        let numel = store.get(id).numel();
        for k in 0..numel {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + H;
            let up = eval(&store);
            store.get_mut(id).data_mut()[k] = orig - H;
            let down = eval(&store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = grads.grad(id).map_or(0.0, |g| g[k]);
            let diff = (numeric - analytic).abs();
            let scale = numeric.abs().max(analytic.abs());
            assert!(
                diff <= ABS_FLOOR || diff / scale <= REL_TOL,
                "param {} entry {k}: analytic {analytic} vs numeric {numeric}",
                store.name(id)
            );
        }
    }
}

#[test]
fn matmul_grad() {
    check(&[vec![3, 4], vec![4, 2]], &|g, v| g.matmul(v[0], v[1]));
}

#[test]
fn matmul_t_grad() {
    check(&[vec![3, 4], vec![5, 4]], &|g, v| g.matmul_t(v[0], v[1]));
}

#[test]
fn add_mul_bias_grad() {
    check(&[vec![2, 3], vec![2, 3], vec![3]], &|g, v| {
        let a = g.add(v[0], v[1])?;
        let m = g.mul(a, v[0])?;
        g.add_bias(m, v[2])
    });
}

#[test]
fn softmax_grad() {
    check(&[vec![3, 5]], &|g, v| g.softmax_rows(v[0]));
}

#[test]
fn softmax_with_neg_inf_mask_grad() {
    check(&[vec![2, 4]], &|g, v| {
        let inf = f64::NEG_INFINITY;
        let bias = g.constant(2, 4, vec![0.0, 0.0, inf, inf, 0.0, 0.0, inf, inf])?;
        let s = g.add(v[0], bias)?;
        g.softmax_rows(s)
    });
}

#[test]
fn layer_norm_grad() {
    check(&[vec![3, 6], vec![6], vec![6]], &|g, v| g.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn gelu_grad() {
    check(&[vec![4, 4]], &|g, v| Ok(g.gelu(v[0])));
}

#[test]
fn embedding_grad() {
    check(&[vec![5, 3]], &|g, v| g.embedding(v[0], &[4, 0, 4, 2]));
}

#[test]
fn masked_mean_and_max_grad() {
    check(&[vec![4, 3]], &|g, v| {
        let mask = [true, false, true, true];
        let a = g.masked_mean(v[0], &mask)?;
        let b = g.masked_max(v[0], &mask)?;
        let c = g.select_row(v[0], 1)?;
        g.concat_cols(&[a, b, c])
    });
}

#[test]
fn slice_and_concat_grad() {
    check(&[vec![2, 6], vec![2, 2]], &|g, v| {
        let a = g.slice_cols(v[0], 1, 3)?;
        let b = g.slice_cols(v[0], 4, 2)?;
        g.concat_cols(&[b, v[1], a])
    });
}

#[test]
fn sigmoid_log_clamp_grad() {
    check(&[vec![3, 3]], &|g, v| {
        let s = g.sigmoid(v[0]);
        let c = g.clamp(s, 1e-7, 1.0 - 1e-7);
        let one_minus = g.affine(c, -1.0, 1.0);
        let a = g.log(c);
        let b = g.log(one_minus);
        g.add(a, b)
    });
}

#[test]
fn matmul_identity() {
    let mut store = ParamStore::<f32>::new();
    let a = store.add(
        "a",
        Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
    );
    let mut eye = Tensor::zeros(vec![3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let i = store.add("i", eye);
    let mut g = Graph::new(&store);
    let (av, iv) = (g.param(a), g.param(i));
    let y = g.matmul(av, iv).unwrap();
    assert_eq!(g.value(y), store.get(a).data());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f32>::new();
    let x = store.add("x", Tensor::randn(vec![8, 17], 5.0, &mut rng));
    let mut g = Graph::new(&store);
    let xv = g.param(x);
    let y = g.softmax_rows(xv).unwrap();
    for row in g.value(y).chunks(17) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
    }
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut store = ParamStore::<f32>::new();
    let a = store.add("a", Tensor::zeros(vec![2, 3]));
    let b = store.add("b", Tensor::zeros(vec![2, 3]));
    let mut g = Graph::new(&store);
    let (av, bv) = (g.param(a), g.param(b));
    let err = g.matmul(av, bv).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
}

#[test]
fn backward_sum_gives_ones() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::from_vec(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    let mut grads = GradStore::new(&store);
    let mut g = Graph::new(&store);
    let xv = g.param(x);
    let s = g.sum(xv);
    g.backward(s, &mut grads).unwrap();
    assert_eq!(grads.grad(x).unwrap(), &[1.0; 4]);
}

#[test]
fn backward_sum_of_squares() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
    let mut grads = GradStore::new(&store);
    let mut g = Graph::new(&store);
    let xv = g.param(x);
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq);
    g.backward(s, &mut grads).unwrap();
    assert_eq!(grads.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn fan_out_accumulates() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::from_vec(vec![1], vec![3.0]).unwrap());
    let mut grads = GradStore::new(&store);
    let mut g = Graph::new(&store);
    let xv = g.param(x);
    let y = g.add(xv, xv).unwrap();
    let s = g.sum(y);
    g.backward(s, &mut grads).unwrap();
    assert_eq!(grads.grad(x).unwrap(), &[2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::zeros(vec![2, 2]));
    let mut grads = GradStore::new(&store);
    let mut g = Graph::new(&store);
    let xv = g.param(x);
    let y = g.gelu(xv);
    assert_eq!(
        g.backward(y, &mut grads).unwrap_err(),
        TensorError::NotScalar(vec![2, 2])
    );
}

#[test]
fn frozen_leaf_gets_no_grad() {
    let mut store = ParamStore::<f64>::new();
    let mut t = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
    t.requires_grad = false;
    let x = store.add("x", t);
    let mut grads = GradStore::new(&store);
    let mut g = Graph::new(&store);
    let xv = g.param(x);
    let s = g.sum(xv);
    g.backward(s, &mut grads).unwrap();
    assert!(grads.grad(x).is_none());
}
