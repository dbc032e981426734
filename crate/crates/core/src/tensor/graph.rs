use super::{GradStore, ParamId, ParamStore, Result, Scalar, TensorError};

/// A value on the tape: either a bound parameter or a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    Param(ParamId),
    Node(usize),
}

#[derive(Debug)]
enum Op<F> {
    Constant,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Affine(Var, F),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedMean {
        x: Var,
        rows: Vec<usize>,
    },
    MaskedMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SelectRow {
        x: Var,
        row: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sigmoid(Var),
    Log(Var),
    Clamp {
        x: Var,
        lo: F,
        hi: F,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<F> {
    rows: usize,
    cols: usize,
    value: Vec<F>,
    op: Op<F>,
}

const LN_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044715;

/// Operation tape for one forward pass. Nodes are appended in evaluation
/// order, so the node list is already topologically sorted.
pub struct Graph<'p, F: Scalar> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
}

fn dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => {
            let c = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), c)
        }
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.0 < self.params.len(), "unknown parameter {id:?}");
        Var::Param(id)
    }

    /// A non-differentiable input of shape `[rows, cols]`.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "constant",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(self.push(rows, cols, data, Op::Constant))
    }

    pub fn value(&self, v: Var) -> &[F] {
        match v {
            Var::Param(id) => self.params.get(id).data(),
            Var::Node(i) => &self.nodes[i].value,
        }
    }

    /// `(rows, cols)`; 1-D parameters read as a single row.
    pub fn dims(&self, v: Var) -> (usize, usize) {
        match v {
            Var::Param(id) => dims(self.params.get(id).shape()),
            Var::Node(i) => (self.nodes[i].rows, self.nodes[i].cols),
        }
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        match v {
            Var::Param(id) => self.params.get(id).shape().to_vec(),
            Var::Node(i) => vec![self.nodes[i].rows, self.nodes[i].cols],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op<F>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op });
        Var::Node(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.shape(a),
            right: self.shape(b),
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            F::zero(),
            &mut out,
        );
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (1, k as isize),
            F::zero(),
            &mut out,
        );
        Ok(self.push(m, n, out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(b) != (m, n) {
            return Err(self.mismatch("add", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(m, n, out, Op::Add(a, b)))
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(bias).len() != n {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        Ok(self.push(m, n, out, Op::AddBias(x, bias)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(b) != (m, n) {
            return Err(self.mismatch("mul", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(m, n, out, Op::Mul(a, b)))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Var {
        let (m, n) = self.dims(x);
        let out = self.value(x).iter().map(|&v| scale * v + shift).collect();
        self.push(m, n, out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        self.affine(x, s, F::zero())
    }

    /// Row-wise softmax with max subtraction. Entries equal to `-inf` get
    /// probability zero; every row needs at least one finite entry.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            if max == F::neg_infinity() {
                return Err(TensorError::InvalidArgument {
                    op: "softmax_rows",
                    msg: "row has no finite entry".into(),
                });
            }
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        Ok(self.push(m, n, out, Op::SoftmaxRows(x)))
    }

    /// Normalizes over the last axis (eps 1e-5), then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.value(beta).len() != n {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let eps = F::lit(LN_EPS);
        let nf = F::from_usize(n).unwrap();
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xs.chunks(n) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        Ok(self.push(
            m,
            n,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
        let a = F::lit(GELU_COEF);
        let half = F::lit(0.5);
        let out = self
            .value(x)
            .iter()
            .map(|&v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        self.push(m, n, out, Op::Gelu(x))
    }

    /// Gathers rows of `table` (shape `[vocab, d]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                msg: format!("id {bad} out of range for table of {v} rows"),
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            ids.len(),
            d,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean over the rows where `mask` is true; returns `[1, cols]`.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims(x);
        let rows = self.check_mask("masked_mean", m, mask)?;
        let denom = F::from_usize(rows.len()).unwrap();
        let xs = self.value(x);
        let mut out = vec![F::zero(); n];
        for &r in &rows {
            for (o, &v) in out.iter_mut().zip(&xs[r * n..(r + 1) * n]) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|o| *o = *o / denom);
        Ok(self.push(1, n, out, Op::MaskedMean { x, rows }))
    }

    /// Column-wise maximum over the rows where `mask` is true.
    pub fn masked_max(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims(x);
        let rows = self.check_mask("masked_max", m, mask)?;
        let xs = self.value(x);
        let mut argmax = vec![rows[0]; n];
        for &r in &rows[1..] {
            for (j, a) in argmax.iter_mut().enumerate() {
                if xs[r * n + j] > xs[*a * n + j] {
                    *a = r;
                }
            }
        }
        let out = argmax.iter().enumerate().map(|(j, &r)| xs[r * n + j]).collect();
        Ok(self.push(1, n, out, Op::MaskedMax { x, argmax }))
    }

    fn check_mask(&self, op: &'static str, m: usize, mask: &[bool]) -> Result<Vec<usize>> {
        if mask.len() != m {
            return Err(TensorError::ShapeMismatch {
                op,
                left: vec![m],
                right: vec![mask.len()],
            });
        }
        let rows: Vec<usize> = (0..m).filter(|&r| mask[r]).collect();
        if rows.is_empty() {
            return Err(TensorError::InvalidArgument {
                op,
                msg: "no unmasked positions".into(),
            });
        }
        Ok(rows)
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if row >= m {
            return Err(TensorError::InvalidArgument {
                op: "select_row",
                msg: format!("row {row} out of range for {m} rows"),
            });
        }
        let out = self.value(x)[row * n..(row + 1) * n].to_vec();
        Ok(self.push(1, n, out, Op::SelectRow { x, row }))
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidArgument {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        };
        let m = self.dims(first).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.dims(p).0 != m) {
            return Err(self.mismatch("concat_cols", first, bad));
        }
        let n: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                let w = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(m, n, out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for width {n}", start + len),
            });
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xs[r * n + start..r * n + start + len]);
        }
        Ok(self.push(m, len, out, Op::SliceCols { x, start }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out = self
            .value(x)
            .iter()
            .map(|&v| F::one() / (F::one() + (-v).exp()))
            .collect();
        self.push(m, n, out, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out = self.value(x).iter().map(|&v| v.ln()).collect();
        self.push(m, n, out, Op::Log(x))
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let (m, n) = self.dims(x);
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v.is_nan() { v } else { v.max(lo).min(hi) })
            .collect();
        self.push(m, n, out, Op::Clamp { x, lo, hi })
    }

    /// Sum of all entries, shape `[1, 1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    /// Back-propagates from a scalar `loss`, adding parameter gradients into
    /// `grads` (sum semantics) for every parameter with `requires_grad`.
    pub fn backward(&self, loss: Var, grads: &mut GradStore<F>) -> Result<()> {
        if self.dims(loss) != (1, 1) {
            return Err(TensorError::NotScalar(self.shape(loss)));
        }
        let top = match loss {
            Var::Node(top) => top,
            Var::Param(id) => {
                if self.params.get(id).requires_grad {
                    let slot = grads.slot(id, 1);
                    slot[0] = slot[0] + F::one();
                }
                return Ok(());
            }
        };
        let mut node_grads: Vec<Option<Vec<F>>> = Vec::with_capacity(top + 1);
        node_grads.resize_with(top + 1, || None);
        node_grads[top] = Some(vec![F::one()]);

        for i in (0..=top).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            let mut sink = Sink {
                params: self.params,
                grads: &mut *grads,
                nodes: &mut node_grads,
                graph: self,
            };
            self.backward_node(i, &g, &mut sink);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[F], sink: &mut Sink<'_, 'p, F>) {
        let node = &self.nodes[i];
        let (m, n) = (node.rows, node.cols);
        match &node.op {
            Op::Constant => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.dims(*a);
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G B^T ; dB = A^T G
                sink.accumulate_with(*a, |da| {
                    F::gemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize), F::one(), da)
                });
                sink.accumulate_with(*b, |db| {
                    F::gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), F::one(), db)
                });
            }
            Op::MatMulT(a, b) => {
                let (_, k) = self.dims(*a);
                let (av, bv) = (self.value(*a), self.value(*b));
                // C = A B^T ; dA = G B ; dB = G^T A
                sink.accumulate_with(*a, |da| {
                    F::gemm(m, n, k, g, (n as isize, 1), bv, (k as isize, 1), F::one(), da)
                });
                sink.accumulate_with(*b, |db| {
                    F::gemm(n, m, k, g, (1, n as isize), av, (k as isize, 1), F::one(), db)
                });
            }
            Op::Add(a, b) => {
                sink.accumulate_with(*a, |da| add_into(da, g));
                sink.accumulate_with(*b, |db| add_into(db, g));
            }
            Op::AddBias(x, b) => {
                sink.accumulate_with(*x, |dx| add_into(dx, g));
                sink.accumulate_with(*b, |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                sink.accumulate_with(*a, |da| {
                    for ((d, &gg), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d = *d + gg * y;
                    }
                });
                sink.accumulate_with(*b, |db| {
                    for ((d, &gg), &x) in db.iter_mut().zip(g).zip(av) {
                        *d = *d + gg * x;
                    }
                });
            }
            Op::Affine(x, s) => {
                sink.accumulate_with(*x, |dx| {
                    for (d, &gg) in dx.iter_mut().zip(g) {
                        *d = *d + *s * gg;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                sink.accumulate_with(*x, |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gg), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + yy * (gg - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let nf = F::from_usize(n).unwrap();
                sink.accumulate_with(*gamma, |dg| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, &gg), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d = *d + gg * h;
                        }
                    }
                });
                sink.accumulate_with(*beta, |db| {
                    for grow in g.chunks(n) {
                        add_into(db, grow);
                    }
                });
                sink.accumulate_with(*x, |dx| {
                    let mut dh = vec![F::zero(); n];
                    for (r, (drow, grow)) in dx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let hrow = &xhat[r * n..(r + 1) * n];
                        for ((d, &gg), &gm) in dh.iter_mut().zip(grow).zip(gv) {
                            *d = gg * gm;
                        }
                        let mean_dh = dh.iter().copied().sum::<F>() / nf;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<F>() / nf;
                        for ((d, &dhj), &h) in drow.iter_mut().zip(&dh).zip(hrow) {
                            *d = *d + rstd[r] * (dhj - mean_dh - h * mean_dh_h);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xs = self.value(*x);
                let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
                let a = F::lit(GELU_COEF);
                let half = F::lit(0.5);
                let three = F::lit(3.0);
                sink.accumulate_with(*x, |dx| {
                    for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xs) {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dudx = c * (F::one() + three * a * v * v);
                        let deriv = half * (F::one() + t) + half * v * (F::one() - t * t) * dudx;
                        *d = *d + gg * deriv;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                sink.accumulate_with(*table, |dt| {
                    for (grow, &id) in g.chunks(n).zip(ids) {
                        add_into(&mut dt[id * n..(id + 1) * n], grow);
                    }
                });
            }
            Op::MaskedMean { x, rows } => {
                let inv = F::one() / F::from_usize(rows.len()).unwrap();
                sink.accumulate_with(*x, |dx| {
                    for &r in rows {
                        for (d, &gg) in dx[r * n..(r + 1) * n].iter_mut().zip(g) {
                            *d = *d + gg * inv;
                        }
                    }
                });
            }
            Op::MaskedMax { x, argmax } => {
                sink.accumulate_with(*x, |dx| {
                    for (j, &r) in argmax.iter().enumerate() {
                        dx[r * n + j] = dx[r * n + j] + g[j];
                    }
                });
            }
            Op::SelectRow { x, row } => {
                sink.accumulate_with(*x, |dx| add_into(&mut dx[row * n..(row + 1) * n], g));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    sink.accumulate_with(p, |dp| {
                        for r in 0..m {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * n + offset..r * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let width = self.dims(*x).1;
                sink.accumulate_with(*x, |dx| {
                    for r in 0..m {
                        add_into(
                            &mut dx[r * width + start..r * width + start + n],
                            &g[r * n..(r + 1) * n],
                        );
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                sink.accumulate_with(*x, |dx| {
                    for ((d, &gg), &yy) in dx.iter_mut().zip(g).zip(y) {
                        *d = *d + gg * yy * (F::one() - yy);
                    }
                });
            }
            Op::Log(x) => {
                let xs = self.value(*x);
                sink.accumulate_with(*x, |dx| {
                    for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xs) {
                        *d = *d + gg / v;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xs = self.value(*x);
                sink.accumulate_with(*x, |dx| {
                    for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xs) {
                        if v >= *lo && v <= *hi {
                            *d = *d + gg;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                sink.accumulate_with(*x, |dx| dx.iter_mut().for_each(|d| *d = *d + g[0]));
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

struct Sink<'a, 'p, F: Scalar> {
    params: &'p ParamStore<F>,
    grads: &'a mut GradStore<F>,
    nodes: &'a mut Vec<Option<Vec<F>>>,
    graph: &'a Graph<'p, F>,
}

impl<F: Scalar> Sink<'_, '_, F> {
    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&mut [F])) {
        match v {
            Var::Param(id) => {
                let t = self.params.get(id);
                if t.requires_grad {
                    f(self.grads.slot(id, t.numel()));
                }
            }
            Var::Node(j) => {
                if matches!(self.graph.nodes[j].op, Op::Constant) {
                    return;
                }
                let numel = self.graph.nodes[j].value.len();
                f(self.nodes[j].get_or_insert_with(|| vec![F::zero(); numel]));
            }
        }
    }
}
