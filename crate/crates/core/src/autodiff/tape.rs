//! Reverse-mode tape.
//!
//! Operations are recorded in evaluation order; [`Tape::backward_into`] walks
//! them in reverse and accumulates gradients of every trainable leaf into a
//! caller-owned slot buffer. Leaves borrow their values, so building a tape
//! over a model's parameters does not copy them.

use std::borrow::Cow;

use super::{AutodiffError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv1d { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    AddRowBias(Var, Var),
    AddColBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Softmax { x: Var, axis: usize },
    Mse(Var, Var),
    CosineDistance(Var, Var),
    Sum(Var),
    SumSquares(Var),
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    /// Gradient slot of a trainable leaf.
    slot: Option<usize>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    slot_sizes: Vec<usize>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(AutodiffError::Shape(msg))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of trainable leaves registered so far.
    pub fn n_slots(&self) -> usize {
        self.slot_sizes.len()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Trainable leaf borrowing `t`; its gradient lands in slot `n_slots()`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), true)
    }

    /// Trainable leaf owning its values.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.leaf(shape, Cow::Owned(t.into_data()), true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.leaf(shape, Cow::Owned(t.into_data()), false)
    }

    pub fn constant_slice(&mut self, shape: Vec<usize>, data: &'a [f64]) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return shape_err(format!("shape {shape:?} for {} values", data.len()));
        }
        Ok(self.leaf(shape, Cow::Borrowed(data), false))
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, trainable: bool) -> Var {
        let slot = trainable.then(|| {
            self.slot_sizes.push(value.len());
            self.slot_sizes.len() - 1
        });
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            slot,
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            slot: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => shape_err(format!("{what}: expected a 2-D tensor, got {s:?}")),
        }
    }

    /// Same-padded 1-D cross-correlation: `x [C_in, T]`, `w [C_out, C_in, K]`
    /// with odd `K`, `b [C_out]`, output `[C_out, T]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (c_in, t) = self.dims2(x, "conv1d input")?;
        let (c_out, wc_in, k) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            s => return shape_err(format!("conv1d kernel must be 3-D, got {s:?}")),
        };
        if wc_in != c_in {
            return shape_err(format!("conv1d: input has {c_in} channels, kernel expects {wc_in}"));
        }
        if k % 2 == 0 {
            return shape_err(format!("conv1d: kernel size {k} must be odd"));
        }
        if self.shape(b) != [c_out] {
            return shape_err(format!("conv1d: bias shape {:?}, expected [{c_out}]", self.shape(b)));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; c_out * t];
        for co in 0..c_out {
            let row = &mut out[co * t..(co + 1) * t];
            row.fill(bv[co]);
            for ci in 0..c_in {
                let xrow = &xv[ci * t..(ci + 1) * t];
                for kk in 0..k {
                    let wk = wv[(co * c_in + ci) * k + kk];
                    let (t0, t1, shift) = conv_range(t, kk as isize - pad);
                    let src = &xrow[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                    for (o, s) in row[t0..t1].iter_mut().zip(src) {
                        *o += wk * s;
                    }
                }
            }
        }
        Ok(self.push(vec![c_out, t], out, Op::Conv1d { x, w, b }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Sigmoid(x), &[x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, c), &[x])
    }

    /// `[n, k] × [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul lhs")?;
        let (k2, m) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return shape_err(format!("matmul: [{n}, {k}] x [{k2}, {m}]"));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(self.value(a), self.value(b), &mut out, n, k, m);
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `[n, k] × [m, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul_nt lhs")?;
        let (m, k2) = self.dims2(b, "matmul_nt rhs")?;
        if k != k2 {
            return shape_err(format!("matmul_nt: [{n}, {k}] x [{m}, {k2}]^T"));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(vec![n, m], out, Op::MatMulNt(a, b), &[a, b]))
    }

    /// `[k, n]ᵀ × [k, m]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, n) = self.dims2(a, "matmul_tn lhs")?;
        let (k2, m) = self.dims2(b, "matmul_tn rhs")?;
        if k != k2 {
            return shape_err(format!("matmul_tn: [{k}, {n}]^T x [{k2}, {m}]"));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let brow = &bv[p * m..(p + 1) * m];
            for i in 0..n {
                let a_pi = av[p * n + i];
                if a_pi != 0.0 {
                    axpy(a_pi, brow, &mut out[i * m..(i + 1) * m]);
                }
            }
        }
        Ok(self.push(vec![n, m], out, Op::MatMulTn(a, b), &[a, b]))
    }

    /// Adds `b [n]` to every column of `x [n, m]`: `out[i, j] = x[i, j] + b[i]`.
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims2(x, "add_col_bias")?;
        if self.shape(b) != [n] {
            return shape_err(format!("add_col_bias: bias {:?} for {n} rows", self.shape(b)));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for (row, &bi) in out.chunks_exact_mut(m).zip(bv) {
            row.iter_mut().for_each(|o| *o += bi);
        }
        Ok(self.push(vec![n, m], out, Op::AddColBias(x, b), &[x, b]))
    }

    /// Adds `b [m]` to every row of `x [n, m]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims2(x, "add_row_bias")?;
        if self.shape(b) != [m] {
            return shape_err(format!("add_row_bias: bias {:?} for rows of {m}", self.shape(b)));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(m) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(vec![n, m], out, Op::AddRowBias(x, b), &[x, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let out = transposed(self.value(x), r, c);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return shape_err(format!("reshape {:?} -> {shape:?}", self.shape(x)));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x), &[x]))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols of nothing".into());
        };
        let (n, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != n {
                return shape_err(format!("concat_cols: {r} rows vs {n}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for i in 0..n {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(vec![n, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows of nothing".into());
        };
        let (_, m) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != m {
                return shape_err(format!("concat_rows: {c} columns vs {m}"));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * m);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, m], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Softmax along `axis` of a 1-D or 2-D tensor, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, stride) = self.softmax_layout(x, axis)?;
        let xv = self.value(x);
        let mut out = xv.to_vec();
        if stride == 1 {
            for row in out.chunks_exact_mut(len) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|v| *v = (*v - max).exp());
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
            }
        } else {
            // columns of a [len, outer] matrix, swept row by row
            let mut max = vec![f64::NEG_INFINITY; outer];
            for row in out.chunks_exact(outer) {
                max.iter_mut().zip(row).for_each(|(m, &v)| *m = m.max(v));
            }
            let mut sum = vec![0.0; outer];
            for row in out.chunks_exact_mut(outer) {
                for ((v, m), s) in row.iter_mut().zip(&max).zip(sum.iter_mut()) {
                    *v = (*v - m).exp();
                    *s += *v;
                }
            }
            for row in out.chunks_exact_mut(outer) {
                row.iter_mut().zip(&sum).for_each(|(v, s)| *v /= s);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax { x, axis }, &[x]))
    }

    /// (number of independent vectors, vector length, element stride).
    fn softmax_layout(&self, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        match (self.shape(x), axis) {
            ([n], 0) => Ok((1, *n, 1)),
            ([r, c], 1) => Ok((*r, *c, 1)),
            ([r, c], 0) => Ok((*c, *r, *c)),
            (s, a) => shape_err(format!("softmax over axis {a} of {s:?}")),
        }
    }

    /// Mean of squared differences, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() || self.value(a).is_empty() {
            return shape_err(format!("mse: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y).powi(2)).sum();
        Ok(self.push(vec![1], vec![s / n], Op::Mse(a, b), &[a, b]))
    }

    /// `1 − ⟨a, b⟩ / (‖a‖ ‖b‖)`, a scalar in `[0, 2]`.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return shape_err(format!("cosine_distance: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let (na, nb) = (dot(av, av).sqrt(), dot(bv, bv).sqrt());
        if na == 0.0 || nb == 0.0 {
            return Err(AutodiffError::ZeroNorm);
        }
        let d = (1.0 - dot(av, bv) / (na * nb)).clamp(0.0, 2.0);
        Ok(self.push(vec![1], vec![d], Op::CosineDistance(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v * v).sum();
        self.push(vec![1], vec![s], Op::SumSquares(x), &[x])
    }

    /// Gradients of a scalar `loss` for every trainable leaf, indexed by slot.
    pub fn backward(&self, loss: Var) -> Result<Vec<Vec<f64>>> {
        let mut sinks: Vec<Vec<f64>> = self.slot_sizes.iter().map(|&n| vec![0.0; n]).collect();
        self.backward_into(loss, 1.0, &mut sinks)?;
        Ok(sinks)
    }

    /// Adds `seed · ∂loss/∂leaf` into `sinks[slot]` for every trainable leaf.
    pub fn backward_into(&self, loss: Var, seed: f64, sinks: &mut [Vec<f64>]) -> Result<()> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        if sinks.len() != self.slot_sizes.len() {
            return shape_err(format!("{} sinks for {} slots", sinks.len(), self.slot_sizes.len()));
        }
        for (s, &n) in sinks.iter().zip(&self.slot_sizes) {
            if s.len() != n {
                return shape_err(format!("sink of {} values for a slot of {n}", s.len()));
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.shape, &node.value, g, &mut grads, sinks);
        }
        Ok(())
    }

    fn propagate(
        &self,
        op: &Op,
        out_shape: &[usize],
        out: &[f64],
        g_owned: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        sinks: &mut [Vec<f64>],
    ) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let g = &g_owned[..];
        macro_rules! target {
            ($v:expr) => {
                grad_target(nodes, grads, sinks, $v)
            };
        }
        macro_rules! give {
            ($v:expr, $buf:expr) => {
                give_grad(nodes, grads, sinks, $v, $buf)
            };
        }
        match op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b } => {
                let (c_in, t) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let (c_out, k) = (nodes[w.0].shape[0], nodes[w.0].shape[2]);
                let pad = (k / 2) as isize;
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                if wants(*b) {
                    let db = target!(*b);
                    for co in 0..c_out {
                        db[co] += g[co * t..(co + 1) * t].iter().sum::<f64>();
                    }
                }
                if wants(*w) {
                    let dw = target!(*w);
                    for co in 0..c_out {
                        let grow = &g[co * t..(co + 1) * t];
                        for ci in 0..c_in {
                            let xrow = &xv[ci * t..(ci + 1) * t];
                            for kk in 0..k {
                                let (t0, t1, shift) = conv_range(t, kk as isize - pad);
                                let src = &xrow[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                                dw[(co * c_in + ci) * k + kk] += dot(&grow[t0..t1], src);
                            }
                        }
                    }
                }
                if wants(*x) {
                    let dx = target!(*x);
                    for co in 0..c_out {
                        let grow = &g[co * t..(co + 1) * t];
                        for ci in 0..c_in {
                            let drow = &mut dx[ci * t..(ci + 1) * t];
                            for kk in 0..k {
                                let wk = wv[(co * c_in + ci) * k + kk];
                                let (t0, t1, shift) = conv_range(t, kk as isize - pad);
                                let dst = &mut drow[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                                for (d, gv) in dst.iter_mut().zip(&grow[t0..t1]) {
                                    *d += wk * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let mut dx = g_owned;
                for (d, &o) in dx.iter_mut().zip(out) {
                    if !(o > 0.0) {
                        *d = 0.0;
                    }
                }
                give!(*x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g_owned;
                for (d, &o) in dx.iter_mut().zip(out) {
                    *d *= o * (1.0 - o);
                }
                give!(*x, dx);
            }
            Op::Add(a, b) => match (wants(*a), wants(*b)) {
                (true, true) => {
                    give!(*a, g_owned.clone());
                    give!(*b, g_owned);
                }
                (true, false) => give!(*a, g_owned),
                (false, true) => give!(*b, g_owned),
                (false, false) => {}
            },
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    let da: Vec<f64> = g.iter().zip(bv.iter()).map(|(gv, bv)| gv * bv).collect();
                    give!(*a, da);
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    let mut db = g_owned;
                    db.iter_mut().zip(av.iter()).for_each(|(d, av)| *d *= av);
                    give!(*b, db);
                }
            }
            Op::Scale(x, c) => {
                let mut dx = g_owned;
                dx.iter_mut().for_each(|d| *d *= c);
                give!(*x, dx);
            }
            Op::MatMul(a, b) => {
                let (n, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let m = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    // dA = G Bᵀ
                    let da = target!(*a);
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            da[i * k + p] += dot(grow, &bv[p * m..(p + 1) * m]);
                        }
                    }
                }
                if wants(*b) {
                    // dB = Aᵀ G
                    let db = target!(*b);
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip != 0.0 {
                                axpy(a_ip, grow, &mut db[p * m..(p + 1) * m]);
                            }
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let m = nodes[b.0].shape[0];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    // dA = G B
                    let da = target!(*a);
                    matmul_acc(g, bv, da, n, m, k);
                }
                if wants(*b) {
                    // dB = Gᵀ A
                    let db = target!(*b);
                    for i in 0..n {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij != 0.0 {
                                axpy(gij, arow, &mut db[j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
            }
            Op::MatMulTn(a, b) => {
                let (k, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let m = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    // dA[p, i] = <g[i, :], B[p, :]>
                    let da = target!(*a);
                    for p in 0..k {
                        let brow = &bv[p * m..(p + 1) * m];
                        for i in 0..n {
                            da[p * n + i] += dot(&g[i * m..(i + 1) * m], brow);
                        }
                    }
                }
                if wants(*b) {
                    // dB = A G
                    let db = target!(*b);
                    matmul_acc(av, g, db, k, n, m);
                }
            }
            Op::AddColBias(x, b) => {
                let m = out_shape[1];
                if wants(*b) {
                    let db = target!(*b);
                    for (d, row) in db.iter_mut().zip(g.chunks_exact(m)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
                if wants(*x) {
                    give!(*x, g_owned);
                }
            }
            Op::AddRowBias(x, b) => {
                let m = out_shape[1];
                if wants(*b) {
                    let db = target!(*b);
                    for row in g.chunks_exact(m) {
                        add_into(db, row);
                    }
                }
                if wants(*x) {
                    give!(*x, g_owned);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let dx = target!(*x);
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(x) => give!(*x, g_owned),
            Op::ConcatCols(parts) => {
                let n = out_shape[0];
                let total = out_shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    if wants(p) {
                        let dp = target!(p);
                        for i in 0..n {
                            add_into(&mut dp[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(p) {
                        give!(p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, stride) = self.softmax_layout(*x, *axis).expect("validated on forward");
                let dx = target!(*x);
                if stride == 1 {
                    for ((drow, grow), orow) in dx.chunks_exact_mut(len).zip(g.chunks_exact(len)).zip(out.chunks_exact(len)) {
                        let s = dot(grow, orow);
                        for ((d, gv), o) in drow.iter_mut().zip(grow).zip(orow) {
                            *d += o * (gv - s);
                        }
                    }
                } else {
                    let mut s = vec![0.0; outer];
                    for (grow, orow) in g.chunks_exact(outer).zip(out.chunks_exact(outer)) {
                        for ((acc, gv), o) in s.iter_mut().zip(grow).zip(orow) {
                            *acc += gv * o;
                        }
                    }
                    for ((drow, grow), orow) in dx.chunks_exact_mut(outer).zip(g.chunks_exact(outer)).zip(out.chunks_exact(outer)) {
                        for (((d, gv), o), sj) in drow.iter_mut().zip(grow).zip(orow).zip(&s) {
                            *d += o * (gv - sj);
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let c = 2.0 * g[0] / av.len() as f64;
                if wants(*a) {
                    let da = target!(*a);
                    for ((d, x), y) in da.iter_mut().zip(av.iter()).zip(bv.iter()) {
                        *d += c * (x - y);
                    }
                }
                if wants(*b) {
                    let db = target!(*b);
                    for ((d, x), y) in db.iter_mut().zip(av.iter()).zip(bv.iter()) {
                        *d -= c * (x - y);
                    }
                }
            }
            Op::CosineDistance(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (na, nb) = (dot(av, av).sqrt(), dot(bv, bv).sqrt());
                let ab = dot(av, bv);
                // d/da (−⟨a,b⟩/(|a||b|)) = −b/(|a||b|) + ⟨a,b⟩ a/(|a|³|b|)
                if wants(*a) {
                    let da = target!(*a);
                    for ((d, x), y) in da.iter_mut().zip(av.iter()).zip(bv.iter()) {
                        *d += g[0] * (-y / (na * nb) + ab * x / (na.powi(3) * nb));
                    }
                }
                if wants(*b) {
                    let db = target!(*b);
                    for ((d, x), y) in db.iter_mut().zip(av.iter()).zip(bv.iter()) {
                        *d += g[0] * (-x / (na * nb) + ab * y / (nb.powi(3) * na));
                    }
                }
            }
            Op::Sum(x) => {
                let dx = target!(*x);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SumSquares(x) => {
                let xv = &nodes[x.0].value;
                let dx = target!(*x);
                for (d, v) in dx.iter_mut().zip(xv.iter()) {
                    *d += 2.0 * g[0] * v;
                }
            }
        }
    }
}

/// Adds `g` to the gradient of `v`, adopting the buffer when `v` has none yet.
fn give_grad(nodes: &[Node<'_>], grads: &mut [Option<Vec<f64>>], sinks: &mut [Vec<f64>], v: Var, g: Vec<f64>) {
    match nodes[v.0].slot {
        Some(slot) => add_into(&mut sinks[slot], &g),
        None => match &mut grads[v.0] {
            Some(acc) => add_into(acc, &g),
            empty => *empty = Some(g),
        },
    }
}

/// Gradient buffer for `v`: the caller's sink for trainable leaves, a lazily
/// zeroed per-node buffer otherwise.
fn grad_target<'g>(
    nodes: &[Node<'_>],
    grads: &'g mut [Option<Vec<f64>>],
    sinks: &'g mut [Vec<f64>],
    v: Var,
) -> &'g mut [f64] {
    match nodes[v.0].slot {
        Some(slot) => &mut sinks[slot],
        None => grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Output index range `[t0, t1)` for which `t + shift` stays inside `[0, t)`.
fn conv_range(t: usize, shift: isize) -> (usize, usize, isize) {
    let t0 = (-shift).max(0) as usize;
    let t1 = (t as isize - shift).min(t as isize).max(t0 as isize) as usize;
    (t0.min(t1), t1, shift)
}

/// Four interleaved partial sums: fixed order, but no single dependency chain.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out += A [n, k] · B [k, m]`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip != 0.0 {
                axpy(a_ip, &b[p * m..(p + 1) * m], orow);
            }
        }
    }
}

fn transposed(v: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = v[i * c + j];
        }
    }
    out
}
