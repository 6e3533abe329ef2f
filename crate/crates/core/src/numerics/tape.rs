//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. Nodes only
//! reference earlier nodes, so walking the tape backwards is a valid
//! topological order for the chain rule.

use super::tensor::{log_softmax_slice, matmul_into, matmul_nt_acc, matmul_tn_acc, sigmoid, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RepeatEachRow(Var, usize),
    TileRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    MeanRows(Var),
    VarRows(Var),
    SumAll(Var),
    MeanAll(Var),
    CosineRows(Var, Var),
    Mse(Var, Var),
    UnfoldTime(Var, usize),
    /// Scalar-valued function whose gradient wrt `input` was computed
    /// alongside its value.
    ScalarFn(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Computation tape. Confined to one thread; independent tapes may run
/// side by side.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims2() != b.dims2() {
        let (ar, ac) = a.dims2();
        let (br, bc) = b.dims2();
        return Err(Error::shape(
            op,
            format!("lhs (rows={ar}, cols={ac}) vs rhs (rows={br}, cols={bc})"),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = &self.nodes[a.0].value;
        let (r, c) = x.dims2();
        let data = x.data().iter().map(|&v| f(v)).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(vec![r, c], data).unwrap(), op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("lhs cols (k={k}) != rhs rows (k={k2}); lhs rows={m}, rhs cols={n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![n, m], out).unwrap(), Op::Transpose(a), rg)
    }

    /// Reinterpret the row-major data as `rows x cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a).clone().reshape(&[rows, cols])?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let (r, c) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![r, c], data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    fn row_op(&mut self, name: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let (m, n) = self.dims(a);
        let (rr, rn) = self.dims(row);
        if rr != 1 || rn != n {
            return Err(Error::shape(
                name,
                format!("row operand must be 1 x cols={n}, got rows={rr}, cols={rn}"),
            ));
        }
        Ok((m, n))
    }

    /// `a[m x n] + row[1 x n]` on every row (leading-batch broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_op("add_row", a, row)?;
        let r = self.value(row).data();
        let x = self.value(a).data();
        let data = (0..m * n).map(|i| x[i] + r[i % n]).collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(a, row), rg))
    }

    /// `a[m x n] * row[1 x n]` elementwise on every row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_op("mul_row", a, row)?;
        let r = self.value(row).data();
        let x = self.value(a).data();
        let data = (0..m * n).map(|i| x[i] * r[i % n]).collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MulRow(a, row), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(Error::shape(
                    "concat_cols",
                    format!("operand rows={r} differs from first operand rows={m}"),
                ));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![m, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::shape(
                    "concat_rows",
                    format!("operand cols={c} differs from first operand cols={n}"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, n], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, _) = self.dims(a);
        if start >= end || end > m {
            return Err(Error::shape(
                "slice_rows",
                format!("range [{start}, {end}) outside rows={m}"),
            ));
        }
        let t = self.value(a).slice_rows(start, end);
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceRows(a, start), rg))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start >= end || end > n {
            return Err(Error::shape(
                "slice_cols",
                format!("range [{start}, {end}) outside cols={n}"),
            ));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&x.row_slice(i)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, end - start], data)?, Op::SliceCols(a, start), rg))
    }

    /// Row `i` of the output is row `i / times` of `a`.
    pub fn repeat_each_row(&mut self, a: Var, times: usize) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a);
        let mut data = Vec::with_capacity(m * n * times);
        for i in 0..m {
            for _ in 0..times {
                data.extend_from_slice(x.row_slice(i));
            }
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![m * times, n], data).unwrap(),
            Op::RepeatEachRow(a, times),
            rg,
        )
    }

    /// Stack `times` copies of the whole matrix.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(m * n * times);
        for _ in 0..times {
            data.extend_from_slice(x);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![m * times, n], data).unwrap(),
            Op::TileRows(a, times),
            rg,
        )
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table);
        let x = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index {i} outside table rows={m}"),
                ));
            }
            data.extend_from_slice(x.row_slice(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], data)?,
            Op::GatherRows(table, idx.to_vec()),
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    fn rowwise(&mut self, a: Var, f: impl Fn(&[f64], &mut [f64]), op: Op) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            f(x.row_slice(i), &mut data[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![m, n], data).unwrap(), op, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.rowwise(
            a,
            |x, out| {
                log_softmax_slice(x, out);
                out.iter_mut().for_each(|v| *v = v.exp());
            },
            Op::SoftmaxRows(a),
        )
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        self.rowwise(a, log_softmax_slice, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` with population
    /// variance; affine scale/shift compose via [`Tape::mul_row`] and
    /// [`Tape::add_row`].
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        self.rowwise(
            a,
            |x, out| {
                let n = x.len() as f64;
                let mu = x.iter().sum::<f64>() / n;
                let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                for (o, v) in out.iter_mut().zip(x) {
                    *o = (v - mu) * inv;
                }
            },
            Op::LayerNormRows(a, eps),
        )
    }

    /// Column means, `1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += x[i * n + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let rg = self.rg(a);
        self.push(Tensor::row(out), Op::MeanRows(a), rg)
    }

    /// Unbiased per-column variance over rows, `1 x n`. Needs at least two rows.
    pub fn var_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m < 2 {
            return Err(Error::shape("var_rows", format!("needs rows >= 2, got rows={m}")));
        }
        let x = self.value(a).data();
        let mut mu = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                mu[j] += x[i * n + j];
            }
        }
        mu.iter_mut().for_each(|v| *v /= m as f64);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                let d = x[i * n + j] - mu[j];
                out[j] += d * d;
            }
        }
        out.iter_mut().for_each(|v| *v /= (m - 1) as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::row(out), Op::VarRows(a), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let s = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Cosine similarity of `c[1 x n]` with each row of `h[m x n]`, as an
    /// `m x 1` column. A zero-norm operand yields similarity 0.
    pub fn cosine_rows(&mut self, c: Var, h: Var) -> Result<Var> {
        let (cr, n) = self.dims(c);
        let (m, hn) = self.dims(h);
        if cr != 1 || hn != n {
            return Err(Error::shape(
                "cosine_rows",
                format!("c must be 1 x dim={hn}, got rows={cr}, dim={n}"),
            ));
        }
        let cv = self.value(c).data();
        let hv = self.value(h);
        let cn = cv.iter().map(|v| v * v).sum::<f64>().sqrt();
        let out = (0..m)
            .map(|i| cosine_parts(cv, cn, hv.row_slice(i)).0)
            .collect();
        let rg = self.rg(c) || self.rg(h);
        Ok(self.push(Tensor::new(vec![m, 1], out)?, Op::CosineRows(c, h), rg))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.value(a), self.value(b))?;
        let x = self.value(a).data();
        let y = self.value(b).data();
        let s = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// Time unfolding for 1-D convolution: row `t` of the output holds rows
    /// `t - k/2 ..= t + k/2` of `a` side by side, zero outside `[0, T)`.
    pub fn unfold_time(&mut self, a: Var, kernel: usize) -> Result<Var> {
        if kernel.is_multiple_of(2) {
            return Err(Error::shape("unfold_time", format!("kernel={kernel} must be odd")));
        }
        let (t, c) = self.dims(a);
        let half = kernel / 2;
        let x = self.value(a);
        let mut data = vec![0.0; t * kernel * c];
        for i in 0..t {
            for j in 0..kernel {
                let src = i + j;
                if src < half || src - half >= t {
                    continue;
                }
                let dst = i * kernel * c + j * c;
                data[dst..dst + c].copy_from_slice(x.row_slice(src - half));
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![t, kernel * c], data)?, Op::UnfoldTime(a, kernel), rg))
    }

    /// Record a scalar function of `input` whose value and gradient have
    /// been computed externally (fused lattice losses).
    pub fn scalar_fn(&mut self, input: Var, value: f64, d_input: Vec<f64>) -> Result<Var> {
        let n = self.value(input).len();
        if d_input.len() != n {
            return Err(Error::shape(
                "scalar_fn",
                format!("gradient length={} but input has {n} values", d_input.len()),
            ));
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn(input, d_input), rg))
    }

    /// Back-propagate from a scalar root. Leaf gradients accumulate, so two
    /// calls from the same root double them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        // Accumulate into a parent's gradient buffer, skipping constants.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).cols();
                acc(*a, &mut |ga| matmul_nt_acc(g, val(*b).data(), m, k, n, ga));
                acc(*b, &mut |gb| matmul_tn_acc(val(*a).data(), g, m, k, n, gb));
            }
            Op::Transpose(a) => {
                let (m, n) = val(*a).dims2();
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * y[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * x[k];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::AddRow(a, row) => {
                let n = val(*row).len();
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*row, &mut |gr| {
                    for (k, gv) in g.iter().enumerate() {
                        gr[k % n] += gv;
                    }
                });
            }
            Op::MulRow(a, row) => {
                let n = val(*row).len();
                let (x, r) = (val(*a).data(), val(*row).data());
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * r[k % n];
                    }
                });
                acc(*row, &mut |gr| {
                    for k in 0..g.len() {
                        gr[k % n] += g[k] * x[k];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let m = out.rows();
                let mut off = 0;
                for p in parts {
                    let c = val(*p).cols();
                    acc(*p, &mut |gp| {
                        for r in 0..m {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    acc(*p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                let n = out.cols();
                acc(*a, &mut |ga| add_into(&mut ga[start * n..start * n + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let (m, w) = out.dims2();
                let n = val(*a).cols();
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        add_into(&mut ga[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::RepeatEachRow(a, times) => {
                let (m, n) = val(*a).dims2();
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for k in 0..*times {
                            let src = (r * times + k) * n;
                            add_into(&mut ga[r * n..(r + 1) * n], &g[src..src + n]);
                        }
                    }
                });
            }
            Op::TileRows(a, times) => {
                let len = val(*a).len();
                acc(*a, &mut |ga| {
                    for k in 0..*times {
                        add_into(ga, &g[k * len..(k + 1) * len]);
                    }
                });
            }
            Op::GatherRows(table, idx) => {
                let n = val(*table).cols();
                acc(*table, &mut |gt| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gt[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = out.data();
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * 0.5 / y[k];
                    }
                });
            }
            Op::Square(a) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += 2.0 * x[k] * g[k];
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = out.dims2();
                let y = out.data();
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(p, q)| p * q).sum();
                        for k in row {
                            ga[k] += y[k] * (g[k] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let (m, n) = out.dims2();
                let y = out.data();
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let gs: f64 = g[row.clone()].iter().sum();
                        for k in row {
                            ga[k] += g[k] - y[k].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNormRows(a, eps) => {
                let (m, n) = out.dims2();
                let x = val(*a).data();
                let y = out.data();
                acc(*a, &mut |ga| {
                    let nf = n as f64;
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let xs = &x[row.clone()];
                        let mu = xs.iter().sum::<f64>() / nf;
                        let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gm = g[row.clone()].iter().sum::<f64>() / nf;
                        let gy = g[row.clone()].iter().zip(&y[row.clone()]).map(|(p, q)| p * q).sum::<f64>() / nf;
                        for k in row {
                            ga[k] += inv * (g[k] - gm - y[k] * gy);
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let (m, n) = val(*a).dims2();
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for j in 0..n {
                            ga[r * n + j] += g[j] / m as f64;
                        }
                    }
                });
            }
            Op::VarRows(a) => {
                let (m, n) = val(*a).dims2();
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    for j in 0..n {
                        let mu = (0..m).map(|r| x[r * n + j]).sum::<f64>() / m as f64;
                        for r in 0..m {
                            ga[r * n + j] += g[j] * 2.0 * (x[r * n + j] - mu) / (m - 1) as f64;
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::MeanAll(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::CosineRows(c, h) => {
                let cv = val(*c).data();
                let hv = val(*h);
                let (m, n) = hv.dims2();
                let cn = cv.iter().map(|v| v * v).sum::<f64>().sqrt();
                acc(*c, &mut |gc| {
                    for r in 0..m {
                        let hr = hv.row_slice(r);
                        let (cos, hn) = cosine_parts(cv, cn, hr);
                        if cn == 0.0 || hn == 0.0 {
                            continue;
                        }
                        for k in 0..n {
                            gc[k] += g[r] * (hr[k] / (cn * hn) - cos * cv[k] / (cn * cn));
                        }
                    }
                });
                acc(*h, &mut |gh| {
                    for r in 0..m {
                        let hr = hv.row_slice(r);
                        let (cos, hn) = cosine_parts(cv, cn, hr);
                        if cn == 0.0 || hn == 0.0 {
                            continue;
                        }
                        for k in 0..n {
                            gh[r * n + k] += g[r] * (cv[k] / (cn * hn) - cos * hr[k] / (hn * hn));
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                let s = 2.0 * g[0] / x.len() as f64;
                acc(*a, &mut |ga| {
                    for k in 0..x.len() {
                        ga[k] += s * (x[k] - y[k]);
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..x.len() {
                        gb[k] -= s * (x[k] - y[k]);
                    }
                });
            }
            Op::UnfoldTime(a, kernel) => {
                let (t, c) = val(*a).dims2();
                let half = kernel / 2;
                acc(*a, &mut |ga| {
                    for i in 0..t {
                        for j in 0..*kernel {
                            let src = i + j;
                            if src < half || src - half >= t {
                                continue;
                            }
                            let off = i * kernel * c + j * c;
                            let s = src - half;
                            add_into(&mut ga[s * c..(s + 1) * c], &g[off..off + c]);
                        }
                    }
                });
            }
            Op::ScalarFn(a, d) => acc(*a, &mut |ga| {
                for k in 0..d.len() {
                    ga[k] += g[0] * d[k];
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// `(cosine, ||h||)`; cosine is 0 when either norm vanishes.
fn cosine_parts(c: &[f64], cn: f64, h: &[f64]) -> (f64, f64) {
    let hn = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if cn == 0.0 || hn == 0.0 {
        return (0.0, hn);
    }
    let dot: f64 = c.iter().zip(h).map(|(a, b)| a * b).sum();
    (dot / (cn * hn), hn)
}

/// Cosine similarity of two vectors, 0 when either has zero norm. Uses the
/// same arithmetic as [`Tape::cosine_rows`].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let an = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    cosine_parts(a, an, b).0
}
