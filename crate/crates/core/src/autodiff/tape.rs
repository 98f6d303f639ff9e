use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Nll { logp: Var, targets: Vec<Option<usize>>, count: usize },
    Concat(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    Reshape(Var),
    Dot(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode recording of primitive operations.
///
/// Values are appended in execution order; [`Tape::backward`] walks them in
/// exact reverse. Nodes created with [`Tape::constant`] (and everything
/// computed only from constants) are skipped during the backward sweep.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero when `v` did not
    /// influence the loss or does not require gradients.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn softmax_rows(x: &Tensor, causal: bool) -> Vec<f64> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let width = if causal { (i + 1).min(c) } else { c };
        let row = &x.data()[i * c..i * c + width];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * c..i * c + width];
        let mut s = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            s += *d;
        }
        for d in dst.iter_mut() {
            *d /= s;
        }
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Vec<f64> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (d, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true, consumed: false }
    }

    /// A tape that only evaluates: every value is treated as a constant and
    /// `backward` is rejected.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), recording: false, consumed: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input (parameter or continuous input).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        let requires_grad = self.recording;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("constant"));
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul { a, b, tb: false }, &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        self.push("matmul_t", out, Op::MatMul { a, b, tb: true }, &[a, b])
    }

    fn zip(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        check_same(name, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |p, q| p + q)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |p, q| p - q)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |p, q| p * q)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let n = x.cols();
        if r.numel() != n {
            return Err(Error::shape("add_row", format!("{:?} + row {:?}", x.shape(), r.shape())));
        }
        let mut out = x.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scaled(s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        self.push("abs", out, Op::Abs(a), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), softmax_rows(x, false))?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`; masked
    /// entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), softmax_rows(x, true))?;
        self.push("causal_softmax", out, Op::CausalSoftmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), log_softmax_rows(x))?;
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-column `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = (xv.rows(), xv.cols());
        if g.numel() != c || b.numel() != c {
            return Err(Error::shape("layer_norm", format!("{:?} with gain {:?}", xv.shape(), g.shape())));
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, h) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::Empty("id sequence"));
        }
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::shape("embedding", format!("id {id} >= table rows {v}")));
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), h, out)?;
        self.push("embedding", out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Mean softmax cross-entropy over the rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let x = self.value(logits);
        let (r, c) = (x.rows(), x.cols());
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", format!("{r} rows, {} targets", targets.len())));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Empty("target span"));
        }
        let logp = log_softmax_rows(x);
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= c {
                    return Err(Error::shape("cross_entropy", format!("target {t} >= {c} classes")));
                }
                loss -= logp[i * c + t];
            }
        }
        let probs = logp.iter().map(|v| v.exp()).collect();
        let out = Tensor::scalar(loss / count as f64);
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            &[logits],
        )
    }

    /// Mean negative log-probability picked from `logp` at the target rows.
    pub fn nll(&mut self, logp: Var, targets: &[Option<usize>]) -> Result<Var> {
        let x = self.value(logp);
        let (r, c) = (x.rows(), x.cols());
        if targets.len() != r {
            return Err(Error::shape("nll", format!("{r} rows, {} targets", targets.len())));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Empty("target span"));
        }
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= c {
                    return Err(Error::shape("nll", format!("target {t} >= {c} classes")));
                }
                loss -= x.data()[i * c + t];
            }
        }
        let out = Tensor::scalar(loss / count as f64);
        self.push("nll", out, Op::Nll { logp, targets: targets.to_vec(), count }, &[logp])
    }

    /// Concatenates along columns; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat operand list"));
        }
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != r) {
            return Err(Error::shape("concat", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for p in parts {
            let t = self.value(*p);
            let c = t.cols();
            for i in 0..r {
                out[i * total + offset..i * total + offset + c].copy_from_slice(t.row(i));
            }
            offset += c;
        }
        let out = Tensor::matrix(r, total, out)?;
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {c}", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, out)?;
        self.push("slice_cols", out, Op::SliceCols { a, start }, &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", format!("[{start}, {}) of {r}", start + len)));
        }
        let out = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows { a, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Sum of the elementwise product of two same-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("dot", x, y)?;
        let s = x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum();
        self.push("dot", Tensor::scalar(s), Op::Dot(a, b), &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Reverse sweep from the scalar `loss`. A tape supports one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::NotRecording);
        }
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
            .data_mut()
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let nn = if *tb { bv.rows() } else { bv.cols() };
                if self.needs(*a) {
                    // dA = dC · op(B)ᵀ
                    let da = self.acc(grads, *a);
                    gemm(m, nn, k, gd, false, bv.data(), !*tb, da, 1.0);
                }
                if self.needs(*b) {
                    let db = self.acc(grads, *b);
                    if *tb {
                        // dB = dCᵀ · A  (n×k)
                        gemm(nn, m, k, gd, true, av.data(), false, db, 1.0);
                    } else {
                        // dB = Aᵀ · dC  (k×n)
                        gemm(k, m, nn, av.data(), true, gd, false, db, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        let d = self.acc(grads, *v);
                        d.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    let d = self.acc(grads, *a);
                    d.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
                }
                if self.needs(*b) {
                    let d = self.acc(grads, *b);
                    d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let other = self.value(*b).data();
                    let d = self.acc(grads, *a);
                    for ((x, y), o) in d.iter_mut().zip(gd).zip(other) {
                        *x += y * o;
                    }
                }
                if self.needs(*b) {
                    let other = self.value(*a).data();
                    let d = self.acc(grads, *b);
                    for ((x, y), o) in d.iter_mut().zip(gd).zip(other) {
                        *x += y * o;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    let d = self.acc(grads, *a);
                    d.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
                }
                if self.needs(*row) {
                    let n = g.cols();
                    let d = self.acc(grads, *row);
                    for chunk in gd.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, s) => {
                let d = self.acc(grads, *a);
                d.iter_mut().zip(gd).for_each(|(x, y)| *x += s * y);
            }
            Op::Relu(a) => {
                let input = self.value(*a).data();
                let d = self.acc(grads, *a);
                for ((x, y), v) in d.iter_mut().zip(gd).zip(input) {
                    if *v > 0.0 {
                        *x += y;
                    }
                }
            }
            Op::Abs(a) => {
                let input = self.value(*a).data();
                let d = self.acc(grads, *a);
                for ((x, y), v) in d.iter_mut().zip(gd).zip(input) {
                    if *v > 0.0 {
                        *x += y;
                    } else if *v < 0.0 {
                        *x -= y;
                    }
                }
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let d = self.acc(grads, *a);
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dotp: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                    for ((x, yy), gg) in drow.iter_mut().zip(yrow).zip(grow) {
                        *x += yy * (gg - dotp);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let d = self.acc(grads, *a);
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let s: f64 = grow.iter().sum();
                    for ((x, yy), gg) in drow.iter_mut().zip(yrow).zip(grow) {
                        *x += gg - yy.exp() * s;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = node.value.cols();
                let gv = self.value(*gain).data();
                if self.needs(*gain) {
                    let d = self.acc(grads, *gain);
                    for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.needs(*bias) {
                    let d = self.acc(grads, *bias);
                    for grow in gd.chunks(c) {
                        d.iter_mut().zip(grow).for_each(|(p, q)| *p += q);
                    }
                }
                if self.needs(*x) {
                    let d = self.acc(grads, *x);
                    let cf = c as f64;
                    let mut dh = vec![0.0; c];
                    for (r, (grow, hrow)) in gd.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dh[j] = grow[j] * gv[j];
                            m1 += dh[j];
                            m2 += dh[j] * hrow[j];
                        }
                        m1 /= cf;
                        m2 /= cf;
                        let drow = &mut d[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += rstd[r] * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let h = node.value.cols();
                let d = self.acc(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    let src = &gd[r * h..(r + 1) * h];
                    d[id * h..(id + 1) * h].iter_mut().zip(src).for_each(|(p, q)| *p += q);
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let c = self.value(*logits).cols();
                let scale = gd[0] / *count as f64;
                let d = self.acc(grads, *logits);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = &mut d[r * c..(r + 1) * c];
                        for (j, x) in row.iter_mut().enumerate() {
                            *x += scale * probs[r * c + j];
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::Nll { logp, targets, count } => {
                let c = self.value(*logp).cols();
                let scale = gd[0] / *count as f64;
                let d = self.acc(grads, *logp);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        d[r * c + t] -= scale;
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.needs(*p) {
                        let d = self.acc(grads, *p);
                        for (r, drow) in d.chunks_mut(c).enumerate() {
                            let src = &gd[r * total + offset..r * total + offset + c];
                            drow.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols { a, start } => {
                let full = self.value(*a).cols();
                let c = node.value.cols();
                let d = self.acc(grads, *a);
                for (r, grow) in gd.chunks(c).enumerate() {
                    let dst = &mut d[r * full + start..r * full + start + c];
                    dst.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                }
            }
            Op::SliceRows { a, start } => {
                let c = node.value.cols();
                let d = self.acc(grads, *a);
                let dst = &mut d[start * c..start * c + gd.len()];
                dst.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
            }
            Op::Reshape(a) => {
                let d = self.acc(grads, *a);
                d.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
            }
            Op::Dot(a, b) => {
                let s = gd[0];
                if self.needs(*a) {
                    let other = self.value(*b).data();
                    let d = self.acc(grads, *a);
                    d.iter_mut().zip(other).for_each(|(x, y)| *x += s * y);
                }
                if self.needs(*b) {
                    let other = self.value(*a).data();
                    let d = self.acc(grads, *b);
                    d.iter_mut().zip(other).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Sum(a) => {
                let s = gd[0];
                let d = self.acc(grads, *a);
                d.iter_mut().for_each(|x| *x += s);
            }
        }
    }
}
