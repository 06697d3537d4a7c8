use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::tensor::{matmul, matmul_at, matmul_bt, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Tanh(Var),
    Gelu(Var),
    Mish(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    Normalize { x: Var, rstd: Vec<T> },
    Embed { table: Var, idx: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, seq: usize, heads: usize, starts: Vec<usize>, probs: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Clamp { x: Var, lo: T, hi: T },
    Minimum(Var, Var),
    Maximum(Var, Var),
    Concat(Vec<Var>),
    Rows { x: Var, idx: Vec<usize> },
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum { x: Var, w: Vec<T> },
    GaussianNll { mean: Var, log_var: Var, target: Var },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eager tape of tensor operations.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every node that requires them.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<[usize; 2]>,
}

impl<T: Real> Grads<T> {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let [r, c] = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(r, c, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(r, c),
        }
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<Tensor<T>> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape { op, lhs: a.shape(), rhs: b.shape() });
    }
    Ok(())
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let inner = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    let th = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0 * 0.044715) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * dinner
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn mish<T: Real>(x: T) -> T {
    x * softplus(x).tanh()
}

fn mish_grad<T: Real>(x: T) -> T {
    let t = softplus(x).tanh();
    t + x * (T::one() - t * t) * sigmoid(x)
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(Error::Graph("variable does not belong to this graph"))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Trainable input.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.cols() != bv.rows() {
            return Err(Error::Shape { op: "matmul", lhs: av.shape(), rhs: bv.shape() });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = Tensor::new(m, n, matmul(av.data(), bv.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        same_shape(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.rows(), av.cols(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rec, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("minimum", a, b, |x, y| if y < x { y } else { x }, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("maximum", a, b, |x, y| if y > x { y } else { x }, Op::Maximum(a, b))
    }

    fn row_broadcast(&mut self, op: &'static str, x: Var, r: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        let (xv, rv) = (&self.node(x)?.value, &self.node(r)?.value);
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::Shape { op, lhs: xv.shape(), rhs: rv.shape() });
        }
        let n = xv.cols();
        let data = xv.data().iter().enumerate().map(|(i, &v)| f(v, rv.data()[i % n])).collect();
        let out = Tensor::new(xv.rows(), n, data)?;
        let rg = self.rg(&[x, r]);
        Ok(self.push(out, rec, rg))
    }

    /// `x[m,n] + b[1,n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, b, |v, r| v + r, Op::AddRow(x, b))
    }

    /// `x[m,n] * g[1,n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, g, |v, r| v * r, Op::MulRow(x, g))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, rec: Op<T>) -> Result<Var> {
        let out = self.node(x)?.value.map(f);
        let rg = self.rg(&[x]);
        Ok(self.push(out, rec, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::tanh, Op::Tanh(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn mish(&mut self, x: Var) -> Result<Var> {
        self.unary(x, mish, Op::Mish(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Elementwise clamp; the gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// Softmax over the last axis (each row).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::new(xv.rows(), n, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Per-row standardization without affine terms.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(xv.rows());
        let nf = T::of(n as f64);
        for row in data.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + T::of(LN_EPS)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let out = Tensor::new(xv.rows(), n, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Normalize { x, rstd }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` (`[1, n]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.normalize(x)?;
        let s = self.mul_row(n, gamma)?;
        self.add_row(s, beta)
    }

    /// Gathers rows `idx` of `table`.
    pub fn embed(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = &self.node(table)?.value;
        let n = tv.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= tv.rows() {
                return Err(Error::Shape { op: "embed", lhs: tv.shape(), rhs: [i, 1] });
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(idx.len(), n, data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::Embed { table, idx: idx.to_vec() }, rg))
    }

    /// Row gather (same as [`Graph::embed`] but named for selecting positions).
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.embed(x, idx)?;
        let node = &mut self.nodes[v.0];
        if let Op::Embed { table, idx } = core::mem::replace(&mut node.op, Op::Leaf) {
            node.op = Op::Rows { x: table, idx };
        }
        Ok(v)
    }

    /// Concatenation along columns; all inputs must share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Graph("concat of nothing"));
        }
        let rows = self.node(parts[0])?.value.rows();
        let mut cols = 0;
        for &p in parts {
            let pv = &self.node(p)?.value;
            if pv.rows() != rows {
                return Err(Error::Shape { op: "concat", lhs: [rows, cols], rhs: pv.shape() });
            }
            cols += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Inverted dropout; identity (same variable) outside training.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut Rng) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::InvalidArgument(alloc::format!("dropout probability {p} must be < 1")));
        }
        let len = self.node(x)?.value.len();
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..len).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.rows(), xv.cols(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Multi-head causal self-attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, d]` with rows grouped by sequence. Position `i`
    /// attends to positions `j <= i` with `j >= starts[b]` (left padding), and always to
    /// itself.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize, starts: &[usize]) -> Result<Var> {
        let (qv, kv, vv) = (&self.node(q)?.value, &self.node(k)?.value, &self.node(v)?.value);
        same_shape("attention k", qv, kv)?;
        same_shape("attention v", qv, vv)?;
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape { op: "attention heads", lhs: qv.shape(), rhs: [heads, 1] });
        }
        if seq == 0 || qv.rows() % seq != 0 || qv.rows() / seq != starts.len() {
            return Err(Error::Shape { op: "attention sequence", lhs: qv.shape(), rhs: [seq, starts.len()] });
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = vec![T::zero(); qv.len()];
        let mut probs = vec![T::zero(); starts.len() * heads * seq * seq];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for (b, &start) in starts.iter().enumerate() {
            for h in 0..heads {
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut mx = T::neg_infinity();
                    for j in 0..=i {
                        if j < start && j != i {
                            continue;
                        }
                        let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                        let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        prow[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = T::zero();
                    for j in 0..=i {
                        if j < start && j != i {
                            continue;
                        }
                        prow[j] = (prow[j] - mx).exp();
                        z += prow[j];
                    }
                    let orow = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        if j < start && j != i {
                            continue;
                        }
                        prow[j] /= z;
                        let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += prow[j] * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(qv.rows(), d, out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, seq, heads, starts: starts.to_vec(), probs }, rg))
    }

    /// `[m, n] -> [m, 1]` row sums.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let data = (0..xv.rows()).map(|r| xv.row(r).iter().copied().sum()).collect();
        let out = Tensor::column(data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::RowSum(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.len() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// `Σ w_i x_i` over all elements.
    pub fn weighted_sum(&mut self, x: Var, w: &[T]) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if w.len() != xv.len() {
            return Err(Error::Shape { op: "weighted_sum", lhs: xv.shape(), rhs: [w.len(), 1] });
        }
        let s = xv.data().iter().zip(w).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w: w.to_vec() }, rg))
    }

    /// Per-row diagonal Gaussian negative log-likelihood, summed over columns: `[m, 1]`.
    pub fn gaussian_nll_rows(&mut self, mean: Var, log_var: Var, target: Var) -> Result<Var> {
        let (mv, lv, tv) = (&self.node(mean)?.value, &self.node(log_var)?.value, &self.node(target)?.value);
        same_shape("gaussian_nll log_var", mv, lv)?;
        same_shape("gaussian_nll target", mv, tv)?;
        if !lv.is_finite() {
            return Err(Error::NonFinite("gaussian_nll log_var"));
        }
        let half_log_2pi = T::of(0.5 * libm::log(2.0 * core::f64::consts::PI));
        let half = T::of(0.5);
        let n = mv.cols();
        let data = (0..mv.rows())
            .map(|r| {
                (0..n)
                    .map(|c| {
                        let (m, l, t) = (mv.get(r, c), lv.get(r, c), tv.get(r, c));
                        half_log_2pi + half * l + half * (t - m) * (t - m) * (-l).exp()
                    })
                    .sum()
            })
            .collect();
        let out = Tensor::column(data);
        let rg = self.rg(&[mean, log_var, target]);
        Ok(self.push(out, Op::GaussianNll { mean, log_var, target }, rg))
    }

    /// Batch-mean Gaussian negative log-likelihood (scalar).
    pub fn gaussian_nll(&mut self, mean: Var, log_var: Var, target: Var) -> Result<Var> {
        let rows = self.gaussian_nll_rows(mean, log_var, target)?;
        self.mean(rows)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(Error::Graph("backward requires a scalar loss"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape()).collect();
        Ok(Grads { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &mut |s| {
                    for (x, y) in s.iter_mut().zip(matmul_bt(g, bv.data(), m, n, k)) {
                        *x += y;
                    }
                });
                acc(*b, &mut |s| {
                    for (x, y) in s.iter_mut().zip(matmul_at(av.data(), g, m, k, n)) {
                        *x += y;
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |s| s.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |s| s.iter_mut().zip(g).zip(bv).for_each(|((x, &y), &o)| *x += y * o));
                acc(*b, &mut |s| s.iter_mut().zip(g).zip(av).for_each(|((x, &y), &o)| *x += y * o));
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (val(*a).data(), val(*b).data());
                // ties route to the first argument
                let pick_a = |i: usize| if is_min { !(bv[i] < av[i]) } else { !(bv[i] > av[i]) };
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if pick_a(i) {
                            s[i] += g[i];
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        if !pick_a(i) {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::AddRow(x, r) => {
                let n = val(*r).cols();
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
                acc(*r, &mut |s| g.iter().enumerate().for_each(|(i, &b)| s[i % n] += b));
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (val(*x).data(), val(*r).data());
                let n = rv.len();
                acc(*x, &mut |s| s.iter_mut().enumerate().for_each(|(i, a)| *a += g[i] * rv[i % n]));
                acc(*r, &mut |s| g.iter().enumerate().for_each(|(i, &b)| s[i % n] += b * xv[i]));
            }
            Op::Scale(x, c) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *c)),
            Op::AddScalar(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(a, &b)| *a += b)),
            Op::Tanh(x) => acc(*x, &mut |s| {
                s.iter_mut().zip(g).zip(out).for_each(|((a, &b), &y)| *a += b * (T::one() - y * y))
            }),
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |s| s.iter_mut().zip(g).zip(xv).for_each(|((a, &b), &v)| *a += b * gelu_grad(v)))
            }
            Op::Mish(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |s| s.iter_mut().zip(g).zip(xv).for_each(|((a, &b), &v)| *a += b * mish_grad(v)))
            }
            Op::Exp(x) => acc(*x, &mut |s| s.iter_mut().zip(g).zip(out).for_each(|((a, &b), &y)| *a += b * y)),
            Op::Square(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |s| s.iter_mut().zip(g).zip(xv).for_each(|((a, &b), &v)| *a += b * (v + v)))
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x).data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if xv[i] > *lo && xv[i] < *hi {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                })
            }
            Op::Normalize { x, rstd } => {
                let n = node.value.cols();
                let nf = T::of(n as f64);
                acc(*x, &mut |s| {
                    for (r, ((srow, grow), yrow)) in s.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)).enumerate() {
                        let mg = grow.iter().copied().sum::<T>() / nf;
                        let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for j in 0..n {
                            srow[j] += rstd[r] * (grow[j] - mg - yrow[j] * mgy);
                        }
                    }
                })
            }
            Op::Embed { table, idx } => {
                let n = node.value.cols();
                acc(*table, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            s[i * n + j] += g[r * n + j];
                        }
                    }
                })
            }
            Op::Rows { x, idx } => {
                let n = node.value.cols();
                acc(*x, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            s[i * n + j] += g[r * n + j];
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let cols = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    acc(p, &mut |s| {
                        for (r, srow) in s.chunks_mut(pc).enumerate() {
                            for j in 0..pc {
                                srow[j] += g[r * cols + off + j];
                            }
                        }
                    });
                    off += pc;
                }
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |s| s.iter_mut().zip(g).zip(mask).for_each(|((a, &b), &m)| *a += b * m))
            }
            Op::Attention { q, k, v, seq, heads, starts, probs } => {
                self.attention_backward(*q, *k, *v, *seq, *heads, starts, probs, g, grads);
            }
            Op::RowSum(x) => {
                let n = val(*x).cols();
                acc(*x, &mut |s| s.iter_mut().enumerate().for_each(|(i, a)| *a += g[i / n]))
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let c = g[0] / T::of(val(*x).len() as f64);
                acc(*x, &mut |s| s.iter_mut().for_each(|a| *a += c))
            }
            Op::WeightedSum { x, w } => acc(*x, &mut |s| s.iter_mut().zip(w).for_each(|(a, &wi)| *a += g[0] * wi)),
            Op::GaussianNll { mean, log_var, target } => {
                let (mv, lv, tv) = (val(*mean), val(*log_var), val(*target));
                let n = mv.cols();
                let half = T::of(0.5);
                // residual scaled by precision, per element
                let scaled: Vec<T> = (0..mv.len())
                    .map(|i| (tv.data()[i] - mv.data()[i]) * (-lv.data()[i]).exp())
                    .collect();
                acc(*mean, &mut |s| s.iter_mut().enumerate().for_each(|(i, a)| *a -= g[i / n] * scaled[i]));
                acc(*target, &mut |s| s.iter_mut().enumerate().for_each(|(i, a)| *a += g[i / n] * scaled[i]));
                acc(*log_var, &mut |s| {
                    s.iter_mut().enumerate().for_each(|(i, a)| {
                        let r = tv.data()[i] - mv.data()[i];
                        *a += g[i / n] * (half - half * r * scaled[i]);
                    })
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        starts: &[usize],
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let d = qv.cols();
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let len = qv.len();
        let mut dq = vec![T::zero(); len];
        let mut dk = vec![T::zero(); len];
        let mut dv = vec![T::zero(); len];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut dp = vec![T::zero(); seq];
        for (b, &start) in starts.iter().enumerate() {
            for h in 0..heads {
                for i in 0..seq {
                    let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let gi = &g[(b * seq + i) * d + h * dh..][..dh];
                    let mut dot = T::zero();
                    for j in 0..=i {
                        if j < start && j != i {
                            continue;
                        }
                        let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                        dp[j] = gi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                        dot += prow[j] * dp[j];
                        let dvj = &mut dv[(b * seq + j) * d + h * dh..][..dh];
                        for (o, &x) in dvj.iter_mut().zip(gi) {
                            *o += prow[j] * x;
                        }
                    }
                    let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        if j < start && j != i {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                        let dqi = &mut dq[(b * seq + i) * d + h * dh..][..dh];
                        for (o, &x) in dqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let dkj = &mut dk[(b * seq + j) * d + h * dh..][..dh];
                        for (o, &x) in dkj.iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[var.0].requires_grad {
                continue;
            }
            let slot = grads[var.0].get_or_insert_with(|| vec![T::zero(); len]);
            slot.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
        }
    }
}
