//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Operations append nodes and
//! return [`Var`] handles; [`Graph::backward`] walks the nodes in reverse and
//! accumulates gradients into every node that requires one.
//!
//! Broadcasting rule for the binary elementwise ops (`add`, `sub`, `mul`):
//! the right operand's shape must equal the left operand's shape or a suffix
//! of it (a scalar is the empty suffix). The right operand is repeated over
//! the leading dimensions of the left one. The result has the left shape.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BackendError, Float, ParameterStore, Result, Tensor};

/// Fill value used for masked attention logits. Large enough that its
/// softmax weight underflows to exactly zero in both precisions.
pub const MASK_FILL: f64 = -1.0e9;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum MatMulKind {
    /// `[.., k] x [k, m]`
    Flat { n: usize, k: usize, m: usize },
    /// `[b, n, k] x [b, k, m]`
    Batched { b: usize, n: usize, k: usize, m: usize },
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var, MatMulKind),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Embedding(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    MaskedFill(Var, Vec<bool>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MaxPool(Var, Vec<usize>),
    AvgPool(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    MulConst(Var, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape over scalars of type `T`.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<String, Var>,
    track_params: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> BackendError {
    BackendError::Shape { op, detail }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Float>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

// c[n, m] += a[n, k] * b[k, m]
fn gemm_nn<T: Float>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * m..(kk + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

// c[n, k] += a[n, m] * b[k, m]^T
fn gemm_nt<T: Float>(a: &[T], b: &[T], c: &mut [T], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            c[i * k + j] = c[i * k + j] + acc;
        }
    }
}

// c[k, m] += a[n, k]^T * b[n, m]
fn gemm_tn<T: Float>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let crow = &mut c[kk * m..(kk + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

fn gelu_parts<T: Float>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dinner = c * (one + T::lit(3.0) * a * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * dinner;
    (y, dy)
}

impl<T: Float> Graph<T> {
    /// Graph whose parameters require gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            track_params: true,
            dropout_rng: None,
        }
    }

    /// Graph whose parameters are registered as constants; nothing is
    /// differentiable unless a leaf is created with `requires_grad`.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    /// Enables dropout for this graph, seeded for reproducibility.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Registers (once) and returns the node holding parameter `name`.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| BackendError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.leaf(value, self.track_params);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters registered on this graph, by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn binary_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, format!("{sa:?} with {sb:?} (rhs must be a suffix of lhs)")));
        }
        Ok(self.value(b).numel())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nb = self.binary_check(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("unary preserves shape")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.unary(a, |x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.unary(a, |x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Multiplies elementwise by a constant of identical shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(shape_err(
                "mul_const",
                format!("{:?} with {} constants", self.shape(a), c.len()),
            ));
        }
        let av = self.value(a);
        let data = av.data().iter().zip(&c).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    /// Inverted dropout; identity unless the graph was built with a seed.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if rate <= 0.0 || self.dropout_rng.is_none() {
            return Ok(a);
        }
        let n = self.value(a).numel();
        let keep = T::lit(1.0 / (1.0 - rate));
        let rng = self.dropout_rng.as_mut().unwrap();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        self.mul_const(a, mask)
    }

    /// Matrix product.
    ///
    /// `[.., k] x [k, m] -> [.., m]` (lhs leading dims flattened) or
    /// `[b, n, k] x [b, k, m] -> [b, n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || shape_err("matmul", format!("{sa:?} x {sb:?}"));
        let (kind, out_shape) = match (sa.len(), sb.len()) {
            (ra, 2) if ra >= 1 => {
                let k = sa[ra - 1];
                if k != sb[0] {
                    return Err(bad());
                }
                let n = sa[..ra - 1].iter().product();
                let mut os = sa[..ra - 1].to_vec();
                os.push(sb[1]);
                (MatMulKind::Flat { n, k, m: sb[1] }, os)
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(bad());
                }
                (
                    MatMulKind::Batched {
                        b: sa[0],
                        n: sa[1],
                        k: sa[2],
                        m: sb[2],
                    },
                    vec![sa[0], sa[1], sb[2]],
                )
            }
            _ => return Err(bad()),
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        match kind {
            MatMulKind::Flat { n, k, m } => gemm_nn(av, bv, &mut out, n, k, m),
            MatMulKind::Batched { b, n, k, m } => {
                for i in 0..b {
                    gemm_nn(
                        &av[i * n * k..(i + 1) * n * k],
                        &bv[i * k * m..(i + 1) * k * m],
                        &mut out[i * n * m..(i + 1) * n * m],
                        n,
                        k,
                        m,
                    );
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b, kind), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{shape:?} by {perm:?}")));
        }
        let (os, data) = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(os, data)?, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if d0 >= rank || d1 >= rank {
            return Err(shape_err("transpose", format!("axes {d0},{d1} of rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.numel() {
            return Err(shape_err("reshape", format!("{:?} to {shape:?}", av.shape())));
        }
        let out = Tensor::new(shape.to_vec(), av.data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Gathers rows of a `[V, d]` table: result `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(shape_err("embedding", format!("table {st:?} is not rank 2")));
        }
        let (v, d) = (st[0], st[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(BackendError::Index {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(vec![ids.len(), d], out)?, Op::Embedding(table, ids.to_vec()), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of
    /// shape `[d]`. Zero-variance rows normalize to zero thanks to `eps`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("{sx:?} with gamma {:?} beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let dn = T::lit(d as f64);
        let eps = T::lit(eps);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / dn;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rs;
                xhat.push(xh);
                out.push(xh * gv[j] + bv[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    fn last_dim(&self, op: &'static str, a: Var) -> Result<usize> {
        match self.shape(a).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(shape_err(op, format!("{:?} has no last axis", self.shape(a)))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim("softmax", a)?;
        let av = self.value(a);
        let mut out = Vec::with_capacity(av.numel());
        for row in av.data().chunks(d) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let start = out.len();
            let mut sum = T::zero();
            for &v in row {
                let e = (v - max).exp();
                sum = sum + e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e = *e / sum;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim("log_softmax", a)?;
        let av = self.value(a);
        let mut out = Vec::with_capacity(av.numel());
        for row in av.data().chunks(d) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
            out.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| x.ln());
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| x.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: T) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.numel() {
            return Err(shape_err(
                "masked_fill",
                format!("{:?} with mask of {}", av.shape(), mask.len()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaskedFill(a, mask.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{first:?} with {s:?} along {axis}")));
            }
            total += s[axis];
        }
        let mut os = first.clone();
        os[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(os.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(os, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("narrow", format!("{s:?} axis {axis} [{start}, {})", start + len)));
        }
        let (outer, size, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut os = s;
        os[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(os, out)?, Op::Narrow { x, axis, start }, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| x.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| gelu_parts(x).0);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p());
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = T::lit(av.numel() as f64);
        let s = av.data().iter().fold(T::zero(), |acc, &v| acc + v) / n;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} of {s:?}")));
        }
        let (outer, size, inner) = split_axis(&s, axis);
        let av = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..size {
                let base = (o * size + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] = out[o * inner + j] + av[base + j];
                }
            }
        }
        let mut os = s;
        os.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(os, out)?, Op::SumAxis(a, axis), rg))
    }

    fn pool_check(&self, op: &'static str, x: Var, lengths: &[usize]) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] != lengths.len() || lengths.iter().any(|&l| l == 0 || l > s[1]) {
            return Err(shape_err(op, format!("{s:?} with lengths {lengths:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Max over the sequence axis of `[B, L, d]`, considering only the first
    /// `lengths[b]` positions of each row.
    pub fn max_pool(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let (b, l, d) = self.pool_check("max_pool", x, lengths)?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * d);
        let mut arg = Vec::with_capacity(b * d);
        for bi in 0..b {
            for j in 0..d {
                let mut best = 0;
                for t in 1..lengths[bi] {
                    if xv[(bi * l + t) * d + j] > xv[(bi * l + best) * d + j] {
                        best = t;
                    }
                }
                arg.push((bi * l + best) * d + j);
                out.push(xv[(bi * l + best) * d + j]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![b, d], out)?, Op::MaxPool(x, arg), rg))
    }

    /// Mean over the first `lengths[b]` positions of `[B, L, d]`.
    pub fn avg_pool(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let (b, l, d) = self.pool_check("avg_pool", x, lengths)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            for t in 0..lengths[bi] {
                for j in 0..d {
                    out[bi * d + j] = out[bi * d + j] + xv[(bi * l + t) * d + j];
                }
            }
            let n = T::lit(lengths[bi] as f64);
            for j in 0..d {
                out[bi * d + j] = out[bi * d + j] / n;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![b, d], out)?, Op::AvgPool(x, lengths.to_vec()), rg))
    }

    /// Picks `x[i, idx[i]]` from a `[N, V]` matrix: result `[N]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != idx.len() {
            return Err(shape_err("pick", format!("{s:?} with {} indices", idx.len())));
        }
        let v = s[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            if j >= v {
                return Err(BackendError::Index {
                    op: "pick",
                    index: j,
                    size: v,
                });
            }
            out.push(xv[i * v + j]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(out), Op::Pick(x, idx.to_vec()), rg))
    }

    /// Gradient of the last backward pass with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn acc(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, f: impl FnOnce(&mut [T])) {
        if !nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
        f(slot);
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate (`+=`) when a
    /// node feeds several consumers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(BackendError::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let neg = matches!(node.op, Op::Sub(..));
                    Self::acc(&mut grads, nodes, *a, |g| {
                        for (gv, &d) in g.iter_mut().zip(&gy) {
                            *gv = *gv + d;
                        }
                    });
                    let nb = nodes[b.0].value.numel();
                    Self::acc(&mut grads, nodes, *b, |g| {
                        for (k, &d) in gy.iter().enumerate() {
                            let j = k % nb;
                            g[j] = if neg { g[j] - d } else { g[j] + d };
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let nb = bv.len();
                    Self::acc(&mut grads, nodes, *a, |g| {
                        for (k, gv) in g.iter_mut().enumerate() {
                            *gv = *gv + gy[k] * bv[k % nb];
                        }
                    });
                    Self::acc(&mut grads, nodes, *b, |g| {
                        for (k, &d) in gy.iter().enumerate() {
                            g[k % nb] = g[k % nb] + d * av[k];
                        }
                    });
                }
                Op::Scale(a, c) => Self::acc(&mut grads, nodes, *a, |g| {
                    for (gv, &d) in g.iter_mut().zip(&gy) {
                        *gv = *gv + d * *c;
                    }
                }),
                Op::AddScalar(a) | Op::Reshape(a) => Self::acc(&mut grads, nodes, *a, |g| {
                    for (gv, &d) in g.iter_mut().zip(&gy) {
                        *gv = *gv + d;
                    }
                }),
                Op::MulConst(a, c) => Self::acc(&mut grads, nodes, *a, |g| {
                    for ((gv, &d), &m) in g.iter_mut().zip(&gy).zip(c) {
                        *gv = *gv + d * m;
                    }
                }),
                Op::MatMul(a, b, kind) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    match *kind {
                        MatMulKind::Flat { n, k, m } => {
                            Self::acc(&mut grads, nodes, *a, |g| gemm_nt(&gy, bv, g, n, m, k));
                            Self::acc(&mut grads, nodes, *b, |g| gemm_tn(av, &gy, g, n, k, m));
                        }
                        MatMulKind::Batched { b: nb, n, k, m } => {
                            Self::acc(&mut grads, nodes, *a, |g| {
                                for i in 0..nb {
                                    gemm_nt(
                                        &gy[i * n * m..(i + 1) * n * m],
                                        &bv[i * k * m..(i + 1) * k * m],
                                        &mut g[i * n * k..(i + 1) * n * k],
                                        n,
                                        m,
                                        k,
                                    );
                                }
                            });
                            Self::acc(&mut grads, nodes, *b, |g| {
                                for i in 0..nb {
                                    gemm_tn(
                                        &av[i * n * k..(i + 1) * n * k],
                                        &gy[i * n * m..(i + 1) * n * m],
                                        &mut g[i * k * m..(i + 1) * k * m],
                                        n,
                                        k,
                                        m,
                                    );
                                }
                            });
                        }
                    }
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (_, back) = permute_data(&gy, node.value.shape(), &inv);
                    Self::acc(&mut grads, nodes, *a, |g| {
                        for (gv, d) in g.iter_mut().zip(back) {
                            *gv = *gv + d;
                        }
                    });
                }
                Op::Embedding(table, ids) => {
                    let d = nodes[table.0].value.shape()[1];
                    Self::acc(&mut grads, nodes, *table, |g| {
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                g[id * d + j] = g[id * d + j] + gy[r * d + j];
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
                    let d = nodes[gamma.0].value.numel();
                    let gv = nodes[gamma.0].value.data();
                    let dn = T::lit(d as f64);
                    Self::acc(&mut grads, nodes, *x, |g| {
                        for (r, &rs) in rstd.iter().enumerate() {
                            let off = r * d;
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..d {
                                let dxh = gy[off + j] * gv[j];
                                m1 = m1 + dxh;
                                m2 = m2 + dxh * xhat[off + j];
                            }
                            m1 = m1 / dn;
                            m2 = m2 / dn;
                            for j in 0..d {
                                let dxh = gy[off + j] * gv[j];
                                g[off + j] = g[off + j] + rs * (dxh - m1 - xhat[off + j] * m2);
                            }
                        }
                    });
                    Self::acc(&mut grads, nodes, *gamma, |g| {
                        for (k, (&d_, &xh)) in gy.iter().zip(xhat).enumerate() {
                            g[k % d] = g[k % d] + d_ * xh;
                        }
                    });
                    Self::acc(&mut grads, nodes, *beta, |g| {
                        for (k, &d_) in gy.iter().enumerate() {
                            g[k % d] = g[k % d] + d_;
                        }
                    });
                }
                Op::Softmax(a) => {
                    let d = *node.value.shape().last().unwrap();
                    Self::acc(&mut grads, nodes, *a, |g| {
                        for ((gr, yr), dr) in g.chunks_mut(d).zip(y.chunks(d)).zip(gy.chunks(d)) {
                            let dot = yr.iter().zip(dr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                            for j in 0..d {
                                gr[j] = gr[j] + yr[j] * (dr[j] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let d = *node.value.shape().last().unwrap();
                    Self::acc(&mut grads, nodes, *a, |g| {
                        for ((gr, yr), dr) in g.chunks_mut(d).zip(y.chunks(d)).zip(gy.chunks(d)) {
                            let total = dr.iter().fold(T::zero(), |s, &q| s + q);
                            for j in 0..d {
                                gr[j] = gr[j] + dr[j] - yr[j].exp() * total;
                            }
                        }
                    });
                }
                Op::Log(a) => {
                    let av = nodes[a.0].value.data();
                    Self::acc(&mut grads, nodes, *a, |g| {
                        for k in 0..g.len() {
                            g[k] = g[k] + gy[k] / av[k];
                        }
                    });
                }
                Op::Exp(a) => Self::acc(&mut grads, nodes, *a, |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] + gy[k] * y[k];
                    }
                }),
                Op::MaskedFill(a, mask) => Self::acc(&mut grads, nodes, *a, |g| {
                    for k in 0..g.len() {
                        if !mask[k] {
                            g[k] = g[k] + gy[k];
                        }
                    }
                }),
                Op::Concat(parts, axis) => {
                    let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                    let total = node.value.shape()[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.shape()[*axis] * inner;
                        Self::acc(&mut grads, nodes, p, |g| {
                            for o in 0..outer {
                                for j in 0..len {
                                    g[o * len + j] = g[o * len + j] + gy[o * total + offset + j];
                                }
                            }
                        });
                        offset += len;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let (outer, size, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                    let len = node.value.shape()[*axis] * inner;
                    Self::acc(&mut grads, nodes, *x, |g| {
                        for o in 0..outer {
                            let base = (o * size + start) * inner;
                            for j in 0..len {
                                g[base + j] = g[base + j] + gy[o * len + j];
                            }
                        }
                    });
                }
                Op::Tanh(a) => Self::acc(&mut grads, nodes, *a, |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] + gy[k] * (T::one() - y[k] * y[k]);
                    }
                }),
                Op::Sigmoid(a) => Self::acc(&mut grads, nodes, *a, |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] + gy[k] * y[k] * (T::one() - y[k]);
                    }
                }),
                Op::Relu(a) => {
                    let av = nodes[a.0].value.data();
                    Self::acc(&mut grads, nodes, *a, |g| {
                        for k in 0..g.len() {
                            if av[k] > T::zero() {
                                g[k] = g[k] + gy[k];
                            }
                        }
                    });
                }
                Op::Gelu(a) => {
                    let av = nodes[a.0].value.data();
                    Self::acc(&mut grads, nodes, *a, |g| {
                        for k in 0..g.len() {
                            g[k] = g[k] + gy[k] * gelu_parts(av[k]).1;
                        }
                    });
                }
                Op::Softplus(a) => {
                    let av = nodes[a.0].value.data();
                    Self::acc(&mut grads, nodes, *a, |g| {
                        for k in 0..g.len() {
                            g[k] = g[k] + gy[k] / (T::one() + (-av[k]).exp());
                        }
                    });
                }
                Op::Sum(a) => Self::acc(&mut grads, nodes, *a, |g| {
                    for gv in g.iter_mut() {
                        *gv = *gv + gy[0];
                    }
                }),
                Op::Mean(a) => {
                    let n = T::lit(nodes[a.0].value.numel() as f64);
                    Self::acc(&mut grads, nodes, *a, |g| {
                        for gv in g.iter_mut() {
                            *gv = *gv + gy[0] / n;
                        }
                    });
                }
                Op::SumAxis(a, axis) => {
                    let (outer, size, inner) = split_axis(nodes[a.0].value.shape(), *axis);
                    Self::acc(&mut grads, nodes, *a, |g| {
                        for o in 0..outer {
                            for i in 0..size {
                                let base = (o * size + i) * inner;
                                for j in 0..inner {
                                    g[base + j] = g[base + j] + gy[o * inner + j];
                                }
                            }
                        }
                    });
                }
                Op::MaxPool(a, arg) => Self::acc(&mut grads, nodes, *a, |g| {
                    for (k, &src) in arg.iter().enumerate() {
                        g[src] = g[src] + gy[k];
                    }
                }),
                Op::AvgPool(a, lengths) => {
                    let s = nodes[a.0].value.shape();
                    let (l, d) = (s[1], s[2]);
                    Self::acc(&mut grads, nodes, *a, |g| {
                        for (bi, &len) in lengths.iter().enumerate() {
                            let n = T::lit(len as f64);
                            for t in 0..len {
                                for j in 0..d {
                                    let k = (bi * l + t) * d + j;
                                    g[k] = g[k] + gy[bi * d + j] / n;
                                }
                            }
                        }
                    });
                }
                Op::Pick(a, idx) => {
                    let v = nodes[a.0].value.shape()[1];
                    Self::acc(&mut grads, nodes, *a, |g| {
                        for (i, &j) in idx.iter().enumerate() {
                            g[i * v + j] = g[i * v + j] + gy[i];
                        }
                    });
                }
            }
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }
}
