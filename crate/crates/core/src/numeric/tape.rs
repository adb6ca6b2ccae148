//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output and whatever it needs
//! for the vector-Jacobian product. A tape lives for one forward pass; it is
//! never reused across batches. Parameters are read straight from the
//! registry, and `backward` returns their gradients as a [`Gradients`] map
//! for the caller to accumulate.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{axpy, dot, gemm_acc, sigmoid};
use super::params::{Gradients, ParamId, ParamRegistry};
use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const BCE_CLAMP: f64 = 1e-7;
const COSINE_MIN_NORM: f64 = 1e-12;
const MEMBERSHIP_MIN_MASS: f64 = 1e-12;

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: F,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    Concat {
        inputs: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    SumAll(Var),
    Softmax {
        x: Var,
        width: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Cosine {
        a: Var,
        b: Var,
        width: usize,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    BagMean {
        table: Var,
        ids: Vec<u32>,
        bag: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        tq: usize,
        tk: usize,
        probs: Vec<F>,
    },
    AddRowsMasked {
        x: Var,
        rows: Var,
        mask: Vec<F>,
        t: usize,
    },
    TakeRows {
        x: Var,
        idx: Vec<usize>,
        t: usize,
    },
    Membership {
        lo: Var,
        hi: Var,
        valid: Vec<usize>,
        t: usize,
        tau: F,
        fallback: Vec<bool>,
    },
    ResolveRanges {
        center: Var,
        half: Var,
        // per element: dlo/dc, dlo/ds, dhi/dc, dhi/ds
        partials: Vec<[F; 4]>,
    },
    RowNormalize {
        x: Var,
        width: usize,
    },
    Bce {
        scores: Var,
        batch: usize,
        cands: usize,
    },
    Reshape(Var),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::AddBias { .. } => "add_bias",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::MeanAxis { .. } => "mean_axis",
            Op::SumAll(_) => "sum",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Dropout { .. } => "dropout",
            Op::Cosine { .. } => "cosine",
            Op::Gather { .. } => "gather",
            Op::BagMean { .. } => "bag_mean",
            Op::Attention { .. } => "attention",
            Op::AddRowsMasked { .. } => "add_rows_masked",
            Op::TakeRows { .. } => "take_rows",
            Op::Membership { .. } => "membership",
            Op::ResolveRanges { .. } => "resolve_ranges",
            Op::RowNormalize { .. } => "row_normalize",
            Op::Bce { .. } => "bce",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Tape<'p, F: Real> {
    params: &'p ParamRegistry<F>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new(params: &'p ParamRegistry<F>, mode: Mode, seed: u64) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamRegistry<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id).values(),
            _ => &node.value,
        }
    }

    /// Copies a node's output into a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert!(
            matches!(op, Op::Param(_)) || numel(&shape) == value.len(),
            "{}",
            op.name()
        );
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite output from {}",
            op.name()
        );
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&mut self, shape: &[usize], values: Vec<F>) -> Result<Var> {
        if numel(shape) != values.len() {
            return Err(mismatch("constant", shape, &[values.len()]));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, false))
    }

    pub fn constant_tensor(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    /// The registry parameter `id` as a differentiable input. Repeated calls
    /// return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let shape = self.params.get(id).shape().to_vec();
        let v = self.push(shape, Vec::new(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    // ----- linear algebra -------------------------------------------------

    /// `[.., k] × [k, n] → [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || sa.last() != Some(&sb[0]) {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = numel(&sa) / k;
        let mut out = vec![F::zero(); rows * n];
        gemm_acc(self.value(a), self.value(b), &mut out, rows, k, n, false, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, rows, k, n }, ng))
    }

    /// Batched `op(a) × op(b)` over a leading batch axis of 3-D operands.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let batch = sa[0];
        let mut out = vec![F::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                gemm_acc(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    ta,
                    tb,
                );
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            },
            ng,
        ))
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let out: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `shift + scale · x`
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Var {
        let out = self.value(x).iter().map(|&v| shift + scale * v).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::Affine { x, scale }, ng)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.affine(x, c, F::zero())
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(bias);
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(mismatch("add_bias", sx, sb));
        }
        let n = sb[0];
        let b = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }, ng))
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(mismatch("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.value(s)[0];
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulScalar { x, s }, ng))
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(F::zero()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Train-time Bernoulli mask scaled by `1/(1-p)`; identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout rate {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<F> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let ng = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, ng))
    }

    // ----- structural -----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), ng))
    }

    fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::config("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", &base, &[axis]));
        }
        let mut total = 0;
        let mut parts = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
            parts.push((v, s[axis]));
        }
        let (outer, _, inner) = Self::split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(v, len) in &parts {
                let src = self.value(v);
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: parts,
                outer,
                inner,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(mismatch("slice", &s, &[axis, start, len]));
        }
        let (outer, axis_len, inner) = Self::split_axis(&s, axis);
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.needs(x);
        Ok(self.push(
            shape,
            out,
            Op::Slice {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            },
            ng,
        ))
    }

    /// Mean over `axis`; the axis is removed from the shape (a scalar keeps shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(mismatch("mean_axis", &s, &[axis]));
        }
        let (outer, axis_len, inner) = Self::split_axis(&s, axis);
        let src = self.value(x);
        let norm = F::one() / F::of(axis_len as f64);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                let row = &src[(o * axis_len + a) * inner..(o * axis_len + a + 1) * inner];
                axpy(norm, row, &mut out[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.needs(x);
        Ok(self.push(
            shape,
            out,
            Op::MeanAxis {
                x,
                outer,
                axis_len,
                inner,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![total], Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::of(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, F::one() / n)
    }

    // ----- normalization --------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let width = *self.shape(x).last().unwrap();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::Softmax { x, width }, ng)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    /// A zero-variance row normalizes to zeros.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().unwrap();
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(mismatch("layer_norm", &s, self.shape(gamma)));
        }
        let eps = F::of(LAYER_NORM_EPS);
        let inv_w = F::one() / F::of(width as f64);
        let src = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = src.len() / width;
        let mut xhat = vec![F::zero(); src.len()];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let mu = row.iter().copied().sum::<F>() * inv_w;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_w;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..width {
                let h = (row[j] - mu) * inv;
                xhat[r * width + j] = h;
                out[r * width + j] = g[j] * h + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            s,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Row-wise cosine similarity of two equally shaped tensors; the last axis
    /// is reduced. A pair with a zero-norm side has similarity 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let s = self.shape(a).to_vec();
        let width = *s.last().unwrap();
        let av = self.value(a);
        let bv = self.value(b);
        let out: Vec<F> = av
            .chunks(width)
            .zip(bv.chunks(width))
            .map(|(x, y)| {
                let denom = dot(x, x).sqrt() * dot(y, y).sqrt();
                if denom.as_f64() < COSINE_MIN_NORM {
                    log::debug!("cosine of a zero-norm vector treated as 0");
                    F::zero()
                } else {
                    dot(x, y) / denom
                }
            })
            .collect();
        let mut shape = s[..s.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Cosine { a, b, width }, ng))
    }

    // ----- embedding lookups ----------------------------------------------

    /// Rows of a `[V, d]` table; output shape is `idx_shape ++ [d]`. Id 0 is
    /// padding: it yields a zero row and row 0 never receives gradient.
    pub fn gather(&mut self, table: Var, ids: &[u32], idx_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || numel(idx_shape) != ids.len() {
            return Err(mismatch("gather", &ts, idx_shape));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::data(format!("id {bad} outside vocabulary of {vocab}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            let i = i as usize;
            if i == 0 {
                out.extend(std::iter::repeat_n(F::zero(), d));
            } else {
                out.extend_from_slice(&tv[i * d..(i + 1) * d]);
            }
        }
        let mut shape = idx_shape.to_vec();
        shape.push(d);
        let ng = self.needs(table);
        Ok(self.push(
            shape,
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Mean of the non-pad rows of each bag of `bag` ids; `ids.len()` must be
    /// a multiple of `bag`. An all-pad bag yields a zero vector.
    pub fn bag_mean(&mut self, table: Var, ids: &[u32], bag: usize, out_lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || bag == 0 || ids.len() != numel(out_lead) * bag {
            return Err(mismatch("bag_mean", &ts, out_lead));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::data(format!("word id {bad} outside vocabulary of {vocab}")));
        }
        let tv = self.value(table);
        let n = ids.len() / bag;
        let mut out = vec![F::zero(); n * d];
        for (r, chunk) in ids.chunks(bag).enumerate() {
            let count = chunk.iter().filter(|&&i| i != 0).count();
            if count == 0 {
                continue;
            }
            let w = F::one() / F::of(count as f64);
            for &i in chunk.iter().filter(|&&i| i != 0) {
                let i = i as usize;
                axpy(w, &tv[i * d..(i + 1) * d], &mut out[r * d..(r + 1) * d]);
            }
        }
        let mut shape = out_lead.to_vec();
        shape.push(d);
        let ng = self.needs(table);
        Ok(self.push(
            shape,
            out,
            Op::BagMean {
                table,
                ids: ids.to_vec(),
                bag,
            },
            ng,
        ))
    }

    /// `x[b, t, :] += mask[b, t] · rows[b, :]`
    pub fn add_rows_masked(&mut self, x: Var, rows: Var, mask: &[F]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sr = self.shape(rows).to_vec();
        if sx.len() != 3 || sr != [sx[0], sx[2]] || mask.len() != sx[0] * sx[1] {
            return Err(mismatch("add_rows_masked", &sx, &sr));
        }
        let (batch, t, d) = (sx[0], sx[1], sx[2]);
        let mut out = self.value(x).to_vec();
        let rv = self.value(rows);
        for b in 0..batch {
            for p in 0..t {
                let m = mask[b * t + p];
                if m != F::zero() {
                    let o = (b * t + p) * d;
                    axpy(m, &rv[b * d..(b + 1) * d], &mut out[o..o + d]);
                }
            }
        }
        let ng = self.needs(x) || self.needs(rows);
        Ok(self.push(
            sx,
            out,
            Op::AddRowsMasked {
                x,
                rows,
                mask: mask.to_vec(),
                t,
            },
            ng,
        ))
    }

    /// Picks row `idx[b]` out of each `[T, d]` slab of a `[B, T, d]` tensor.
    pub fn take_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || idx.len() != s[0] || idx.iter().any(|&i| i >= s[1]) {
            return Err(mismatch("take_rows", &s, &[idx.len()]));
        }
        let (t, d) = (s[1], s[2]);
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for (b, &i) in idx.iter().enumerate() {
            let o = (b * t + i) * d;
            out.extend_from_slice(&src[o..o + d]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            vec![s[0], d],
            out,
            Op::TakeRows {
                x,
                idx: idx.to_vec(),
                t,
            },
            ng,
        ))
    }

    // ----- fused model ops ------------------------------------------------

    /// Multi-head scaled dot-product attention core, before the output
    /// projection. `q: [B, Tq, d]`, `k, v: [B, Tk, d]`, `key_mask: [B, Tk]`
    /// (true = valid key). Heads are contiguous `d/heads` column blocks.
    /// A query row with no valid key produces zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool], heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        if sq.len() != 3 || sk.len() != 3 || self.shape(v) != sk.as_slice() || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(mismatch("attention", &sq, &sk));
        }
        let (batch, tq, d) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide model width {d}")));
        }
        if key_mask.len() != batch * tk {
            return Err(mismatch("attention", &[batch, tk], &[key_mask.len()]));
        }
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut probs = vec![F::zero(); batch * heads * tq * tk];
        let mut out = vec![F::zero(); batch * tq * d];
        let mut scores = vec![F::zero(); tk];
        for b in 0..batch {
            let mask = &key_mask[b * tk..(b + 1) * tk];
            if !mask.iter().any(|&m| m) {
                continue;
            }
            for h in 0..heads {
                let col = h * dh;
                for i in 0..tq {
                    let qrow = &qv[(b * tq + i) * d + col..(b * tq + i) * d + col + dh];
                    let mut max = F::neg_infinity();
                    for j in 0..tk {
                        if mask[j] {
                            let krow = &kv[(b * tk + j) * d + col..(b * tk + j) * d + col + dh];
                            let s = dot(qrow, krow) * scale;
                            scores[j] = s;
                            if s > max {
                                max = s;
                            }
                        }
                    }
                    let p = &mut probs[((b * heads + h) * tq + i) * tk..((b * heads + h) * tq + i + 1) * tk];
                    let mut total = F::zero();
                    for j in 0..tk {
                        if mask[j] {
                            let e = (scores[j] - max).exp();
                            p[j] = e;
                            total += e;
                        }
                    }
                    let inv = F::one() / total;
                    let orow = &mut out[(b * tq + i) * d + col..(b * tq + i) * d + col + dh];
                    for j in 0..tk {
                        if mask[j] {
                            p[j] *= inv;
                            let vrow = &vv[(b * tk + j) * d + col..(b * tk + j) * d + col + dh];
                            axpy(p[j], vrow, orow);
                        }
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            sq,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                tq,
                tk,
                probs,
            },
            ng,
        ))
    }

    /// Resolves session ranges from centers and half-lengths:
    /// `[c - s, c + s]` clamped into `[0, valid]`, then widened to a
    /// width-1 window around the (clamped) center when narrower than one
    /// position. Output `[B, N, 2]` holding `(lo, hi)`.
    pub fn resolve_ranges(&mut self, center: Var, half: Var, valid: &[usize]) -> Result<Var> {
        self.same_shape("resolve_ranges", center, half)?;
        let s = self.shape(center).to_vec();
        if s.len() != 2 || valid.len() != s[0] || valid.contains(&0) {
            return Err(mismatch("resolve_ranges", &s, &[valid.len()]));
        }
        let n = s[1];
        let cv = self.value(center);
        let hv = self.value(half);
        let mut out = Vec::with_capacity(cv.len() * 2);
        let mut partials = Vec::with_capacity(cv.len());
        let zero = F::zero();
        let one = F::one();
        let halfw = F::of(0.5);
        for (idx, (&c, &h)) in cv.iter().zip(hv).enumerate() {
            let vlen = F::of(valid[idx / n] as f64);
            let lo0 = c - h;
            let hi0 = c + h;
            let lo = lo0.max(zero).min(vlen);
            let hi = hi0.max(zero).min(vlen);
            if hi - lo >= one {
                let lo_free = lo0 > zero && lo0 < vlen;
                let hi_free = hi0 > zero && hi0 < vlen;
                let (dlc, dls) = if lo_free { (one, -one) } else { (zero, zero) };
                let (dhc, dhs) = if hi_free { (one, one) } else { (zero, zero) };
                out.push(lo);
                out.push(hi);
                partials.push([dlc, dls, dhc, dhs]);
            } else {
                let c_free = c > halfw && c < vlen - halfw;
                let cc = c.max(halfw).min(vlen - halfw);
                out.push(cc - halfw);
                out.push(cc + halfw);
                let dc = if c_free { one } else { zero };
                partials.push([dc, zero, dc, zero]);
            }
        }
        let ng = self.needs(center) || self.needs(half);
        Ok(self.push(
            vec![s[0], n, 2],
            out,
            Op::ResolveRanges {
                center,
                half,
                partials,
            },
            ng,
        ))
    }

    /// Soft session membership `σ((t+½-lo)/τ)·σ((hi-t-½)/τ)` for positions
    /// `t < valid[b]` (zero beyond). `lo, hi: [B, N]` → `[B, N, T]`.
    /// A row with no mass falls back to a one-hot at the position nearest
    /// the range center (that row then carries no gradient).
    pub fn membership(&mut self, lo: Var, hi: Var, valid: &[usize], t: usize, tau: f64) -> Result<Var> {
        self.same_shape("membership", lo, hi)?;
        let s = self.shape(lo).to_vec();
        if s.len() != 2 || valid.len() != s[0] || valid.iter().any(|&v| v > t || v == 0) {
            return Err(mismatch("membership", &s, &[valid.len(), t]));
        }
        if tau <= 0.0 {
            return Err(Error::config(format!("membership temperature {tau} must be positive")));
        }
        let (batch, n) = (s[0], s[1]);
        let tau_f = F::of(tau);
        let lv = self.value(lo);
        let hv = self.value(hi);
        let mut out = vec![F::zero(); batch * n * t];
        let mut fallback = vec![false; batch * n];
        let half = F::of(0.5);
        for b in 0..batch {
            for i in 0..n {
                let r = b * n + i;
                let row = &mut out[r * t..(r + 1) * t];
                let mut mass = F::zero();
                for (p, w) in row.iter_mut().enumerate().take(valid[b]) {
                    let mid = F::of(p as f64) + half;
                    *w = sigmoid((mid - lv[r]) / tau_f) * sigmoid((hv[r] - mid) / tau_f);
                    mass += *w;
                }
                if mass.as_f64() < MEMBERSHIP_MIN_MASS {
                    row.iter_mut().for_each(|w| *w = F::zero());
                    let center = ((lv[r] + hv[r]) * half).as_f64();
                    let p = (center.floor().max(0.0) as usize).min(valid[b] - 1);
                    row[p] = F::one();
                    fallback[r] = true;
                }
            }
        }
        let ng = self.needs(lo) || self.needs(hi);
        Ok(self.push(
            vec![batch, n, t],
            out,
            Op::Membership {
                lo,
                hi,
                valid: valid.to_vec(),
                t,
                tau: tau_f,
                fallback,
            },
            ng,
        ))
    }

    /// Divides each last-axis row by its sum. Rows must have positive mass.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().unwrap();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(width) {
            let total: F = row.iter().copied().sum();
            if total <= F::zero() {
                return Err(Error::data("row_normalize on a row without positive mass"));
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let ng = self.needs(x);
        Ok(self.push(s, out, Op::RowNormalize { x, width }, ng))
    }

    /// Binary cross-entropy over `[B, C]` scores whose column 0 is the
    /// positive, averaged over rows: `-[ln σ(y⁺) + Σ ln(1 - σ(y⁻))]` with σ
    /// clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, scores: Var) -> Result<Var> {
        let s = self.shape(scores).to_vec();
        if s.len() != 2 || s[1] < 2 {
            return Err(mismatch("bce", &s, &[2]));
        }
        let (batch, cands) = (s[0], s[1]);
        let lo = F::of(BCE_CLAMP);
        let hi = F::one() - lo;
        let mut total = F::zero();
        for row in self.value(scores).chunks(cands) {
            let p = sigmoid(row[0]).max(lo).min(hi);
            total -= p.ln();
            for &y in &row[1..] {
                let p = sigmoid(y).max(lo).min(hi);
                total -= (F::one() - p).ln();
            }
        }
        let loss = total / F::of(batch as f64);
        let ng = self.needs(scores);
        Ok(self.push(vec![1], vec![loss], Op::Bce { scores, batch, cands }, ng))
    }

    // ----- reverse pass ---------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape and returns the
    /// gradient of every parameter reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if numel(self.shape(loss)) != 1 {
            return Err(mismatch("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = numel(&self.nodes[v.0].shape);
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>], out: &mut Gradients<F>) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match out.by_param.get_mut(id) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
                None => {
                    out.by_param.insert(*id, g.to_vec());
                }
            },
            &Op::MatMul { a, b, rows, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.grad_slot(grads, a) {
                    gemm_acc(g, bv, ga, rows, n, k, false, true);
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    gemm_acc(av, g, gb, k, rows, n, true, false);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.grad_slot(grads, a) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if ta {
                            gemm_acc(bi, gi, dst, k, n, m, tb, true);
                        } else {
                            gemm_acc(gi, bi, dst, m, n, k, false, !tb);
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if tb {
                            gemm_acc(gi, ai, dst, n, m, k, true, ta);
                        } else {
                            gemm_acc(ai, gi, dst, k, m, n, !ta, false);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    axpy(F::one(), g, ga);
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    axpy(F::one(), g, gb);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    axpy(F::one(), g, ga);
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    axpy(-F::one(), g, gb);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.grad_slot(grads, a) {
                    for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    for ((d, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            &Op::Affine { x, scale } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    axpy(scale, g, gx);
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    axpy(F::one(), g, gx);
                }
                if let Some(gb) = self.grad_slot(grads, bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        axpy(F::one(), row, gb);
                    }
                }
            }
            &Op::MulScalar { x, s } => {
                let c = self.value(s)[0];
                let xv = self.value(x);
                if let Some(gx) = self.grad_slot(grads, x) {
                    axpy(c, g, gx);
                }
                if let Some(gs) = self.grad_slot(grads, s) {
                    gs[0] += dot(g, xv);
                }
            }
            Op::Concat { inputs, outer, inner } => {
                let total: usize = inputs.iter().map(|&(_, l)| l).sum();
                let mut offset = 0;
                for &(v, len) in inputs {
                    if let Some(gv) = self.grad_slot(grads, v) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            axpy(F::one(), src, &mut gv[o * len * inner..(o + 1) * len * inner]);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    for o in 0..outer {
                        let base = (o * axis_len + start) * inner;
                        axpy(F::one(), &g[o * len * inner..(o + 1) * len * inner], &mut gx[base..base + len * inner]);
                    }
                }
            }
            &Op::MeanAxis {
                x,
                outer,
                axis_len,
                inner,
            } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    let norm = F::one() / F::of(axis_len as f64);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for a in 0..axis_len {
                            let base = (o * axis_len + a) * inner;
                            axpy(norm, src, &mut gx[base..base + inner]);
                        }
                    }
                }
            }
            &Op::SumAll(x) => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Softmax { x, width } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    for ((yr, gr), dr) in node.value.chunks(width).zip(g.chunks(width)).zip(gx.chunks_mut(width)) {
                        let s = dot(yr, gr);
                        for j in 0..width {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let width = *node.shape.last().unwrap();
                let gam = self.value(*gamma);
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(width).zip(xhat.chunks(width)) {
                        for j in 0..width {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for gr in g.chunks(width) {
                        axpy(F::one(), gr, gb);
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let inv_w = F::one() / F::of(width as f64);
                    let mut dxhat = vec![F::zero(); width];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * width..(r + 1) * width];
                        let hr = &xhat[r * width..(r + 1) * width];
                        for j in 0..width {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<F>() * inv_w;
                        let mean_dh = dot(&dxhat, hr) * inv_w;
                        let dr = &mut gx[r * width..(r + 1) * width];
                        for j in 0..width {
                            dr[j] += inv * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                if let Some(gx) = self.grad_slot(grads, x) {
                    for ((d, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > F::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Tanh(x) => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    for ((d, &gv), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *d += gv * (F::one() - y * y);
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    for ((d, &gv), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *d += gv * y * (F::one() - y);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((d, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            &Op::Cosine { a, b, width } => {
                let (av, bv) = (self.value(a), self.value(b));
                let rows = av.len() / width;
                let need_a = self.nodes[a.0].needs_grad;
                let need_b = self.nodes[b.0].needs_grad;
                let mut da = vec![F::zero(); if need_a { av.len() } else { 0 }];
                let mut db = vec![F::zero(); if need_b { bv.len() } else { 0 }];
                for r in 0..rows {
                    let x = &av[r * width..(r + 1) * width];
                    let y = &bv[r * width..(r + 1) * width];
                    let nx = dot(x, x).sqrt();
                    let ny = dot(y, y).sqrt();
                    if (nx * ny).as_f64() < COSINE_MIN_NORM {
                        continue;
                    }
                    let c = node.value[r];
                    let gr = g[r];
                    if need_a {
                        let dst = &mut da[r * width..(r + 1) * width];
                        for j in 0..width {
                            dst[j] = gr * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                        }
                    }
                    if need_b {
                        let dst = &mut db[r * width..(r + 1) * width];
                        for j in 0..width {
                            dst[j] = gr * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                        }
                    }
                }
                if let Some(ga) = self.grad_slot(grads, a) {
                    axpy(F::one(), &da, ga);
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    axpy(F::one(), &db, gb);
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        if i == 0 {
                            continue;
                        }
                        let i = i as usize;
                        axpy(F::one(), &g[r * d..(r + 1) * d], &mut gt[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::BagMean { table, ids, bag } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (r, chunk) in ids.chunks(*bag).enumerate() {
                        let count = chunk.iter().filter(|&&i| i != 0).count();
                        if count == 0 {
                            continue;
                        }
                        let w = F::one() / F::of(count as f64);
                        for &i in chunk.iter().filter(|&&i| i != 0) {
                            let i = i as usize;
                            axpy(w, &g[r * d..(r + 1) * d], &mut gt[i * d..(i + 1) * d]);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                tq,
                tk,
                probs,
            } => self.backprop_attention(grads, g, *q, *k, *v, *heads, *tq, *tk, probs),
            Op::AddRowsMasked { x, rows, mask, t } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    axpy(F::one(), g, gx);
                }
                if let Some(gr) = self.grad_slot(grads, *rows) {
                    let d = *node.shape.last().unwrap();
                    let batch = node.shape[0];
                    for b in 0..batch {
                        for p in 0..*t {
                            let m = mask[b * t + p];
                            if m != F::zero() {
                                let o = (b * t + p) * d;
                                axpy(m, &g[o..o + d], &mut gr[b * d..(b + 1) * d]);
                            }
                        }
                    }
                }
            }
            Op::TakeRows { x, idx, t } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let d = node.shape[1];
                    for (b, &i) in idx.iter().enumerate() {
                        let o = (b * t + i) * d;
                        axpy(F::one(), &g[b * d..(b + 1) * d], &mut gx[o..o + d]);
                    }
                }
            }
            Op::Membership {
                lo,
                hi,
                valid,
                t,
                tau,
                fallback,
            } => {
                let (lv, hv) = (self.value(*lo), self.value(*hi));
                let n = self.shape(*lo)[1];
                let mut dlo = vec![F::zero(); lv.len()];
                let mut dhi = vec![F::zero(); hv.len()];
                let half = F::of(0.5);
                for (r, (dl, dh)) in dlo.iter_mut().zip(dhi.iter_mut()).enumerate() {
                    if fallback[r] {
                        continue;
                    }
                    let b = r / n;
                    for p in 0..valid[b] {
                        let mid = F::of(p as f64) + half;
                        let sa = sigmoid((mid - lv[r]) / *tau);
                        let sb = sigmoid((hv[r] - mid) / *tau);
                        let gv = g[r * t + p];
                        *dl += gv * (-sa * (F::one() - sa) / *tau) * sb;
                        *dh += gv * sa * (sb * (F::one() - sb) / *tau);
                    }
                }
                if let Some(gl) = self.grad_slot(grads, *lo) {
                    axpy(F::one(), &dlo, gl);
                }
                if let Some(gh) = self.grad_slot(grads, *hi) {
                    axpy(F::one(), &dhi, gh);
                }
            }
            Op::ResolveRanges { center, half, partials } => {
                let mut dc = vec![F::zero(); partials.len()];
                let mut ds = vec![F::zero(); partials.len()];
                for (i, p) in partials.iter().enumerate() {
                    let (gl, gh) = (g[2 * i], g[2 * i + 1]);
                    dc[i] = gl * p[0] + gh * p[2];
                    ds[i] = gl * p[1] + gh * p[3];
                }
                if let Some(gc) = self.grad_slot(grads, *center) {
                    axpy(F::one(), &dc, gc);
                }
                if let Some(gs) = self.grad_slot(grads, *half) {
                    axpy(F::one(), &ds, gs);
                }
            }
            &Op::RowNormalize { x, width } => {
                let xv = self.value(x);
                if let Some(gx) = self.grad_slot(grads, x) {
                    for ((xr, (yr, gr)), dr) in xv
                        .chunks(width)
                        .zip(node.value.chunks(width).zip(g.chunks(width)))
                        .zip(gx.chunks_mut(width))
                    {
                        let total: F = xr.iter().copied().sum();
                        let s = dot(gr, yr);
                        for j in 0..width {
                            dr[j] += (gr[j] - s) / total;
                        }
                    }
                }
            }
            &Op::Bce { scores, batch, cands } => {
                let sv = self.value(scores);
                if let Some(gs) = self.grad_slot(grads, scores) {
                    let lo = F::of(BCE_CLAMP);
                    let hi = F::one() - lo;
                    let w = g[0] / F::of(batch as f64);
                    for (r, row) in sv.chunks(cands).enumerate() {
                        for (c, &y) in row.iter().enumerate() {
                            let p = sigmoid(y);
                            if p <= lo || p >= hi {
                                continue;
                            }
                            let d = if c == 0 { p - F::one() } else { p };
                            gs[r * cands + c] += w * d;
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    axpy(F::one(), g, gx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        grads: &mut [Option<Vec<F>>],
        g: &[F],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        tq: usize,
        tk: usize,
        probs: &[F],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = self.shape(q)[2];
        let batch = self.shape(q)[0];
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut dq = vec![F::zero(); qv.len()];
        let mut dk = vec![F::zero(); kv.len()];
        let mut dv = vec![F::zero(); vv.len()];
        let mut dp = vec![F::zero(); tk];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..tq {
                    let p = &probs[((b * heads + h) * tq + i) * tk..((b * heads + h) * tq + i + 1) * tk];
                    let grow = &g[(b * tq + i) * d + col..(b * tq + i) * d + col + dh];
                    let mut s = F::zero();
                    for j in 0..tk {
                        if p[j] == F::zero() {
                            dp[j] = F::zero();
                            continue;
                        }
                        let vo = (b * tk + j) * d + col;
                        dp[j] = dot(grow, &vv[vo..vo + dh]);
                        s += p[j] * dp[j];
                        axpy(p[j], grow, &mut dv[vo..vo + dh]);
                    }
                    let qo = (b * tq + i) * d + col;
                    for j in 0..tk {
                        if p[j] == F::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        let ko = (b * tk + j) * d + col;
                        axpy(ds, &kv[ko..ko + dh], &mut dq[qo..qo + dh]);
                        axpy(ds, &qv[qo..qo + dh], &mut dk[ko..ko + dh]);
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = self.grad_slot(grads, var) {
                axpy(F::one(), &delta, slot);
            }
        }
    }
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
