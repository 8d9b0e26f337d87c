use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng as _;

use super::{axis_split, gemm, Param, ParamId, Tensor};
use crate::error::{Error, Result};
use crate::seed;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    TransposeLast2 { x: usize, batch: usize, m: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddAxis { x: usize, b: usize, split: (usize, usize, usize) },
    MulAxis { x: usize, b: usize, split: (usize, usize, usize) },
    Scale { x: usize, c: f64 },
    Offset { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    Concat { inputs: Vec<usize>, outer: usize, chunks: Vec<usize> },
    Slice { x: usize, outer: usize, full: usize, start: usize, len: usize },
    Reshape { x: usize },
    Relu { x: usize },
    LeakyRelu { x: usize, slope: f64 },
    Tanh { x: usize },
    Softplus { x: usize },
    Softmax { x: usize, n: usize },
    Conv1d { x: usize, w: usize, b: Option<usize>, batch: usize, cin: usize, cout: usize, len: usize, k: usize, cols: Vec<f64> },
    BatchNorm { x: usize, gamma: usize, beta: usize, batch: usize, c: usize, l: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Upsample { x: usize, len: usize },
    Downsample { x: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Source of the noise used by stochastic layers. `Off` makes every draw
/// zero so that forward passes are deterministic functions of their inputs.
#[derive(Debug, Clone)]
pub enum Noise {
    Off,
    On(seed::Rng),
}

impl Noise {
    pub fn seeded(seed: u64) -> Self {
        Noise::On(seed::rng(seed))
    }

    pub fn is_on(&self) -> bool {
        matches!(self, Noise::On(_))
    }

    pub fn normal(&mut self) -> f64 {
        match self {
            Noise::Off => 0.0,
            Noise::On(rng) => crate::transform::vgm::standard_normal(rng),
        }
    }

    pub fn gumbel(&mut self) -> f64 {
        match self {
            Noise::Off => 0.0,
            Noise::On(rng) => {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                -(-u.ln()).ln()
            }
        }
    }
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Records operations for reverse-mode differentiation. Nodes are appended
/// in evaluation order, so reverse index order is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen: Vec<u16>,
    kinks: Option<u64>,
}

/// Gradients from one backward pass.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Source position and weight of the right neighbour for ×2 linear
/// upsampling with half-pixel centres.
/// Reusable buffers for conv temporaries; every use overwrites what it reads.
#[derive(Default)]
struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Scratch {
    fn first(&mut self, n: usize) -> &mut [f64] {
        if self.a.len() < n {
            self.a.resize(n, 0.0);
        }
        &mut self.a[..n]
    }

    fn pair(&mut self, n: usize, m: usize) -> (&mut [f64], &mut [f64]) {
        if self.a.len() < n {
            self.a.resize(n, 0.0);
        }
        if self.b.len() < m {
            self.b.resize(m, 0.0);
        }
        (&mut self.a[..n], &mut self.b[..m])
    }
}

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

/// Columns [C_in·K, B·L] for a same-padded kernel of odd width K.
fn im2col(x: &[f64], batch: usize, cin: usize, len: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut cols = Vec::with_capacity(cin * k * batch * len);
    for ci in 0..cin {
        for kk in 0..k {
            for bb in 0..batch {
                let src = &x[(bb * cin + ci) * len..(bb * cin + ci + 1) * len];
                if kk < pad {
                    let s = pad - kk;
                    let s = s.min(len);
                    cols.extend(std::iter::repeat_n(0.0, s));
                    cols.extend_from_slice(&src[..len - s]);
                } else {
                    let s = (kk - pad).min(len);
                    cols.extend_from_slice(&src[s..]);
                    cols.extend(std::iter::repeat_n(0.0, s));
                }
            }
        }
    }
    cols
}

/// Adds column gradients back onto the input layout [B, C_in, L].
fn col2im_add(gcols: &[f64], gx: &mut [f64], batch: usize, cin: usize, len: usize, k: usize) {
    let pad = k / 2;
    let bl = batch * len;
    for ci in 0..cin {
        for kk in 0..k {
            let row = &gcols[(ci * k + kk) * bl..(ci * k + kk + 1) * bl];
            for bb in 0..batch {
                let dst = &mut gx[(bb * cin + ci) * len..(bb * cin + ci + 1) * len];
                let src = &row[bb * len..(bb + 1) * len];
                if kk < pad {
                    let s = (pad - kk).min(len);
                    for (d, v) in dst[..len - s].iter_mut().zip(&src[s..]) {
                        *d += v;
                    }
                } else {
                    let s = (kk - pad).min(len);
                    for (d, v) in dst[s..].iter_mut().zip(&src[..len - s]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn upsample_coords(j: usize, len: usize) -> (usize, usize, f64) {
    let src = ((j as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters from `namespace` are recorded as constants.
    pub fn freeze(&mut self, namespace: u16) {
        if !self.frozen.contains(&namespace) {
            self.frozen.push(namespace);
        }
    }

    /// Start hashing the sign pattern of every ReLU-family input.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    fn note_kinks(&mut self, xs: &[f64]) {
        if let Some(h) = self.kinks.as_mut() {
            for &x in xs {
                *h ^= (x > 0.0) as u64 + 1;
                *h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input that is not a network parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter once per tape; later calls return the same var.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(v) = self.params.get(&p.id) {
            return *v;
        }
        let trainable = !self.frozen.contains(&p.id.namespace());
        let v = self.push(p.value.clone(), Op::Leaf, trainable);
        if trainable {
            self.params.insert(p.id, v);
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err("matmul", ta, tb)),
        };
        let mut out = vec![0.0; m * n];
        gemm(false, false, m, n, k, ta.data(), tb.data(), &mut out, false);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a: a.0, b: b.0, m, k, n }, rg))
    }

    /// Batched matmul of [B, m, k] by [B, k, n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (batch, m, k, n) = match (ta.shape(), tb.shape()) {
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(shape_err("bmm", ta, tb)),
        };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                false,
                false,
                m,
                n,
                k,
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::Bmm { a: a.0, b: b.0, batch, m, k, n },
            rg,
        ))
    }

    /// Swaps the last two axes of a 3-D tensor.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[batch, m, n] = t.shape() else {
            return Err(Error::Tensor(format!("transpose_last2 needs 3-D input, got {:?}", t.shape())));
        };
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for b in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    out[b * m * n + j * m + i] = d[b * m * n + i * n + j];
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::new(vec![batch, n, m], out)?, Op::TransposeLast2 { x: x.0, batch, m, n }, rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Sub { a: a.0, b: b.0 }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    fn axis_args(&self, x: Var, b: Var, axis: usize, name: &'static str) -> Result<(usize, usize, usize)> {
        let (tx, tb) = (self.value(x), self.value(b));
        if axis >= tx.shape().len() || tb.shape() != [tx.shape()[axis]] {
            return Err(shape_err(name, tx, tb));
        }
        Ok(axis_split(tx.shape(), axis))
    }

    /// Adds the 1-D `b` along `axis` of `x`.
    pub fn add_axis(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let split = self.axis_args(x, b, axis, "add_axis")?;
        let (_, n, inner) = split;
        let bv = self.value(b).data().to_vec();
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[(i / inner) % n])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x.0) || self.rg(b.0);
        Ok(self.push(t, Op::AddAxis { x: x.0, b: b.0, split }, rg))
    }

    /// Multiplies `x` by the 1-D `b` along `axis`.
    pub fn mul_axis(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let split = self.axis_args(x, b, axis, "mul_axis")?;
        let (_, n, inner) = split;
        let bv = self.value(b).data().to_vec();
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * bv[(i / inner) % n])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x.0) || self.rg(b.0);
        Ok(self.push(t, Op::MulAxis { x: x.0, b: b.0, split }, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v * c);
        let rg = self.rg(x.0);
        self.push(t, Op::Scale { x: x.0, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v + c);
        let rg = self.rg(x.0);
        self.push(t, Op::Offset { x: x.0 }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Tensor("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::scalar(s), Op::Mean { x: x.0 }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Tensor("concat of nothing".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Tensor(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in xs {
            let s = self.value(*v).shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", self.value(*first), self.value(*v)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let chunks: Vec<usize> = xs.iter().map(|v| self.value(*v).shape()[axis] * inner).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &c) in xs.iter().zip(&chunks) {
                data.extend_from_slice(&self.value(*v).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|v| self.rg(v.0));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: xs.iter().map(|v| v.0).collect(),
                outer,
                chunks,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Tensor(format!(
                "slice [{start}, {}) on axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let (full, s, l) = (n * inner, start * inner, len * inner);
        let mut data = Vec::with_capacity(outer * l);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[o * full + s..o * full + s + l]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice { x: x.0, outer, full, start: s, len: l },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x.0);
        Ok(self.push(t, Op::Reshape { x: x.0 }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if self.kinks.is_some() {
            let d = self.value(x).data().to_vec();
            self.note_kinks(&d);
        }
        let t = self.map(x, |v| v.max(0.0));
        let rg = self.rg(x.0);
        self.push(t, Op::Relu { x: x.0 }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        if self.kinks.is_some() {
            let d = self.value(x).data().to_vec();
            self.note_kinks(&d);
        }
        let t = self.map(x, |v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x.0);
        self.push(t, Op::LeakyRelu { x: x.0, slope }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        let rg = self.rg(x.0);
        self.push(t, Op::Tanh { x: x.0 }, rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.map(x, softplus);
        let rg = self.rg(x.0);
        self.push(t, Op::Softplus { x: x.0 }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or_else(|| Error::Tensor("softmax of a scalar".into()))?;
        if n == 0 {
            return Err(Error::Tensor("softmax over an empty axis".into()));
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::Softmax { x: x.0, n }, rg))
    }

    /// Same-padded, stride-1 1-D convolution.
    /// x: [B, C_in, L], w: [C_out, C_in, K] with K odd, b: [C_out].
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (batch, cin, len, cout, k) = match (tx.shape(), tw.shape()) {
            ([bb, ci, l], [co, ci2, k]) if ci == ci2 && k % 2 == 1 => (*bb, *ci, *l, *co, *k),
            _ => return Err(shape_err("conv1d", tx, tw)),
        };
        if let Some(bv) = b {
            if self.value(bv).shape() != [cout] {
                return Err(shape_err("conv1d bias", tw, self.value(bv)));
            }
        }
        let bl = batch * len;
        let cols = im2col(tx.data(), batch, cin, len, k);
        let bias = b.map(|v| self.value(v).data());
        let mut out = Vec::with_capacity(batch * cout * len);
        SCRATCH.with(|cell| {
            let mut scratch = cell.borrow_mut();
            let tmp = scratch.first(cout * bl);
            gemm(false, false, cout, bl, cin * k, tw.data(), &cols, tmp, false);
            for bb in 0..batch {
                for co in 0..cout {
                    let bc = bias.map_or(0.0, |bv| bv[co]);
                    out.extend(tmp[co * bl + bb * len..co * bl + (bb + 1) * len].iter().map(|s| s + bc));
                }
            }
        });
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|v| self.rg(v.0));
        Ok(self.push(
            Tensor::new(vec![batch, cout, len], out)?,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                batch,
                cin,
                cout,
                len,
                k,
                cols,
            },
            rg,
        ))
    }

    /// Per-channel normalization of x: [B, C] or [B, C, L]. In training mode
    /// the biased batch statistics are used and returned; otherwise the
    /// supplied running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let tx = self.value(x);
        let (batch, c, l) = match tx.shape() {
            [b, c] => (*b, *c, 1),
            [b, c, l] => (*b, *c, *l),
            _ => return Err(Error::Tensor(format!("batch_norm needs 2-D or 3-D input, got {:?}", tx.shape()))),
        };
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err("batch_norm", tx, self.value(gamma)));
        }
        if !(eps > 0.0) {
            return Err(Error::Tensor("batch_norm eps must be positive".into()));
        }
        let n = (batch * l) as f64;
        let xd = tx.data();
        let train = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::Tensor("running statistics have the wrong channel count".into()));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                if batch * l == 0 {
                    return Err(Error::Tensor("batch_norm on an empty batch".into()));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..batch {
                    for ch in 0..c {
                        for v in &xd[(b * c + ch) * l..(b * c + ch + 1) * l] {
                            mean[ch] += v;
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for b in 0..batch {
                    for ch in 0..c {
                        for v in &xd[(b * c + ch) * l..(b * c + ch + 1) * l] {
                            var[ch] += (v - mean[ch]).powi(2);
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for ch in 0..c {
                for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + be[ch];
                }
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                batch,
                c,
                l,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, train.then_some(BatchStats { mean, var })))
    }

    /// ×2 linear interpolation along the last axis (half-pixel centres).
    pub fn upsample(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let len = *t.shape().last().ok_or_else(|| Error::Tensor("upsample of a scalar".into()))?;
        if len == 0 {
            return Err(Error::Tensor("upsample of an empty axis".into()));
        }
        let coords: Vec<_> = (0..2 * len).map(|j| upsample_coords(j, len)).collect();
        let mut data = Vec::with_capacity(t.len() * 2);
        for row in t.data().chunks(len) {
            data.extend(coords.iter().map(|&(i0, i1, w)| (1.0 - w) * row[i0] + w * row[i1]));
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() *= 2;
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::new(shape, data)?, Op::Upsample { x: x.0, len }, rg))
    }

    /// Average pooling by 2 along the last axis, which must have even length.
    pub fn downsample(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let len = *t.shape().last().ok_or_else(|| Error::Tensor("downsample of a scalar".into()))?;
        if len % 2 != 0 {
            return Err(Error::Tensor(format!("downsample needs an even length, got {len}")));
        }
        let data = t.data().chunks(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() /= 2;
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::new(shape, data)?, Op::Downsample { x: x.0 }, rg))
    }

    /// softmax((logits + g)/τ) over the last axis with Gumbel noise g.
    pub fn gumbel_softmax(&mut self, logits: Var, tau: f64, noise: &mut Noise) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Tensor(format!("Gumbel temperature must be positive, got {tau}")));
        }
        let shape = self.shape(logits).to_vec();
        let g: Vec<f64> = (0..self.value(logits).len()).map(|_| noise.gumbel()).collect();
        let g = self.constant(Tensor::new(shape, g)?);
        let perturbed = self.add(logits, g)?;
        let scaled = self.scale(perturbed, 1.0 / tau);
        self.softmax(scaled)
    }

    /// μ + σ⊙ε with ε ~ N(0, I), so gradients reach both μ and σ.
    pub fn gaussian_sample(&mut self, mu: Var, sigma: Var, noise: &mut Noise) -> Result<Var> {
        if self.value(sigma).data().iter().any(|s| *s < 0.0) {
            return Err(Error::Tensor("gaussian_sample needs non-negative sigma".into()));
        }
        let shape = self.shape(sigma).to_vec();
        let e: Vec<f64> = (0..self.value(sigma).len()).map(|_| noise.normal()).collect();
        let e = self.constant(Tensor::new(shape, e)?);
        let spread = self.mul(sigma, e)?;
        self.add(mu, spread)
    }

    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Tensor(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Tensor("loss does not depend on any differentiable input".into()));
        }
        let mut g: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        g.resize_with(self.nodes.len(), || None);
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = g[i].take() else { continue };
            self.backward_node(i, &gy, &mut g);
            g[i] = Some(gy);
        }
        Ok(Grads {
            grads: g,
            params: self.params.clone(),
        })
    }

    fn acc<'g>(&self, g: &'g mut [Option<Vec<f64>>], i: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let n = self.nodes[i].value.len();
        Some(g[i].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, i: usize, gy: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.acc(g, a) {
                    gemm(false, true, m, k, n, gy, val(b), ga, true);
                }
                if let Some(gb) = self.acc(g, b) {
                    gemm(true, false, k, n, m, val(a), gy, gb, true);
                }
            }
            &Op::Bmm { a, b, batch, m, k, n } => {
                for bi in 0..batch {
                    let gyb = &gy[bi * m * n..(bi + 1) * m * n];
                    if let Some(ga) = self.acc(g, a) {
                        let bv = &val(b)[bi * k * n..(bi + 1) * k * n];
                        gemm(false, true, m, k, n, gyb, bv, &mut ga[bi * m * k..(bi + 1) * m * k], true);
                    }
                    if let Some(gb) = self.acc(g, b) {
                        let av = &val(a)[bi * m * k..(bi + 1) * m * k];
                        gemm(true, false, k, n, m, av, gyb, &mut gb[bi * k * n..(bi + 1) * k * n], true);
                    }
                }
            }
            &Op::TransposeLast2 { x, batch, m, n } => {
                if let Some(gx) = self.acc(g, x) {
                    for b in 0..batch {
                        for r in 0..m {
                            for c in 0..n {
                                gx[b * m * n + r * n + c] += gy[b * m * n + c * m + r];
                            }
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(ga) = self.acc(g, a) {
                    add_into(ga, gy);
                }
                if let Some(gb) = self.acc(g, b) {
                    add_into(gb, gy);
                }
            }
            &Op::Sub { a, b } => {
                if let Some(ga) = self.acc(g, a) {
                    add_into(ga, gy);
                }
                if let Some(gb) = self.acc(g, b) {
                    gb.iter_mut().zip(gy).for_each(|(d, s)| *d -= s);
                }
            }
            &Op::Mul { a, b } => {
                if let Some(ga) = self.acc(g, a) {
                    for ((d, s), o) in ga.iter_mut().zip(gy).zip(val(b)) {
                        *d += s * o;
                    }
                }
                if let Some(gb) = self.acc(g, b) {
                    for ((d, s), o) in gb.iter_mut().zip(gy).zip(val(a)) {
                        *d += s * o;
                    }
                }
            }
            &Op::AddAxis { x, b, split: (_, n, inner) } => {
                if let Some(gx) = self.acc(g, x) {
                    add_into(gx, gy);
                }
                if let Some(gb) = self.acc(g, b) {
                    for (idx, s) in gy.iter().enumerate() {
                        gb[(idx / inner) % n] += s;
                    }
                }
            }
            &Op::MulAxis { x, b, split: (_, n, inner) } => {
                if let Some(gx) = self.acc(g, x) {
                    let bv = val(b);
                    for (idx, (d, s)) in gx.iter_mut().zip(gy).enumerate() {
                        *d += s * bv[(idx / inner) % n];
                    }
                }
                if let Some(gb) = self.acc(g, b) {
                    for (idx, (s, xv)) in gy.iter().zip(val(x)).enumerate() {
                        gb[(idx / inner) % n] += s * xv;
                    }
                }
            }
            &Op::Scale { x, c } => {
                if let Some(gx) = self.acc(g, x) {
                    gx.iter_mut().zip(gy).for_each(|(d, s)| *d += c * s);
                }
            }
            &Op::Offset { x } | &Op::Reshape { x } => {
                if let Some(gx) = self.acc(g, x) {
                    add_into(gx, gy);
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = self.acc(g, x) {
                    gx.iter_mut().for_each(|d| *d += gy[0]);
                }
            }
            &Op::Mean { x } => {
                if let Some(gx) = self.acc(g, x) {
                    let s = gy[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Concat { inputs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut off = 0;
                for (&inp, &c) in inputs.iter().zip(chunks) {
                    if let Some(gx) = self.acc(g, inp) {
                        for o in 0..*outer {
                            add_into(&mut gx[o * c..(o + 1) * c], &gy[o * total + off..o * total + off + c]);
                        }
                    }
                    off += c;
                }
            }
            &Op::Slice { x, outer, full, start, len } => {
                if let Some(gx) = self.acc(g, x) {
                    for o in 0..outer {
                        add_into(&mut gx[o * full + start..o * full + start + len], &gy[o * len..(o + 1) * len]);
                    }
                }
            }
            &Op::Relu { x } => {
                if let Some(gx) = self.acc(g, x) {
                    for ((d, s), xv) in gx.iter_mut().zip(gy).zip(val(x)) {
                        if *xv > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            &Op::LeakyRelu { x, slope } => {
                if let Some(gx) = self.acc(g, x) {
                    for ((d, s), xv) in gx.iter_mut().zip(gy).zip(val(x)) {
                        *d += if *xv > 0.0 { *s } else { slope * s };
                    }
                }
            }
            &Op::Tanh { x } => {
                if let Some(gx) = self.acc(g, x) {
                    for ((d, s), yv) in gx.iter_mut().zip(gy).zip(y) {
                        *d += s * (1.0 - yv * yv);
                    }
                }
            }
            &Op::Softplus { x } => {
                if let Some(gx) = self.acc(g, x) {
                    for ((d, s), xv) in gx.iter_mut().zip(gy).zip(val(x)) {
                        *d += s * sigmoid(*xv);
                    }
                }
            }
            &Op::Softmax { x, n } => {
                if let Some(gx) = self.acc(g, x) {
                    for ((dr, sr), yr) in gx.chunks_mut(n).zip(gy.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = sr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, s), yv) in dr.iter_mut().zip(sr).zip(yr) {
                            *d += yv * (s - dot);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, batch, cin, cout, len, k, cols } => {
                let (x, w, batch, cin, cout, len, k) = (*x, *w, *batch, *cin, *cout, *len, *k);
                let bl = batch * len;
                SCRATCH.with(|cell| {
                    let mut scratch = cell.borrow_mut();
                    let (gtmp, gcols) = scratch.pair(cout * bl, cin * k * bl);
                    for bb in 0..batch {
                        for co in 0..cout {
                            gtmp[co * bl + bb * len..co * bl + (bb + 1) * len]
                                .copy_from_slice(&gy[(bb * cout + co) * len..(bb * cout + co + 1) * len]);
                        }
                    }
                    if let Some(gb) = b.and_then(|b| self.acc(g, b)) {
                        for co in 0..cout {
                            gb[co] += gtmp[co * bl..(co + 1) * bl].iter().sum::<f64>();
                        }
                    }
                    if let Some(gw) = self.acc(g, w) {
                        gemm(false, true, cout, cin * k, bl, gtmp, cols, gw, true);
                    }
                    if self.nodes[x].requires_grad {
                        gemm(true, false, cin * k, bl, cout, val(w), gtmp, gcols, false);
                        col2im_add(gcols, self.acc(g, x).unwrap(), batch, cin, len, k);
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, batch, c, l, xhat, inv_std, train } => {
                let (batch, c, l) = (*batch, *c, *l);
                let gv = val(*gamma);
                if let Some(gb) = self.acc(g, *beta) {
                    for b in 0..batch {
                        for ch in 0..c {
                            gb[ch] += gy[(b * c + ch) * l..(b * c + ch + 1) * l].iter().sum::<f64>();
                        }
                    }
                }
                if let Some(gg) = self.acc(g, *gamma) {
                    for b in 0..batch {
                        for ch in 0..c {
                            let r = (b * c + ch) * l..(b * c + ch + 1) * l;
                            gg[ch] += gy[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(gx) = self.acc(g, *x) {
                    if *train {
                        let n = (batch * l) as f64;
                        let mut s1 = vec![0.0; c];
                        let mut s2 = vec![0.0; c];
                        for b in 0..batch {
                            for ch in 0..c {
                                for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                                    let d = gy[i] * gv[ch];
                                    s1[ch] += d;
                                    s2[ch] += d * xhat[i];
                                }
                            }
                        }
                        for b in 0..batch {
                            for ch in 0..c {
                                for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                                    let d = gy[i] * gv[ch];
                                    gx[i] += inv_std[ch] / n * (n * d - s1[ch] - xhat[i] * s2[ch]);
                                }
                            }
                        }
                    } else {
                        for b in 0..batch {
                            for ch in 0..c {
                                for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                                    gx[i] += gy[i] * gv[ch] * inv_std[ch];
                                }
                            }
                        }
                    }
                }
            }
            &Op::Upsample { x, len } => {
                if let Some(gx) = self.acc(g, x) {
                    let coords: Vec<_> = (0..2 * len).map(|j| upsample_coords(j, len)).collect();
                    for (dr, sr) in gx.chunks_mut(len).zip(gy.chunks(2 * len)) {
                        for (&(i0, i1, w), s) in coords.iter().zip(sr) {
                            dr[i0] += (1.0 - w) * s;
                            dr[i1] += w * s;
                        }
                    }
                }
            }
            &Op::Downsample { x } => {
                if let Some(gx) = self.acc(g, x) {
                    for (j, s) in gy.iter().enumerate() {
                        gx[2 * j] += 0.5 * s;
                        gx[2 * j + 1] += 0.5 * s;
                    }
                }
            }
        }
    }
}
