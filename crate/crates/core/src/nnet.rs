//! Reverse-mode differentiation over a closed op set, with SGD and Adam.
//!
//! Parameters live in a [`ParamStore`]. A [`Graph`] borrows the store,
//! records every op of one forward pass together with its output value, and
//! `backward` walks that record in reverse to produce [`Gradients`]. Each op
//! has a hand-written adjoint; there is no generic autodiff.
//!
//! Sequence tensors are `[batch, channels, time]`; matrices are
//! `[rows, cols]`; all storage is row-major `f64`.

use std::collections::HashMap;
use std::path::Path;

use ndarray::ArrayD;
use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::{rng_from, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims3(&self, op: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, c, t] => Ok((b, c, t)),
            _ => Err(Error::shape(format!("{op}: expected [batch, channels, time], got {:?}", self.shape))),
        }
    }

    fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("{op}: expected a matrix, got {:?}", self.shape))),
        }
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(self.shape.clone(), self.data.clone()).expect("consistent tensor")
    }

    pub fn from_array(a: &ArrayD<f64>) -> Self {
        Self { shape: a.shape().to_vec(), data: a.iter().copied().collect() }
    }
}

pub type ParamId = usize;

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.values.len();
        self.names.push(name.to_owned());
        self.values.push(value);
        self.index.insert(name.to_owned(), id);
        id
    }

    /// Adds a parameter with uniform `+-sqrt(6 / (fan_in + fan_out))` entries.
    pub fn add_xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor { shape: shape.to_vec(), data })
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total scalar parameter count.
    pub fn size(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients { grads: self.values.iter().map(|v| Tensor::zeros(&v.shape)).collect() }
    }
}

/// One gradient buffer per parameter, shaped like it.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id]
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Accumulates `other` into `self`.
    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }
}

/// Handle to a node of a [`Graph`].
pub type Var = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Asinh,
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Asinh => x.asinh(),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Asinh => 1.0 / (1.0 + x * x).sqrt(),
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, w: Var, b: Option<Var>, dilation: usize },
    Act { x: Var, kind: Activation },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Crop { x: Var, start: usize },
    Embedding { table: Var, ids: Vec<Option<usize>> },
    Concat { a: Var, b: Var },
    TimeStride { x: Var, offset: usize, stride: usize },
    Flatten { x: Var },
    Mix { x: Var, w: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Softmax { x: Var },
    SoftmaxCe { x: Var, probs: Vec<f64>, targets: Vec<usize>, weight: f64 },
    Mse { x: Var, target: Vec<f64> },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// One recorded forward pass over a borrowed parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    rng: Rng,
}

unsafe fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: *const f64,
    rsa: isize,
    csa: isize,
    b: *const f64,
    rsb: isize,
    csb: isize,
    c: *mut f64,
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc);
}

impl<'p> Graph<'p> {
    /// A graph in eval mode (dropout off).
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new(), training: false, rng: rng_from(0) }
    }

    /// A graph in training mode; dropout masks come from `seed`.
    pub fn training(params: &'p ParamStore, seed: u64) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new(), training: true, rng: rng_from(seed) }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v].op {
            Op::Param(id) => self.params.value(id),
            _ => self.nodes[v].value.as_ref().expect("node value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.value(v).shape
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = self.nodes.len() - 1;
        self.param_vars.insert(id, v);
        v
    }

    /// Parameter node by name.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name).ok_or_else(|| Error::Index(format!("no parameter named {name}")))?;
        Ok(self.param(id))
    }

    /// `x W + b` for `x: [N, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = self.value(x).dims2("affine input")?;
        let (win, fout) = self.value(w).dims2("affine weight")?;
        if fin != win {
            return Err(Error::shape(format!("affine: input width {fin} vs weight rows {win}")));
        }
        let mut out = vec![0.0; n * fout];
        if let Some(b) = b {
            let bv = &self.value(b).data;
            if bv.len() != fout {
                return Err(Error::shape(format!("affine: bias length {} vs {fout}", bv.len())));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);
        unsafe {
            gemm(n, fin, fout, xv.as_ptr(), fin as isize, 1, wv.as_ptr(), fout as isize, 1, out.as_mut_ptr(), fout as isize, 1);
        }
        Ok(self.push(Tensor { shape: vec![n, fout], data: out }, Op::Affine { x, w, b }))
    }

    /// Valid dilated convolution of `x: [B, Cin, T]` with `w: [Cout, Cin, K]`.
    ///
    /// Output `[B, Cout, T - (K - 1) d]`; output step `t` sees inputs
    /// `t, t + d, ..., t + (K - 1) d`, so it is aligned with its newest
    /// input and never sees the future.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (bs, cin, t) = self.value(x).dims3("conv1d input")?;
        let (cout, wcin, k) = self.value(w).dims3("conv1d weight")?;
        if wcin != cin {
            return Err(Error::shape(format!("conv1d: input has {cin} channels, kernel expects {wcin}")));
        }
        let span = (k - 1) * dilation;
        if t < span + 1 {
            return Err(Error::shape(format!(
                "conv1d: {t} timesteps are too short for kernel {k} with dilation {dilation}"
            )));
        }
        let to = t - span;
        let mut out = vec![0.0; bs * cout * to];
        if let Some(b) = b {
            let bv = &self.value(b).data;
            if bv.len() != cout {
                return Err(Error::shape(format!("conv1d: bias length {} vs {cout}", bv.len())));
            }
            for (i, row) in out.chunks_mut(to).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[i % cout]);
            }
        }
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);
        for bi in 0..bs {
            for kk in 0..k {
                unsafe {
                    gemm(
                        cout,
                        cin,
                        to,
                        wv.as_ptr().add(kk),
                        (cin * k) as isize,
                        k as isize,
                        xv.as_ptr().add(bi * cin * t + kk * dilation),
                        t as isize,
                        1,
                        out.as_mut_ptr().add(bi * cout * to),
                        to as isize,
                        1,
                    );
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![bs, cout, to], data: out }, Op::Conv { x, w, b, dilation }))
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let v = self.value(x);
        let data = v.data.iter().map(|&e| kind.apply(e)).collect();
        let shape = v.shape.clone();
        self.push(Tensor { shape, data }, Op::Act { x, kind })
    }

    pub fn asinh(&mut self, x: Var) -> Var {
        self.act(x, Activation::Asinh)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{op}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul { a, b }))
    }

    /// Elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }))
    }

    /// Samples `start..start + len` of every `[B, C, T]` row.
    pub fn crop_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (bs, c, t) = self.value(x).dims3("crop")?;
        if start + len > t {
            return Err(Error::shape(format!("crop: {start}..{} outside {t} timesteps", start + len)));
        }
        if start == 0 && len == t {
            return Ok(x);
        }
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(bs * c * len);
        for row in xv.chunks(t) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(Tensor { shape: vec![bs, c, len], data }, Op::Crop { x, start }))
    }

    /// Keeps the last `len` timesteps.
    pub fn crop_last(&mut self, x: Var, len: usize) -> Result<Var> {
        let t = self.value(x).dims3("crop")?.2;
        if len > t {
            return Err(Error::shape(format!("crop: cannot keep {len} of {t} timesteps")));
        }
        self.crop_time(x, t - len, len)
    }

    /// Looks up rows of `table: [V, E]` for `ids` laid out `[B, T]`; `None`
    /// yields a zero vector. Output `[B, E, T]`.
    pub fn embedding(&mut self, table: Var, ids: Vec<Option<usize>>, batch: usize) -> Result<Var> {
        let (v, e) = self.value(table).dims2("embedding table")?;
        if batch == 0 || !ids.len().is_multiple_of(batch) {
            return Err(Error::shape(format!("embedding: {} ids do not split into {batch} rows", ids.len())));
        }
        if let Some(bad) = ids.iter().flatten().find(|&&i| i >= v) {
            return Err(Error::Index(format!("embedding index {bad} outside table of {v} rows")));
        }
        let t = ids.len() / batch;
        let tv = &self.value(table).data;
        let mut data = vec![0.0; batch * e * t];
        for b in 0..batch {
            for tt in 0..t {
                if let Some(i) = ids[b * t + tt] {
                    for k in 0..e {
                        data[(b * e + k) * t + tt] = tv[i * e + k];
                    }
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![batch, e, t], data }, Op::Embedding { table, ids }))
    }

    /// Concatenates `[B, C1, T]` and `[B, C2, T]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ta) = self.value(a).dims3("concat")?;
        let (bb, cb, tb) = self.value(b).dims3("concat")?;
        if ba != bb || ta != tb {
            return Err(Error::shape(format!("concat: [{ba}, _, {ta}] vs [{bb}, _, {tb}]")));
        }
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(ba * (ca + cb) * ta);
        for i in 0..ba {
            data.extend_from_slice(&av[i * ca * ta..(i + 1) * ca * ta]);
            data.extend_from_slice(&bv[i * cb * tb..(i + 1) * cb * tb]);
        }
        Ok(self.push(Tensor { shape: vec![ba, ca + cb, ta], data }, Op::Concat { a, b }))
    }

    /// Keeps timesteps `offset, offset + stride, ...`.
    pub fn time_stride(&mut self, x: Var, offset: usize, stride: usize) -> Result<Var> {
        let (bs, c, t) = self.value(x).dims3("time_stride")?;
        if stride == 0 || offset >= t {
            return Err(Error::shape(format!("time_stride: offset {offset}, stride {stride} on {t} timesteps")));
        }
        let n = (t - offset).div_ceil(stride);
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(bs * c * n);
        for row in xv.chunks(t) {
            data.extend((0..n).map(|k| row[offset + k * stride]));
        }
        Ok(self.push(Tensor { shape: vec![bs, c, n], data }, Op::TimeStride { x, offset, stride }))
    }

    /// `[B, C, T]` to `[B, C * T]` (channel-major).
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (bs, c, t) = self.value(x).dims3("flatten")?;
        let data = self.value(x).data.clone();
        Ok(self.push(Tensor { shape: vec![bs, c * t], data }, Op::Flatten { x }))
    }

    /// Mixes consecutive groups of `G` batch rows with `w: [G, G]`:
    /// row `n G + g` becomes `sum_h w[g, h] x[n G + h]`.
    pub fn mix_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (bs, c, t) = self.value(x).dims3("mix")?;
        let (g, g2) = self.value(w).dims2("mix weight")?;
        if g != g2 || bs % g != 0 {
            return Err(Error::shape(format!("mix: batch {bs} is not a multiple of group {g}x{g2}")));
        }
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);
        let row = c * t;
        let mut data = vec![0.0; bs * row];
        for n in 0..bs / g {
            unsafe {
                gemm(g, g, row, wv.as_ptr(), g as isize, 1, xv.as_ptr().add(n * g * row), row as isize, 1, data.as_mut_ptr().add(n * g * row), row as isize, 1);
            }
        }
        Ok(self.push(Tensor { shape: vec![bs, c, t], data }, Op::Mix { x, w }))
    }

    /// Inverted dropout: in training mode zeroes each entry with probability
    /// `rate` and scales survivors by `1 / (1 - rate)`; identity otherwise.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let v = self.value(x);
        let data = v.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = v.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Dropout { x, mask }))
    }

    fn class_layout(&self, x: Var, op: &str) -> Result<(usize, usize, usize)> {
        match self.shape(x) {
            [n, k] => Ok((*n, *k, 1)),
            [n, k, t] => Ok((*n, *k, *t)),
            s => Err(Error::shape(format!("{op}: expected [N, K] or [N, K, T], got {s:?}"))),
        }
    }

    /// Softmax over axis 1.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, k, t) = self.class_layout(x, "softmax")?;
        let probs = softmax_axis1(&self.value(x).data, n, k, t);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor { shape, data: probs }, Op::Softmax { x }))
    }

    /// Mean softmax cross-entropy over axis 1; `targets` are laid out
    /// `[N, T]`.
    pub fn softmax_cross_entropy(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let (n, k, t) = self.class_layout(x, "cross-entropy")?;
        if targets.len() != n * t {
            return Err(Error::shape(format!("cross-entropy: {} targets for {} positions", targets.len(), n * t)));
        }
        if let Some(bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::Index(format!("target class {bad} outside {k} classes")));
        }
        let xv = &self.value(x).data;
        let probs = softmax_axis1(xv, n, k, t);
        let mut loss = 0.0;
        for i in 0..n {
            for tt in 0..t {
                let c = targets[i * t + tt];
                let idx = (i * k + c) * t + tt;
                loss -= log_softmax_at(xv, i, k, t, tt, idx);
            }
        }
        let np = (n * t) as f64;
        let op = Op::SoftmaxCe { x, probs, targets: targets.to_vec(), weight: 1.0 / np };
        Ok(self.push(Tensor::scalar(loss / np), op))
    }

    /// Class probabilities computed by a cross-entropy node.
    pub fn ce_probs(&self, loss: Var) -> Option<&[f64]> {
        match &self.nodes[loss].op {
            Op::SoftmaxCe { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape.as_slice() {
            return Err(Error::shape(format!("mse: prediction {:?} vs target {:?}", self.shape(x), target.shape)));
        }
        let xv = &self.value(x).data;
        let n = xv.len().max(1) as f64;
        let loss = xv.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { x, target: target.data.clone() }))
    }

    /// Gradients of a scalar node with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!("backward: loss must be a scalar, got {:?}", self.shape(loss))));
        }
        self.backward_with(loss, Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if !self.training {
            return Err(Error::State("backward needs a forward pass recorded in training mode".into()));
        }
        if out >= self.nodes.len() {
            return Err(Error::State("backward called before forward".into()));
        }
        if seed.shape != self.shape(out) {
            return Err(Error::shape(format!("backward seed {:?} vs output {:?}", seed.shape, self.shape(out))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=out).map(|_| None).collect();
        grads[out] = Some(seed.data);
        let mut pgrads = self.params.zero_gradients();
        for v in (0..=out).rev() {
            let Some(g) = grads[v].take() else { continue };
            match &self.nodes[v].op {
                Op::Input => {}
                Op::Param(id) => {
                    pgrads.grads[*id].data.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                op => self.adjoint(op, v, &g, &mut grads),
            }
        }
        Ok(pgrads)
    }

    fn adjoint(&self, op: &Op, v: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |target: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = self.value(target).len();
            let buf = grads[target].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Affine { x, w, b } => {
                let (n, fin) = self.value(*x).dims2("").unwrap();
                let fout = self.value(*w).shape[1];
                let (xv, wv) = (&self.value(*x).data, &self.value(*w).data);
                acc(*x, &mut |gx| unsafe {
                    gemm(n, fout, fin, g.as_ptr(), fout as isize, 1, wv.as_ptr(), 1, fout as isize, gx.as_mut_ptr(), fin as isize, 1);
                });
                acc(*w, &mut |gw| unsafe {
                    gemm(fin, n, fout, xv.as_ptr(), 1, fin as isize, g.as_ptr(), fout as isize, 1, gw.as_mut_ptr(), fout as isize, 1);
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for row in g.chunks(fout) {
                            gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                    });
                }
            }
            Op::Conv { x, w, b, dilation } => {
                let (bs, cin, t) = self.value(*x).dims3("").unwrap();
                let (cout, _, k) = self.value(*w).dims3("").unwrap();
                let to = self.value(v).shape[2];
                let (xv, wv) = (&self.value(*x).data, &self.value(*w).data);
                let d = *dilation;
                acc(*x, &mut |gx| {
                    for bi in 0..bs {
                        for kk in 0..k {
                            unsafe {
                                gemm(
                                    cin,
                                    cout,
                                    to,
                                    wv.as_ptr().add(kk),
                                    k as isize,
                                    (cin * k) as isize,
                                    g.as_ptr().add(bi * cout * to),
                                    to as isize,
                                    1,
                                    gx.as_mut_ptr().add(bi * cin * t + kk * d),
                                    t as isize,
                                    1,
                                );
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for bi in 0..bs {
                        for kk in 0..k {
                            unsafe {
                                gemm(
                                    cout,
                                    to,
                                    cin,
                                    g.as_ptr().add(bi * cout * to),
                                    to as isize,
                                    1,
                                    xv.as_ptr().add(bi * cin * t + kk * d),
                                    1,
                                    t as isize,
                                    gw.as_mut_ptr().add(kk),
                                    (cin * k) as isize,
                                    k as isize,
                                );
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for (i, row) in g.chunks(to).enumerate() {
                            gb[i % cout] += row.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Act { x, kind } => {
                let (xv, yv) = (&self.value(*x).data, &self.value(v).data);
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kind.derivative(xv[i], yv[i]);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &mut |ga| ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(o, (gi, bi))| *o += gi * bi));
                acc(*b, &mut |gb| gb.iter_mut().zip(g.iter().zip(av)).for_each(|(o, (gi, ai))| *o += gi * ai));
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
            }
            Op::Crop { x, start } => {
                let t = self.value(*x).shape[2];
                let len = self.value(v).shape[2];
                acc(*x, &mut |gx| {
                    for (row, grow) in gx.chunks_mut(t).zip(g.chunks(len)) {
                        row[*start..*start + len].iter_mut().zip(grow).for_each(|(o, gi)| *o += gi);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let e = self.value(*table).shape[1];
                let (batch, _, t) = self.value(v).dims3("").unwrap();
                acc(*table, &mut |gt| {
                    for b in 0..batch {
                        for tt in 0..t {
                            if let Some(i) = ids[b * t + tt] {
                                for k in 0..e {
                                    gt[i * e + k] += g[(b * e + k) * t + tt];
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { a, b } => {
                let (bs, ca, t) = self.value(*a).dims3("").unwrap();
                let cb = self.value(*b).shape[1];
                let (na, nb) = (ca * t, cb * t);
                acc(*a, &mut |ga| {
                    for i in 0..bs {
                        let src = &g[i * (na + nb)..i * (na + nb) + na];
                        ga[i * na..(i + 1) * na].iter_mut().zip(src).for_each(|(o, s)| *o += s);
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..bs {
                        let src = &g[i * (na + nb) + na..(i + 1) * (na + nb)];
                        gb[i * nb..(i + 1) * nb].iter_mut().zip(src).for_each(|(o, s)| *o += s);
                    }
                });
            }
            Op::TimeStride { x, offset, stride } => {
                let t = self.value(*x).shape[2];
                let n = self.value(v).shape[2];
                acc(*x, &mut |gx| {
                    for (row, grow) in gx.chunks_mut(t).zip(g.chunks(n)) {
                        for k in 0..n {
                            row[offset + k * stride] += grow[k];
                        }
                    }
                });
            }
            Op::Flatten { x } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
            }
            Op::Mix { x, w } => {
                let (bs, c, t) = self.value(*x).dims3("").unwrap();
                let gsz = self.value(*w).shape[0];
                let row = c * t;
                let (xv, wv) = (&self.value(*x).data, &self.value(*w).data);
                acc(*x, &mut |gx| {
                    for n in 0..bs / gsz {
                        unsafe {
                            gemm(gsz, gsz, row, wv.as_ptr(), 1, gsz as isize, g.as_ptr().add(n * gsz * row), row as isize, 1, gx.as_mut_ptr().add(n * gsz * row), row as isize, 1);
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for n in 0..bs / gsz {
                        unsafe {
                            gemm(gsz, row, gsz, g.as_ptr().add(n * gsz * row), row as isize, 1, xv.as_ptr().add(n * gsz * row), 1, row as isize, gw.as_mut_ptr(), gsz as isize, 1);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g.iter().zip(mask)).for_each(|(o, (gi, m))| *o += gi * m));
            }
            Op::Softmax { x } => {
                let (n, k, t) = self.class_layout(*x, "").unwrap();
                let p = &self.value(v).data;
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        for tt in 0..t {
                            let dot: f64 = (0..k).map(|c| p[(i * k + c) * t + tt] * g[(i * k + c) * t + tt]).sum();
                            for c in 0..k {
                                let idx = (i * k + c) * t + tt;
                                gx[idx] += p[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCe { x, probs, targets, weight } => {
                let (n, k, t) = self.class_layout(*x, "").unwrap();
                let s = g[0] * weight;
                acc(*x, &mut |gx| {
                    for (o, p) in gx.iter_mut().zip(probs) {
                        *o += s * p;
                    }
                    for i in 0..n {
                        for tt in 0..t {
                            gx[(i * k + targets[i * t + tt]) * t + tt] -= s;
                        }
                    }
                });
            }
            Op::Mse { x, target } => {
                let xv = &self.value(*x).data;
                let s = 2.0 * g[0] / xv.len().max(1) as f64;
                acc(*x, &mut |gx| {
                    for i in 0..xv.len() {
                        gx[i] += s * (xv[i] - target[i]);
                    }
                });
            }
        }
    }
}

fn softmax_axis1(x: &[f64], n: usize, k: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for tt in 0..t {
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                m = m.max(x[(i * k + c) * t + tt]);
            }
            let mut s = 0.0;
            for c in 0..k {
                let idx = (i * k + c) * t + tt;
                let e = (x[idx] - m).exp();
                out[idx] = e;
                s += e;
            }
            for c in 0..k {
                out[(i * k + c) * t + tt] /= s;
            }
        }
    }
    out
}

fn log_softmax_at(x: &[f64], i: usize, k: usize, t: usize, tt: usize, idx: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for c in 0..k {
        m = m.max(x[(i * k + c) * t + tt]);
    }
    let s: f64 = (0..k).map(|c| (x[(i * k + c) * t + tt] - m).exp()).sum();
    x[idx] - m - s.ln()
}

/// Log-softmax over a single logit vector.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    let ls = s.ln();
    logits.iter().map(|v| v - m - ls).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adam,
}

/// Optimiser state; Adam uses bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimKind::Sgd, lr, beta1: 0.0, beta2: 0.0, eps: 0.0, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Adam with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn adam(lr: f64) -> Self {
        Self { kind: OptimKind::Adam, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.grads.iter().enumerate() {
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerics(format!("non-finite gradient for parameter {}", params.name(id))));
            }
        }
        self.step_count += 1;
        match self.kind {
            OptimKind::Sgd => {
                for (id, g) in grads.grads.iter().enumerate() {
                    let p = params.value_mut(id);
                    p.data.iter_mut().zip(&g.data).for_each(|(w, gi)| *w -= self.lr * gi);
                }
            }
            OptimKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                let t = self.step_count as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (id, g) in grads.grads.iter().enumerate() {
                    let (m, v) = (&mut self.m[id], &mut self.v[id]);
                    let p = params.value_mut(id);
                    for i in 0..g.len() {
                        let gi = g.data[i];
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
    model: serde_json::Value,
}

/// Writes one NKT1 file per parameter plus `manifest.json` describing the
/// parameters and the model configuration.
pub fn save_checkpoint(dir: impl AsRef<Path>, params: &ParamStore, model: &serde_json::Value) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, (name, value)) in params.iter().enumerate() {
        let file = format!("p{i:03}.nkt");
        io::save_array(dir.join(&file), &value.to_array(), 1.0)?;
        entries.push(ManifestEntry { name: name.to_owned(), shape: value.shape.clone(), file });
    }
    let manifest = Manifest { params: entries, model: model.clone() };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ParamStore, serde_json::Value)> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut params = ParamStore::new();
    for e in manifest.params {
        let (arr, _) = io::load_array(dir.join(&e.file))?;
        if arr.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!("parameter {} has shape {:?}, manifest says {:?}", e.name, arr.shape(), e.shape)));
        }
        params.add(&e.name, Tensor::from_array(&arr));
    }
    Ok((params, manifest.model))
}

/// Central-difference gradient checks, shared by the unit tests and the
/// numerics acceptance run.
pub mod check {
    use super::*;
    use rand_distr::StandardNormal;

    pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(|_| StandardNormal.sample(rng)).collect() }
    }

    /// Worst relative error between analytic and central-difference
    /// gradients over every parameter entry.
    pub fn grad_check(params: &ParamStore, f: &dyn Fn(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::training(params, 0);
        let loss = f(&mut g);
        let analytic = g.backward(loss).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let eval = |p: &ParamStore| {
            let mut g = Graph::training(p, 0);
            let l = f(&mut g);
            g.value(l).data[0]
        };
        for id in 0..params.len() {
            for i in 0..params.value(id).len() {
                let mut p = params.clone();
                p.value_mut(id).data[i] += h;
                let up = eval(&p);
                p.value_mut(id).data[i] -= 2.0 * h;
                let down = eval(&p);
                let num = (up - down) / (2.0 * h);
                let a = analytic.get(id).data[i];
                let err = (a - num).abs() / (a.abs() + num.abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
        worst
    }

    /// Store of named `N(0, 0.25)` parameters.
    pub fn store(specs: &[(&str, &[usize])], seed: u64) -> ParamStore {
        let mut rng = rng_from(seed);
        let mut p = ParamStore::new();
        for (name, shape) in specs {
            let mut t = randn(shape, &mut rng);
            t.data.iter_mut().for_each(|v| *v *= 0.5);
            p.add(name, t);
        }
        p
    }

    /// Worst relative error per op group; every op takes part in at least
    /// one check.
    pub fn op_suite() -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        let mut rng = rng_from(5);
        let x3 = randn(&[2, 3, 12], &mut rng);
        let x2 = randn(&[4, 5], &mut rng);
        let target3 = randn(&[2, 2, 8], &mut rng);

        let p = store(&[("w", &[5, 3]), ("b", &[3])], 1);
        out.push((
            "affine+ce",
            grad_check(&p, &|g| {
                let x = g.input(x2.clone());
                let (w, b) = (g.p("w").unwrap(), g.p("b").unwrap());
                let y = g.affine(x, w, Some(b)).unwrap();
                g.softmax_cross_entropy(y, &[0, 2, 1, 1]).unwrap()
            }),
        ));

        let p = store(&[("w", &[2, 3, 2]), ("b", &[2])], 2);
        out.push((
            "conv+mse",
            grad_check(&p, &|g| {
                let x = g.input(x3.clone());
                let (w, b) = (g.p("w").unwrap(), g.p("b").unwrap());
                let y = g.conv1d(x, w, Some(b), 4).unwrap();
                g.mse(y, &target3).unwrap()
            }),
        ));

        for (name, kind) in [
            ("asinh", Activation::Asinh),
            ("tanh", Activation::Tanh),
            ("sigmoid", Activation::Sigmoid),
            ("relu", Activation::Relu),
            ("identity", Activation::Identity),
        ] {
            let p = store(&[("w", &[3, 3, 1])], 3);
            let t = randn(&[2, 3, 12], &mut rng);
            out.push((
                name,
                grad_check(&p, &|g| {
                    let x = g.input(x3.clone());
                    let w = g.p("w").unwrap();
                    let y = g.conv1d(x, w, None, 1).unwrap();
                    let a = g.act(y, kind);
                    g.mse(a, &t).unwrap()
                }),
            ));
        }

        let p = store(&[("a", &[3, 3, 1]), ("b", &[3, 3, 1]), ("m", &[2, 2]), ("emb", &[4, 2])], 4);
        let tflat: Vec<usize> = (0..4 * 3).map(|i| i % 5).collect();
        out.push((
            "gate+mix+embedding+concat+crop+stride+dropout",
            grad_check(&p, &|g| {
                let x = g.input(x3.clone());
                let (a, b) = (g.p("a").unwrap(), g.p("b").unwrap());
                let ya = g.conv1d(x, a, None, 1).unwrap();
                let yb = g.conv1d(x, b, None, 1).unwrap();
                let ta = g.act(ya, Activation::Tanh);
                let sb = g.act(yb, Activation::Sigmoid);
                let z = g.mul(ta, sb).unwrap();
                let z = g.add(z, ya).unwrap();
                let m = g.p("m").unwrap();
                let z = g.mix_rows(z, m).unwrap();
                let tab = g.p("emb").unwrap();
                let ids: Vec<Option<usize>> = (0..2 * 12).map(|i| if i % 5 == 0 { None } else { Some(i % 4) }).collect();
                let em = g.embedding(tab, ids, 2).unwrap();
                let z = g.concat_channels(z, em).unwrap();
                let z = g.crop_time(z, 3, 9).unwrap();
                let z = g.time_stride(z, 1, 2).unwrap();
                let z = g.dropout(z, 0.3).unwrap();
                g.softmax_cross_entropy(z, &tflat[..2 * 4]).unwrap()
            }),
        ));

        let mut rng = rng_from(6);
        let x3 = randn(&[2, 3, 4], &mut rng);
        let t = randn(&[2, 3, 4], &mut rng);
        let tf = randn(&[2, 2], &mut rng);
        let p = store(&[("w", &[3, 3, 1]), ("v", &[12, 2])], 7);
        out.push((
            "softmax+flatten",
            grad_check(&p, &|g| {
                let x = g.input(x3.clone());
                let w = g.p("w").unwrap();
                let y = g.conv1d(x, w, None, 1).unwrap();
                let s = g.softmax(y).unwrap();
                let m = g.mul(s, y).unwrap();
                let tt = g.input(t.clone());
                let m = g.add(m, tt).unwrap();
                let f = g.flatten(m).unwrap();
                let v = g.p("v").unwrap();
                let o = g.affine(f, v, None).unwrap();
                g.mse(o, &tf).unwrap()
            }),
        ));
        out
    }

    /// Random stack of `depth` biased dilated convolutions with randomly
    /// chosen activations under an MSE loss.
    pub fn random_stack(seed: u64, depth: usize) -> f64 {
        let kinds = [Activation::Asinh, Activation::Tanh, Activation::Sigmoid, Activation::Identity];
        let mut rng = rng_from(seed);
        let width = 3;
        let names: Vec<String> = (0..depth).map(|l| format!("w{l}")).collect();
        let mut p = ParamStore::new();
        for n in &names {
            p.add(n, randn(&[width, width, 2], &mut rng));
            p.add(&format!("{n}b"), randn(&[width], &mut rng));
        }
        let len = 16 + 2 * depth;
        let x = randn(&[1, width, len], &mut rng);
        let choice: Vec<usize> = (0..depth).map(|_| rng.random_range(0..kinds.len())).collect();
        let target = randn(&[1, width, len - 2 * depth], &mut rng);
        grad_check(&p, &|g| {
            let mut h = g.input(x.clone());
            for (l, n) in names.iter().enumerate() {
                let w = g.p(n).unwrap();
                let b = g.p(&format!("{n}b")).unwrap();
                h = g.conv1d(h, w, Some(b), 2).unwrap();
                h = g.act(h, kinds[choice[l]]);
            }
            g.mse(h, &target).unwrap()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::check::{randn, store};
    use super::*;

    #[test]
    fn affine_identity() {
        let mut p = ParamStore::new();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data[i * 4] = 1.0;
        }
        p.add("w", eye);
        p.add_zeros("b", &[3]);
        let mut g = Graph::new(&p);
        let x = g.input(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let (w, b) = (g.p("w").unwrap(), g.p("b").unwrap());
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
    }

    #[test]
    fn conv_difference_of_constant_is_zero() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::from_vec(&[1, 1, 2], vec![1.0, -1.0]).unwrap());
        for d in [1, 2, 5] {
            let mut g = Graph::new(&p);
            let x = g.input(Tensor::from_vec(&[1, 1, 20], vec![3.5; 20]).unwrap());
            let w = g.p("w").unwrap();
            let y = g.conv1d(x, w, None, d).unwrap();
            assert_eq!(g.shape(y), &[1, 1, 20 - d]);
            assert!(g.value(y).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conv_lengths_and_impulse() {
        let mut p = ParamStore::new();
        p.add("w1", Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap());
        p.add("w3", Tensor::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut g = Graph::new(&p);
        let mut imp = vec![0.0; 30];
        imp[10] = 1.0;
        let x = g.input(Tensor::from_vec(&[1, 1, 30], imp).unwrap());
        let w1 = g.p("w1").unwrap();
        let y = g.conv1d(x, w1, None, 7).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 30]);
        let w3 = g.p("w3").unwrap();
        let y = g.conv1d(x, w3, None, 4).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 22]);
        let out = &g.value(y).data;
        // Output t sees x[t], x[t+4], x[t+8] with taps 1, 2, 3.
        assert_eq!(out[10], 1.0);
        assert_eq!(out[6], 2.0);
        assert_eq!(out[2], 3.0);
        assert_eq!(out.iter().filter(|&&v| v != 0.0).count(), 3);
    }

    #[test]
    fn receptive_field_of_nine_layers() {
        let mut p = ParamStore::new();
        let mut rng = rng_from(1);
        for l in 0..9 {
            p.add_xavier(&format!("w{l}"), &[2, 2, 2], 4, 4, &mut rng);
        }
        let mut g = Graph::new(&p);
        let mut h = g.input(Tensor::zeros(&[1, 2, 512]));
        for l in 0..9 {
            let w = g.p(&format!("w{l}")).unwrap();
            h = g.conv1d(h, w, None, 1 << l).unwrap();
        }
        assert_eq!(g.shape(h), &[1, 2, 1]);
        let mut g = Graph::new(&p);
        let x = g.input(Tensor::zeros(&[1, 2, 511]));
        let mut h = x;
        let mut failed = false;
        for l in 0..9 {
            let w = g.p(&format!("w{l}")).unwrap();
            match g.conv1d(h, w, None, 1 << l) {
                Ok(v) => h = v,
                Err(Error::Shape(_)) => failed = true,
                Err(e) => panic!("{e}"),
            }
        }
        assert!(failed);
    }

    #[test]
    fn dropout_zero_matches_eval_and_expectation() {
        let p = ParamStore::new();
        let x = Tensor::from_vec(&[1, 4], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::training(&p, 3);
        let v = g.input(x.clone());
        let y = g.dropout(v, 0.0).unwrap();
        assert_eq!(g.value(y), &x);

        let mut mean = [0.0; 4];
        let n = 10_000;
        for s in 0..n {
            let mut g = Graph::training(&p, s);
            let v = g.input(x.clone());
            let y = g.dropout(v, 0.5).unwrap();
            mean.iter_mut().zip(&g.value(y).data).for_each(|(m, v)| *m += v / n as f64);
        }
        for (m, e) in mean.iter().zip(&x.data) {
            assert!((m / e - 1.0).abs() < 0.04, "{m} vs {e}");
        }
    }

    #[test]
    fn grad_check_each_op() {
        for (name, e) in check::op_suite() {
            assert!(e < 1e-5, "{name} {e}");
        }
    }

    #[test]
    fn grad_check_random_depth_six() {
        for seed in 0..5u64 {
            let e = check::random_stack(100 + seed, 6);
            assert!(e < 1e-5, "seed {seed}: {e}");
        }
    }

    #[test]
    fn masked_branch_has_zero_gradient() {
        let p = store(&[("used", &[2, 2]), ("unused", &[2, 2])], 8);
        let mut g = Graph::training(&p, 0);
        let x = g.input(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let (u, n) = (g.p("used").unwrap(), g.p("unused").unwrap());
        let a = g.affine(x, u, None).unwrap();
        let b = g.affine(x, n, None).unwrap();
        let zero = g.input(Tensor::zeros(&[1, 2]));
        let b = g.mul(b, zero).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.mse(s, &Tensor::zeros(&[1, 2])).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(p.id("unused").unwrap()).data.iter().all(|&v| v == 0.0));
        assert!(grads.get(p.id("used").unwrap()).data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn linear_mse_gradient_matches_normal_equations() {
        let mut rng = rng_from(9);
        let x = randn(&[30, 4], &mut rng);
        let y = randn(&[30, 1], &mut rng);
        let p = store(&[("w", &[4, 1])], 10);
        let mut g = Graph::training(&p, 0);
        let xv = g.input(x.clone());
        let w = g.p("w").unwrap();
        let pred = g.affine(xv, w, None).unwrap();
        let loss = g.mse(pred, &y).unwrap();
        let grads = g.backward(loss).unwrap();
        // d/dw mean (Xw - y)^2 = 2/N X^T (Xw - y).
        let wv = &p.value(0).data;
        for j in 0..4 {
            let mut s = 0.0;
            for i in 0..30 {
                let r: f64 = (0..4).map(|k| x.data[i * 4 + k] * wv[k]).sum::<f64>() - y.data[i];
                s += x.data[i * 4 + j] * r;
            }
            assert!((grads.get(0).data[j] - 2.0 * s / 30.0).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_requires_training_record() {
        let p = store(&[("w", &[2, 2])], 1);
        let mut g = Graph::new(&p);
        let x = g.input(Tensor::zeros(&[1, 2]));
        let w = g.p("w").unwrap();
        let y = g.affine(x, w, None).unwrap();
        let l = g.mse(y, &Tensor::zeros(&[1, 2])).unwrap();
        assert!(matches!(g.backward(l), Err(Error::State(_))));
        let g = Graph::training(&p, 0);
        assert!(matches!(g.backward_with(0, Tensor::scalar(1.0)), Err(Error::State(_))));
    }

    #[test]
    fn sgd_and_adam_steps() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::scalar(1.0));
        let mut opt = OptimState::sgd(0.1);
        let grads = Gradients { grads: vec![Tensor::scalar(2.0 * 1.0)] };
        opt.step(&mut p, &grads).unwrap();
        assert!((p.value(0).data[0] - 0.8).abs() < 1e-15);

        let before = p.clone();
        let zero = p.zero_gradients();
        OptimState::sgd(0.1).step(&mut p, &zero).unwrap();
        OptimState::adam(0.1).step(&mut p, &zero).unwrap();
        assert_eq!(p, before);

        let bad = Gradients { grads: vec![Tensor::scalar(f64::NAN)] };
        match opt.step(&mut p, &bad) {
            Err(Error::Numerics(msg)) => assert!(msg.contains('w')),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::scalar(1.0));
        let mut opt = OptimState::adam(0.01);
        let mut reference = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=500 {
            let w = p.value(0).data[0];
            let grads = Gradients { grads: vec![Tensor::scalar(2.0 * w)] };
            opt.step(&mut p, &grads).unwrap();

            let (rw, rm, rv) = reference;
            let g = 2.0 * rw;
            let m = 0.9 * rm + 0.1 * g;
            let v = 0.999 * rv + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            reference = (rw - 0.01 * mh / (vh.sqrt() + 1e-8), m, v);
            assert!((p.value(0).data[0] - reference.0).abs() < 1e-12);
        }
        assert!(p.value(0).data[0].abs() < 1e-3, "{}", p.value(0).data[0]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = store(&[("a", &[2, 3]), ("b", &[4])], 11);
        let meta = serde_json::json!({"kind": "test", "layers": 3});
        save_checkpoint(dir.path(), &p, &meta).unwrap();
        let (q, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(m, meta);
    }

    #[test]
    fn deterministic_dropout_training() {
        let p = store(&[("w", &[3, 2])], 12);
        let run = || {
            let mut g = Graph::training(&p, 77);
            let x = g.input(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
            let x = g.dropout(x, 0.5).unwrap();
            let w = g.p("w").unwrap();
            let y = g.affine(x, w, None).unwrap();
            let l = g.softmax_cross_entropy(y, &[0, 1]).unwrap();
            g.backward(l).unwrap()
        };
        assert_eq!(run(), run());
    }
}
