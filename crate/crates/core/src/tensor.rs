//! Reverse-mode automatic differentiation over dense 2-D matrices.
//!
//! A [`Tape`] records every operation of one forward computation. Parameters
//! enter the tape by name and are borrowed, never copied. Calling
//! [`Tape::backward`] on a scalar node returns exact gradients for every
//! parameter the scalar depends on.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::params::{Mat, ModelParams};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Mat),
    Borrowed(&'p Mat),
}

impl Value<'_> {
    fn get(&self) -> &Mat {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

/// Geometry of a strided 2-D patch extraction over an `(h*w) x c` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Source row of `(out position, kernel offset)`, `None` inside padding.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.height && ix < self.width).then_some(iy * self.width + ix)
    }
}

struct AttnCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: Vec<Mat>,
    dropout: Option<Vec<Mat>>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Dropout(Var, Mat),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention(Box<AttnCache>),
    Rows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Patches(Var, PatchGeometry),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to named parameters.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Mat>,
}

/// A gradient lookup result; `on_path` is false when the parameter did not
/// influence the loss, in which case `grad` is all zeros.
#[derive(Debug, Clone)]
pub struct GradEntry {
    pub grad: Mat,
    pub on_path: bool,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Mat) {
        self.map.insert(name.into(), grad);
    }

    pub fn lookup(&self, name: &str, params: &ModelParams) -> Result<GradEntry> {
        match self.map.get(name) {
            Some(g) => Ok(GradEntry {
                grad: g.clone(),
                on_path: true,
            }),
            None => {
                let p = params.require(name)?;
                Ok(GradEntry {
                    grad: Mat::zeros(p.raw_dim()),
                    on_path: false,
                })
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// `self += scale * other`, keyed by parameter name.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => acc.scaled_add(scale, g),
                None => {
                    self.map.insert(name.clone(), g * scale);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|x| x * factor);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable `ln(1 + exp(x))`.
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

/// Row-wise softmax with max subtraction, in place.
pub fn softmax_rows_inplace(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Binary cross-entropy on a logit, `-[y ln s(z) + (1-y) ln(1-s(z))]`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

pub fn logistic(z: f64) -> f64 {
    sigmoid(z)
}

impl<'p> Default for Tape<'p> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Tape<'p> {
    params: Option<&'p ModelParams>,
    nodes: Vec<Node<'p>>,
    param_vars: BTreeMap<String, Var>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn with_params(params: &'p ModelParams) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> Option<&'p ModelParams> {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.nodes[v.0].value.get()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that takes no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The named parameter as a differentiable leaf. Repeated requests return
    /// the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.param_vars.get(name) {
            return Ok(*v);
        }
        let params = self
            .params
            .ok_or_else(|| Error::Invalid("tape has no parameter store".into()))?;
        let value = params.require(name)?;
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                va.dim(),
                vb.dim()
            )));
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::Shape(format!("add {:?} + {:?}", va.dim(), vb.dim())));
        }
        let out = va + vb;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                va.dim(),
                vr.dim()
            )));
        }
        let out = va + vr;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// `x W + b` for a weight `in x out` and bias `1 x out`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row(y, bias)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Multiplies elementwise by a precomputed keep-mask holding `0` or `1/(1-p)`.
    pub fn dropout(&mut self, a: Var, keep: Mat) -> Result<Var> {
        if keep.dim() != self.value(a).dim() {
            return Err(Error::Shape("dropout mask shape".into()));
        }
        let out = self.value(a) * &keep;
        Ok(self.push(out, Op::Dropout(a, keep), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.ncols();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.dim() != (1, n) || vb.dim() != (1, n) {
            return Err(Error::Shape(format!(
                "layer_norm on width {n} with gamma {:?}, beta {:?}",
                vg.dim(),
                vb.dim()
            )));
        }
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &xhat * vg + vb;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head masked attention `softmax(Q K^T / sqrt(d_k) + M) V` with the
    /// heads laid out as contiguous column groups of `q`, `k`, `v`.
    /// `dropout` optionally holds one keep-mask per head applied to the
    /// attention weights.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &Mat,
        dropout: Option<Vec<Mat>>,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (s, d) = vq.dim();
        if vk.dim() != (s, d) || vv.dim() != (s, d) || mask.dim() != (s, s) {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?} mask {:?}",
                vq.dim(),
                vk.dim(),
                vv.dim(),
                mask.dim()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(masks) = &dropout {
            if masks.len() != heads || masks.iter().any(|m| m.dim() != (s, s)) {
                return Err(Error::Shape("attention dropout masks".into()));
            }
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = Mat::zeros((s, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let mut p = vq.slice(cols).dot(&vk.slice(cols).t()) * scale + mask;
            softmax_rows_inplace(&mut p);
            let weighted = match &dropout {
                Some(masks) => (&p * &masks[h]).dot(&vv.slice(cols)),
                None => p.dot(&vv.slice(cols)),
            };
            out.slice_mut(cols).assign(&weighted);
            probs.push(p);
        }
        let cache = AttnCache {
            q,
            k,
            v,
            heads,
            probs,
            dropout,
        };
        Ok(self.push(out, Op::Attention(Box::new(cache)), &[q, k, v]))
    }

    /// Per-head attention weights recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some(&c.probs),
            _ => None,
        }
    }

    /// Gathers rows `idx` of `a` (embedding lookup or row selection).
    pub fn rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.nrows()) {
            return Err(Error::Shape(format!(
                "row index {bad} out of range for {} rows",
                va.nrows()
            )));
        }
        let out = va.select(Axis(0), idx);
        Ok(self.push(out, Op::Rows(a, idx.to_vec()), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("concat_rows: {e}")))?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Shape(format!("concat_cols: {e}")))?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Extracts strided square patches (im2col). Output row `oy*out_w + ox`
    /// holds the patch flattened as `(ky, kx, channel)`.
    pub fn patches(&mut self, x: Var, geom: PatchGeometry) -> Result<Var> {
        let vx = self.value(x);
        if vx.dim() != (geom.height * geom.width, geom.channels) {
            return Err(Error::Shape(format!(
                "patch input {:?} does not match {}x{}x{}",
                vx.dim(),
                geom.height,
                geom.width,
                geom.channels
            )));
        }
        if geom.kernel == 0 || geom.stride == 0 || geom.kernel > geom.height + 2 * geom.pad {
            return Err(Error::Shape(format!("invalid patch geometry {geom:?}")));
        }
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let mut out = Mat::zeros((oh * ow, geom.patch_len()));
        for oy in 0..oh {
            for ox in 0..ow {
                let r = oy * ow + ox;
                for ky in 0..geom.kernel {
                    for kx in 0..geom.kernel {
                        if let Some(src) = geom.source(oy, ox, ky, kx) {
                            let base = (ky * geom.kernel + kx) * geom.channels;
                            out.slice_mut(s![r, base..base + geom.channels])
                                .assign(&vx.row(src));
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::Patches(x, geom), &[x]))
    }

    /// Mean softmax cross-entropy of each logit row against its target class.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.nrows() != targets.len() || targets.is_empty() {
            return Err(Error::Shape(format!(
                "softmax_xent: {} rows, {} targets",
                vl.nrows(),
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vl.ncols()) {
            return Err(Error::Shape(format!("target class {t} out of range")));
        }
        if vl.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite logits in cross-entropy".into()));
        }
        let mut probs = vl.clone();
        softmax_rows_inplace(&mut probs);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = vl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = Mat::from_elem((1, 1), total / targets.len() as f64);
        Ok(self.push(
            loss,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy over every entry of `logits` (row-major
    /// against `targets`), computed in logit form.
    pub fn bce_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.len() != targets.len() || targets.is_empty() {
            return Err(Error::Shape(format!(
                "bce_logits: {} logits, {} targets",
                vl.len(),
                targets.len()
            )));
        }
        let total: f64 = vl
            .iter()
            .zip(targets)
            .map(|(&z, &y)| bce_with_logit(z, y))
            .sum();
        let loss = Mat::from_elem((1, 1), total / targets.len() as f64);
        Ok(self.push(
            loss,
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).dim()
            )));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        let mut out = Gradients::default();
        let leaf_names: BTreeMap<usize, &String> =
            self.param_vars.iter().map(|(n, v)| (v.0, n)).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let acc = |v: Var, delta: Mat, grads: &mut Vec<Option<Mat>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = leaf_names.get(&idx) {
                        out.map.insert((*name).clone(), g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(*a, g.dot(&vb.t()), &mut grads);
                    acc(*b, va.t().dot(&g), &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*a, g, &mut grads);
                    acc(*row, dr, &mut grads);
                }
                Op::Scale(a, f) => acc(*a, g * *f, &mut grads),
                Op::Gelu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    acc(*a, d, &mut grads);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(*a, d, &mut grads);
                }
                Op::Dropout(a, keep) => acc(*a, g * keep, &mut grads),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let vg = self.value(*gamma);
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * vg;
                    let n = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.raw_dim());
                    for (r, inv) in inv_std.iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let mut out_row = dx.row_mut(r);
                        for j in 0..xh.len() {
                            out_row[j] = inv / n * (n * dh[j] - sum_dh - xh[j] * sum_dh_xh);
                        }
                    }
                    acc(*x, dx, &mut grads);
                    acc(*gamma, dgamma, &mut grads);
                    acc(*beta, dbeta, &mut grads);
                }
                Op::Attention(cache) => {
                    let (vq, vk, vv) = (
                        self.value(cache.q),
                        self.value(cache.k),
                        self.value(cache.v),
                    );
                    let (s, d) = vq.dim();
                    let dk = d / cache.heads;
                    let scale = 1.0 / (dk as f64).sqrt();
                    let mut dq = Mat::zeros((s, d));
                    let mut dkm = Mat::zeros((s, d));
                    let mut dv = Mat::zeros((s, d));
                    for h in 0..cache.heads {
                        let cols = s![.., h * dk..(h + 1) * dk];
                        let p = &cache.probs[h];
                        let g_h = g.slice(cols);
                        let (used, mut dp) = match &cache.dropout {
                            Some(masks) => {
                                let used = p * &masks[h];
                                let dp = g_h.dot(&vv.slice(cols).t()) * &masks[h];
                                (used, dp)
                            }
                            None => (p.clone(), g_h.dot(&vv.slice(cols).t())),
                        };
                        dv.slice_mut(cols).assign(&used.t().dot(&g_h));
                        // softmax backward: ds = p * (dp - rowsum(dp * p))
                        for (mut dp_row, p_row) in dp.rows_mut().into_iter().zip(p.rows()) {
                            let dot = dp_row.dot(&p_row);
                            Zip::from(&mut dp_row)
                                .and(&p_row)
                                .for_each(|x, &pr| *x = pr * (*x - dot) * scale);
                        }
                        dq.slice_mut(cols).assign(&dp.dot(&vk.slice(cols)));
                        dkm.slice_mut(cols).assign(&dp.t().dot(&vq.slice(cols)));
                    }
                    acc(cache.q, dq, &mut grads);
                    acc(cache.k, dkm, &mut grads);
                    acc(cache.v, dv, &mut grads);
                }
                Op::Rows(a, idx) => {
                    let mut d = Mat::zeros(self.value(*a).raw_dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut target = d.row_mut(src);
                        target += &g.row(r);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        acc(*p, g.slice(s![start..start + n, ..]).to_owned(), &mut grads);
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        acc(*p, g.slice(s![.., start..start + n]).to_owned(), &mut grads);
                        start += n;
                    }
                }
                Op::Patches(x, geom) => {
                    let mut dx = Mat::zeros(self.value(*x).raw_dim());
                    let ow = geom.out_width();
                    for oy in 0..geom.out_height() {
                        for ox in 0..ow {
                            let r = oy * ow + ox;
                            for ky in 0..geom.kernel {
                                for kx in 0..geom.kernel {
                                    if let Some(src) = geom.source(oy, ox, ky, kx) {
                                        let base = (ky * geom.kernel + kx) * geom.channels;
                                        let mut target = dx.row_mut(src);
                                        target += &g.slice(s![r, base..base + geom.channels]);
                                    }
                                }
                            }
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    probs,
                } => {
                    let upstream = g[[0, 0]] / targets.len() as f64;
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        d[[i, t]] -= 1.0;
                    }
                    d.mapv_inplace(|x| x * upstream);
                    acc(*logits, d, &mut grads);
                }
                Op::BceLogits { logits, targets } => {
                    let upstream = g[[0, 0]] / targets.len() as f64;
                    let vl = self.value(*logits);
                    let flat: Vec<f64> = vl
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| (sigmoid(z) - y) * upstream)
                        .collect();
                    let d = Array2::from_shape_vec(vl.raw_dim(), flat)
                        .map_err(|e| Error::Shape(e.to_string()))?;
                    acc(*logits, d, &mut grads);
                }
                Op::Sum(a) => {
                    let d = Mat::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    acc(*a, d, &mut grads);
                }
            }
        }
        Ok(out)
    }
}
