//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the list in reverse and accumulates vector-Jacobian products.
//! Only trailing-axis bias addition broadcasts; everything else demands
//! matching shapes.

use rand::Rng;

use super::tensor::{matmul_nt, matmul_raw, matmul_tn, transpose_raw, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
    Tanh,
    Relu,
}

/// Sentinel in gather indices producing a literal zero.
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    Activation(Var, Activation),
    Exp(Var),
    ClampLog(Var, f64),
    Softmax {
        input: Var,
        axis: usize,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn apply_activation(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Gelu => gelu(x),
        Activation::Sigmoid => sigmoid(x),
        Activation::Tanh => x.tanh(),
        Activation::Relu => x.max(0.0),
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_forward(x: &[f64], shape: &[usize], axis: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let live = |k: usize| mask.is_none_or(|m| m[k]);
            let max = (0..len)
                .filter(|&k| live(k))
                .map(|k| x[at(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for k in (0..len).filter(|&k| live(k)) {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in (0..len).filter(|&k| live(k)) {
                out[at(k)] /= total;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs
            .iter()
            .any(|v| self.nodes[v.0].value.requires_grad());
        let value = value.with_requires_grad(rg);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn make(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    /// Registers a tensor; it is differentiated iff `requires_grad` is set on it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, s) = self.dims2(a)?;
        let (s2, t) = self.dims2(b)?;
        if s != s2 {
            return dim_err(format!("matmul inner dimensions {r}x{s} · {s2}x{t}"));
        }
        let out = matmul_raw(self.data(a), self.data(b), r, s, t);
        let value = self.make(vec![r, t], out);
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let value = self.make(vec![c, r], transpose_raw(self.data(a), r, c));
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = self.make(self.shape(a).to_vec(), data);
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a vector along the trailing axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.value(bias).numel() != c {
            return dim_err(format!(
                "bias of {} values for trailing axis {c}",
                self.value(bias).numel()
            ));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let value = self.make(self.shape(x).to_vec(), data);
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let data = self.data(x).iter().map(|v| scale * v + shift).collect();
        let value = self.make(self.shape(x).to_vec(), data);
        self.push(value, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| apply_activation(kind, v))
            .collect();
        let value = self.make(self.shape(x).to_vec(), data);
        self.push(value, Op::Activation(x, kind), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v.exp()).collect();
        let value = self.make(self.shape(x).to_vec(), data);
        self.push(value, Op::Exp(x), &[x])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn clamp_log(&mut self, x: Var, floor: f64) -> Var {
        let data = self.data(x).iter().map(|v| v.max(floor).ln()).collect();
        let value = self.make(self.shape(x).to_vec(), data);
        self.push(value, Op::ClampLog(x, floor), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax over the trailing axis where `keep[k] == false` acts as a −∞ logit.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let axis = self.value(x).rank() - 1;
        if self.shape(x)[axis] != keep.len() {
            return dim_err(format!(
                "mask of length {} for axis of {}",
                keep.len(),
                self.shape(x)[axis]
            ));
        }
        self.softmax_impl(x, axis, Some(keep.to_vec()))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, mask: Option<Vec<bool>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("softmax axis {axis} for rank {}", shape.len()));
        }
        let out = softmax_forward(self.data(x), &shape, axis, mask.as_deref());
        let value = self.make(shape, out);
        Ok(self.push(
            value,
            Op::Softmax { input: x, axis },
            &[x],
        ))
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("rank >= 1");
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = self.make(shape, out);
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// Row-wise layer normalization of an `n×h` matrix followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let (_, h) = self.dims2(x)?;
        if self.value(gamma).numel() != h || self.value(beta).numel() != h {
            return dim_err("layer_norm affine parameters must match the row width");
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(h) {
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            out.extend(
                row.iter()
                    .zip(g.iter().zip(b))
                    .map(|(v, (gv, bv))| gv * (v - mean) * rstd + bv),
            );
        }
        let value = self.make(self.shape(x).to_vec(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            &[x, gamma, beta],
        ))
    }

    /// `out[k] = x[index[k]]` (flat indices), with [`GATHER_ZERO`] yielding 0.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.data(x);
        if let Some(&bad) = index
            .iter()
            .find(|&&i| i != GATHER_ZERO && i >= src.len())
        {
            return dim_err(format!("gather index {bad} out of range {}", src.len()));
        }
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i] })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { input: x, index }, &[x]))
    }

    /// Selects whole rows of a matrix (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(table)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return dim_err(format!("row {bad} out of range for {r} rows"));
        }
        let index = rows
            .iter()
            .flat_map(|&i| (i * c)..(i * c + c))
            .collect();
        self.gather(table, index, vec![rows.len(), c])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if start + len > c || len == 0 {
            return dim_err(format!("columns {start}..{} of {c}", start + len));
        }
        let index = (0..r)
            .flat_map(|i| (i * c + start)..(i * c + start + len))
            .collect();
        self.gather(x, index, vec![r, len])
    }

    /// Row `i` of a matrix as a 1×c matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.gather_rows(x, &[i])
    }

    /// Picks flat elements into a vector.
    pub fn pick(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        if flat.is_empty() {
            return dim_err("pick of zero elements");
        }
        self.gather(x, flat.to_vec(), vec![flat.len()])
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat of nothing");
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims2(p))
            .collect::<Result<_>>()?;
        let (data, shape) = match axis {
            0 => {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return dim_err("concat rows: column counts differ");
                }
                let data: Vec<f64> = parts
                    .iter()
                    .flat_map(|&p| self.data(p).iter().copied())
                    .collect();
                let rows = dims.iter().map(|d| d.0).sum();
                (data, vec![rows, c])
            }
            1 => {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    return dim_err("concat columns: row counts differ");
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for (&p, &(_, c)) in parts.iter().zip(&dims) {
                        data.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
                    }
                }
                (data, vec![r, cols])
            }
            _ => return dim_err(format!("concat axis {axis}")),
        };
        let value = self.make(shape, data);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = self.make(self.shape(x).to_vec(), data);
        self.push(value, Op::Dropout { input: x, mask }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = Tensor::new(shape, self.data(x).to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Errors if any value or gradient on the tape is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.nodes.iter().position(|n| !n.value.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!(
                "node {i} ({:?})",
                std::mem::discriminant(&self.nodes[i].op)
            ))),
            None => Ok(()),
        }
    }

    /// Accumulates `∂loss/∂v` into every reachable node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                if node.value.requires_grad() {
                    node.value.accumulate_grad(&g)?;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, contrib: &[f64]| {
            if !self.nodes[v.0].value.requires_grad() {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, s) = self.nodes[a.0].value.dims2().unwrap();
                let t = self.nodes[b.0].value.shape()[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    acc(*a, &matmul_nt(g, bd, r, s, t));
                }
                if self.requires_grad(*b) {
                    acc(*b, &matmul_tn(ad, g, r, s, t));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.dims2().unwrap();
                acc(*a, &transpose_raw(g, c, r));
            }
            Op::Add(a, b) => {
                acc(*a, g);
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(*b, &neg);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let ga: Vec<f64> = g.iter().zip(bd).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(ad).map(|(x, y)| x * y).collect();
                acc(*a, &ga);
                acc(*b, &gb);
            }
            Op::AddBias(x, bias) => {
                acc(*x, g);
                let c = self.value(*bias).numel();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(b, v)| *b += v);
                }
                acc(*bias, &gb);
            }
            Op::Affine(x, scale) => {
                let gx: Vec<f64> = g.iter().map(|v| v * scale).collect();
                acc(*x, &gx);
            }
            Op::Activation(x, kind) => {
                let xd = self.data(*x);
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xd.iter().zip(y))
                    .map(|(gv, (&xv, &yv))| {
                        gv * match kind {
                            Activation::Gelu => gelu_grad(xv),
                            Activation::Sigmoid => yv * (1.0 - yv),
                            Activation::Tanh => 1.0 - yv * yv,
                            Activation::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        }
                    })
                    .collect();
                acc(*x, &gx);
            }
            Op::Exp(x) => {
                let gx: Vec<f64> = g.iter().zip(y).map(|(a, b)| a * b).collect();
                acc(*x, &gx);
            }
            Op::ClampLog(x, floor) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(gv, &xv)| if xv > *floor { gv / xv } else { 0.0 })
                    .collect();
                acc(*x, &gx);
            }
            Op::Softmax { input, axis, .. } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + j;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(*input, &gx);
            }
            Op::LogSoftmax(x) => {
                let c = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((grow, yrow), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let gsum: f64 = grow.iter().sum();
                    for k in 0..c {
                        out[k] = grow[k] - yrow[k].exp() * gsum;
                    }
                }
                acc(*x, &gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xd = self.data(*x);
                let gam = self.data(*gamma);
                let h = gam.len();
                let mut gx = vec![0.0; xd.len()];
                let mut gg = vec![0.0; h];
                let mut gbeta = vec![0.0; h];
                let mut xhat = vec![0.0; h];
                let mut dxhat = vec![0.0; h];
                for r in 0..xd.len() / h {
                    let row = &xd[r * h..(r + 1) * h];
                    let grow = &g[r * h..(r + 1) * h];
                    let mean = row.iter().sum::<f64>() / h as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    for k in 0..h {
                        xhat[k] = (row[k] - mean) * rstd;
                        dxhat[k] = grow[k] * gam[k];
                        gg[k] += grow[k] * xhat[k];
                        gbeta[k] += grow[k];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / h as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / h as f64;
                    for k in 0..h {
                        gx[r * h + k] = rstd * (dxhat[k] - m1 - xhat[k] * m2);
                    }
                }
                acc(*x, &gx);
                acc(*gamma, &gg);
                acc(*beta, &gbeta);
            }
            Op::Gather { input, index } => {
                let mut gx = vec![0.0; self.value(*input).numel()];
                for (&k, gv) in index.iter().zip(g) {
                    if k != GATHER_ZERO {
                        gx[k] += gv;
                    }
                }
                acc(*input, &gx);
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.nodes[p.0].value.dims2().unwrap();
                    let gp: Vec<f64> = if *axis == 0 {
                        g[offset * total_cols..(offset + r) * total_cols].to_vec()
                    } else {
                        (0..r)
                            .flat_map(|i| {
                                g[i * total_cols + offset..i * total_cols + offset + c]
                                    .iter()
                                    .copied()
                            })
                            .collect()
                    };
                    offset += if *axis == 0 { r } else { c };
                    acc(p, &gp);
                }
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).numel()];
                acc(*x, &gx);
            }
            Op::Dropout { input, mask } => {
                let gx: Vec<f64> = g.iter().zip(mask).map(|(a, b)| a * b).collect();
                acc(*input, &gx);
            }
            Op::Reshape(x) => acc(*x, g),
        }
    }
}
