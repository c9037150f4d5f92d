//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! A [`Graph`] is an arena of nodes; each op appends a node holding its
//! forward value and the handles of its inputs. [`Graph::backward`] walks the
//! arena in reverse. Calling `backward` again recomputes every gradient from
//! scratch, so a graph can be reused for several losses.
//!
//! Binary elementwise ops accept equal shapes, or one side with a single
//! element (scalar broadcast). Row/column broadcasts have dedicated ops.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, transpose_data, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op implemented outside this module.
///
/// Returns one optional gradient per input, shaped like that input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Silu,
    Softplus,
    Sigmoid,
    Square,
    Relu,
    Scale(f64),
    AddScalar(f64),
    Powf(f64),
    ClampMin(f64),
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Square => x * x,
            Unary::Relu => x.max(0.0),
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
            Unary::Powf(p) => x.powf(p),
            Unary::ClampMin(lo) => x.max(lo),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Square => 2.0 * x,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Scale(c) => c,
            Unary::AddScalar(_) => 1.0,
            Unary::Powf(p) => p * x.powf(p - 1.0),
            Unary::ClampMin(lo) => {
                if x > lo {
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

/// ln(1 + eˣ), stable for large |x|.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Unary(Unary),
    Binary(Binary),
    MatMul,
    Transpose,
    Reshape,
    AddRow,
    MulRow,
    AddCol,
    MulCol,
    Sum,
    Mean,
    Gather(Arc<Vec<usize>>),
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
    Custom(Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that never tracks gradients; custom ops may skip saving state.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        !self.no_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && !self.no_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        let requires_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a node computed outside the graph together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(value, Op::Custom(op), inputs.to_vec())
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let value = self.value(x).map(|v| f.forward(v));
        self.push(value, Op::Unary(f), vec![x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c))
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::AddScalar(c))
    }
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Unary::Powf(p))
    }
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, Unary::ClampMin(lo))
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(Error::Dimension(format!(
                "{op:?}: incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let n: usize = out_shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let ia = |i: usize| if da.len() == 1 { 0 } else { i };
        let ib = |i: usize| if db.len() == 1 { 0 } else { i };
        let data = (0..n)
            .map(|i| {
                let (x, y) = (da[ia(i)], db[ib(i)]);
                match op {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Binary(op), vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul, vec![a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose, vec![x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape, vec![x]))
    }

    fn check_vec(&self, x: Var, v: Var, along_rows: bool, what: &str) -> Result<(usize, usize)> {
        let (rows, cols) = self.value(x).as_matrix_dims();
        let want = if along_rows { cols } else { rows };
        if self.value(v).numel() != want {
            return Err(Error::Dimension(format!(
                "{what}: vector of {} elements against {:?}",
                self.value(v).numel(),
                self.shape(x)
            )));
        }
        Ok((rows, cols))
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = self.check_vec(x, b, true, "add_row")?;
        let bd = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, o) in value.data_mut().iter_mut().enumerate() {
            *o += bd[i % cols];
        }
        Ok(self.push(value, Op::AddRow, vec![x, b]))
    }

    /// `x[m×n] ⊙ v[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, cols) = self.check_vec(x, v, true, "mul_row")?;
        let vd = self.value(v).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, o) in value.data_mut().iter_mut().enumerate() {
            *o *= vd[i % cols];
        }
        Ok(self.push(value, Op::MulRow, vec![x, v]))
    }

    /// `x[m×n] + b[m]` broadcast over columns.
    pub fn add_col(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = self.check_vec(x, b, false, "add_col")?;
        let bd = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, o) in value.data_mut().iter_mut().enumerate() {
            *o += bd[i / cols];
        }
        Ok(self.push(value, Op::AddCol, vec![x, b]))
    }

    /// `x[m×n] ⊙ v[m]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, cols) = self.check_vec(x, v, false, "mul_col")?;
        let vd = self.value(v).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, o) in value.data_mut().iter_mut().enumerate() {
            *o *= vd[i / cols];
        }
        Ok(self.push(value, Op::MulCol, vec![x, v]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean, vec![x])
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Covers permutations,
    /// reversals, patch extraction and pixel shuffle.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::Dimension(format!(
                "gather: {} indices for shape {shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Dimension(format!(
                "gather: index {bad} out of range {}",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather(index), vec![x]))
    }

    /// Layer normalization over the last axis followed by `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.check_vec(x, gamma, true, "layer_norm gamma")?;
        self.check_vec(x, beta, true, "layer_norm beta")?;
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(value, Op::LayerNorm { xhat, rstd }, vec![x, gamma, beta]))
    }

    /// Populates gradients of `loss` with respect to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let input_grads = self.node_backward(i, &g);
            self.grads[i] = Some(g);
            for (inp, ig) in self.nodes[i].inputs.clone().into_iter().zip(input_grads) {
                if let Some(ig) = ig {
                    if self.nodes[inp.0].requires_grad {
                        accumulate(&mut self.grads[inp.0], ig);
                    }
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Vec<Option<Tensor>> {
        let node = &self.nodes[i];
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Unary(f) => {
                let x = inp(0);
                let data = x
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(gd)
                    .map(|((&xv, &yv), &gv)| gv * f.derivative(xv, yv))
                    .collect();
                vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
            }
            Op::Binary(op) => {
                let (a, b) = (inp(0), inp(1));
                let (da, db) = (a.data(), b.data());
                let n = gd.len();
                let at = |d: &[f64], k: usize| if d.len() == 1 { d[0] } else { d[k] };
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for k in 0..n {
                    let (x, y, gv) = (at(da, k), at(db, k), gd[k]);
                    let (dx, dy) = match op {
                        Binary::Add => (gv, gv),
                        Binary::Sub => (gv, -gv),
                        Binary::Mul => (gv * y, gv * x),
                        Binary::Div => (gv / y, -gv * x / (y * y)),
                    };
                    ga[if da.len() == 1 { 0 } else { k }] += dx;
                    gb[if db.len() == 1 { 0 } else { k }] += dy;
                }
                vec![
                    Some(Tensor::from_parts(a.shape().to_vec(), ga)),
                    Some(Tensor::from_parts(b.shape().to_vec(), gb)),
                ]
            }
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let mut ga = vec![0.0; m * k];
                matmul_a_bt_into(gd, b.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_at_b_into(a.data(), gd, &mut gb, m, k, n);
                vec![
                    Some(Tensor::from_parts(vec![m, k], ga)),
                    Some(Tensor::from_parts(vec![k, n], gb)),
                ]
            }
            Op::Transpose => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                vec![Some(Tensor::from_parts(vec![c, r], transpose_data(gd, r, c)))]
            }
            Op::Reshape => vec![Some(Tensor::from_parts(inp(0).shape().to_vec(), gd.to_vec()))],
            Op::AddRow => {
                let cols = inp(1).numel();
                let mut gb = vec![0.0; cols];
                for (k, &v) in gd.iter().enumerate() {
                    gb[k % cols] += v;
                }
                vec![
                    Some(g.clone().reshape(inp(0).shape()).expect("same size")),
                    Some(Tensor::from_parts(inp(1).shape().to_vec(), gb)),
                ]
            }
            Op::MulRow => {
                let (x, v) = (inp(0), inp(1));
                let cols = v.numel();
                let mut gx = vec![0.0; gd.len()];
                let mut gv = vec![0.0; cols];
                for (k, &gk) in gd.iter().enumerate() {
                    gx[k] = gk * v.data()[k % cols];
                    gv[k % cols] += gk * x.data()[k];
                }
                vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                    Some(Tensor::from_parts(v.shape().to_vec(), gv)),
                ]
            }
            Op::AddCol => {
                let rows = inp(1).numel();
                let cols = gd.len() / rows;
                let mut gb = vec![0.0; rows];
                for (k, &v) in gd.iter().enumerate() {
                    gb[k / cols] += v;
                }
                vec![
                    Some(g.clone().reshape(inp(0).shape()).expect("same size")),
                    Some(Tensor::from_parts(inp(1).shape().to_vec(), gb)),
                ]
            }
            Op::MulCol => {
                let (x, v) = (inp(0), inp(1));
                let rows = v.numel();
                let cols = gd.len() / rows;
                let mut gx = vec![0.0; gd.len()];
                let mut gv = vec![0.0; rows];
                for (k, &gk) in gd.iter().enumerate() {
                    gx[k] = gk * v.data()[k / cols];
                    gv[k / cols] += gk * x.data()[k];
                }
                vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                    Some(Tensor::from_parts(v.shape().to_vec(), gv)),
                ]
            }
            Op::Sum => vec![Some(Tensor::full(inp(0).shape(), gd[0]))],
            Op::Mean => {
                let x = inp(0);
                vec![Some(Tensor::full(x.shape(), gd[0] / x.numel() as f64))]
            }
            Op::Gather(index) => {
                let x = inp(0);
                let mut gx = vec![0.0; x.numel()];
                for (k, &src) in index.iter().enumerate() {
                    gx[src] += gd[k];
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
            }
            Op::LayerNorm { xhat, rstd } => {
                let (x, gamma) = (inp(0), inp(1));
                let d = gamma.numel();
                let rows = x.numel() / d;
                let gm = gamma.data();
                let mut gx = vec![0.0; x.numel()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut gxhat = vec![0.0; d];
                for r in 0..rows {
                    let off = r * d;
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for j in 0..d {
                        let gv = gd[off + j];
                        gg[j] += gv * xhat[off + j];
                        gbeta[j] += gv;
                        gxhat[j] = gv * gm[j];
                        mean_g += gxhat[j];
                        mean_gx += gxhat[j] * xhat[off + j];
                    }
                    mean_g /= d as f64;
                    mean_gx /= d as f64;
                    for j in 0..d {
                        gx[off + j] = rstd[r] * (gxhat[j] - mean_g - xhat[off + j] * mean_gx);
                    }
                }
                vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                    Some(Tensor::from_parts(gamma.shape().to_vec(), gg)),
                    Some(Tensor::from_parts(inp(2).shape().to_vec(), gbeta)),
                ]
            }
            Op::Custom(op) => {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                op.backward(&inputs, &node.value, g)
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Compares the analytic gradient of `f` at `x` against central differences.
///
/// Returns `max_i |a_i − n_i| / (|a_i| + |n_i| + 1e−12)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::inference();
        let v = g.constant(point);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn elementwise_closed_forms() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3]));
        let s = g.silu(z);
        assert_eq!(g.value(s).data(), &[0.0; 3]);
        let sp = g.softplus(z);
        assert!((g.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let e = g.exp(z);
        assert_eq!(g.value(e).data(), &[1.0; 3]);
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(&[1., 2., 3.]));
        let s = g.constant(Tensor::scalar(2.));
        let b = g.constant(Tensor::vector(&[1., 2.]));
        let m = g.mul(s, a).unwrap();
        assert_eq!(g.value(m).data(), &[2., 4., 6.]);
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[1., 2., 3.]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[3.]));
        let xx = g.mul(x, x).unwrap();
        let l = g.sum(xx);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn layer_norm_statistics() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1., -1.]));
        let gm = g.constant(Tensor::ones(&[2]));
        let bt = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gm, bt, 1e-12).unwrap();
        assert!(g.value(y).max_abs_diff(&Tensor::vector(&[1., -1.])) < 1e-9);

        let c = g.constant(Tensor::full(&[4], 3.0));
        let gm4 = g.constant(Tensor::ones(&[4]));
        let bt4 = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(c, gm4, bt4, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let mut rng = Rng::new(11);
        let r = g.constant(rng.uniform_tensor(&[8], -20., 20.));
        let gm8 = g.constant(Tensor::ones(&[8]));
        let bt8 = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(r, gm8, bt8, 1e-5).unwrap();
        let d = g.value(y).data();
        let mean = d.iter().sum::<f64>() / 8.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6, "{var}");
    }

    #[test]
    fn grad_check_quadratic_is_exact() {
        let err = grad_check(
            |g, x| {
                let s = g.square(x);
                Ok(g.sum(s))
            },
            &Tensor::vector(&[3.0]),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    type Build = fn(&mut Graph, Var) -> Result<Var>;

    fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let w = Rng::new(seed).uniform_tensor(g.shape(y), 0.5, 1.5);
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn every_op_passes_grad_check() {
        let cases: Vec<(&str, Build)> = vec![
            ("silu", |g, x| { let y = g.silu(x); weighted(g, y, 1) }),
            ("softplus", |g, x| { let y = g.softplus(x); weighted(g, y, 2) }),
            ("exp", |g, x| { let y = g.exp(x); weighted(g, y, 3) }),
            ("neg", |g, x| { let y = g.neg(x); weighted(g, y, 4) }),
            ("sigmoid", |g, x| { let y = g.sigmoid(x); weighted(g, y, 5) }),
            ("square", |g, x| { let y = g.square(x); weighted(g, y, 6) }),
            ("mul_self", |g, x| { let y = g.mul(x, x)?; weighted(g, y, 7) }),
            ("div", |g, x| {
                let e = g.exp(x);
                let s = g.sum(e);
                let y = g.div(x, s)?;
                weighted(g, y, 8)
            }),
            ("matmul", |g, x| {
                let m = g.reshape(x, &[2, 3])?;
                let t = g.transpose(m)?;
                let p = g.matmul(m, t)?;
                weighted(g, p, 9)
            }),
            ("rows_cols", |g, x| {
                let m = g.reshape(x, &[2, 3])?;
                let v = Rng::new(10).uniform_tensor(&[3], -1., 1.);
                let v = g.param(v);
                let a = g.mul_row(m, v)?;
                let b = g.add_row(a, v)?;
                let c = g.gather(x, Arc::new(vec![0, 5]), &[2])?;
                let d = g.mul_col(b, c)?;
                let e = g.add_col(d, c)?;
                weighted(g, e, 11)
            }),
            ("layer_norm", |g, x| {
                let m = g.reshape(x, &[2, 3])?;
                let gm = g.constant(Tensor::vector(&[1.0, 0.5, 2.0]));
                let bt = g.constant(Tensor::vector(&[0.1, 0.2, 0.3]));
                let y = g.layer_norm(m, gm, bt, 1e-5)?;
                weighted(g, y, 12)
            }),
            ("sqrt_ln_pow", |g, x| {
                let s = g.square(x);
                let s = g.add_scalar(s, 1.0);
                let a = g.sqrt(s);
                let b = g.ln(s);
                let c = g.powf(s, 0.3);
                let ab = g.add(a, b)?;
                let y = g.add(ab, c)?;
                weighted(g, y, 13)
            }),
        ];
        let mut rng = Rng::new(42);
        for (name, f) in cases {
            for _ in 0..10 {
                let x = rng.uniform_tensor(&[6], -2., 2.);
                let err = grad_check(f, &x, 1e-5).unwrap();
                assert!(err <= 1e-4, "{name}: {err}");
            }
        }
    }
}
