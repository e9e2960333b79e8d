//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already topologically sorted and
//! `backward` simply walks it in reverse. Only the ops the encoder and losses need exist.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    LeakyRelu(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    OneMinusExpNeg(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Scale(Var, f64),
    Shift(Var),
    Clamp(Var, f64, f64),
    MaxPoolTime {
        input: Var,
        argmax: Vec<usize>,
    },
    L2Normalize {
        input: Var,
        norms: Vec<f64>,
    },
    SumRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like its node; zeros when nothing flowed into it.
    pub fn tensor(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Epsilon added under the square root by [`Graph::l2_normalize_rows`].
pub const L2_NORMALIZE_EPS: f64 = 1e-12;

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn parameter(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "parameter")
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Causal dilated 1-D convolution.
    ///
    /// `input` is `[N, C_in, T]`, `weight` is `[C_out, C_in, K]`, `bias` is `[C_out]`.
    /// Tap `k` reads input time `t - (K - 1 - k) * dilation`, zero before the start, so the
    /// output at `t` only sees inputs at times `<= t`.
    pub fn conv1d_causal(&mut self, input: Var, weight: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || dilation == 0 {
            return Err(Error::Shape {
                op: "conv1d_causal",
                detail: format!("input {xs:?}, weight {ws:?}, dilation {dilation}"),
            });
        }
        let (n, cin, t) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::Shape {
                    op: "conv1d_causal",
                    detail: format!("bias {:?} for {cout} output channels", self.shape(b)),
                });
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; n * cout * t];
        for ni in 0..n {
            for o in 0..cout {
                let row = &mut out[(ni * cout + o) * t..(ni * cout + o + 1) * t];
                if let Some(b) = bias {
                    row.fill(self.nodes[b.0].value.data()[o]);
                }
                for i in 0..cin {
                    let xrow = &x[(ni * cin + i) * t..(ni * cin + i + 1) * t];
                    for kk in 0..k {
                        let shift = (k - 1 - kk) * dilation;
                        if shift >= t {
                            continue;
                        }
                        let wv = w[(o * cin + i) * k + kk];
                        for (y, xv) in row[shift..].iter_mut().zip(&xrow[..t - shift]) {
                            *y += wv * xv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(vec![n, cout, t], out)?,
            Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
            },
            rg,
            "conv1d_causal",
        )
    }

    /// `input [N, D_in] x weight[D_out, D_in]^T + bias[D_out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("input {xs:?}, weight {ws:?}"),
            });
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(Error::Shape {
                    op: "linear",
                    detail: format!("bias {:?} for {dout} outputs", self.shape(b)),
                });
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let xr = &x[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &w[o * din..(o + 1) * din];
                let mut acc = bias.map_or(0.0, |b| self.nodes[b.0].value.data()[o]);
                for (a, b) in xr.iter().zip(wr) {
                    acc += a * b;
                }
                out[r * dout + o] = acc;
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(vec![n, dout], out)?,
            Op::Linear { input, weight, bias },
            rg,
            "linear",
        )
    }

    fn unary(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())?;
        let rg = self.rg(x);
        self.push(out, op, rg, name)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg, name)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Op::LeakyRelu(x, slope), "leaky_relu", |a| if a > 0.0 { a } else { slope * a })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Neg(x), "neg", |a| -a)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), "exp", f64::exp)
    }

    /// `1 - exp(-x)`, accurate for small `x`.
    pub fn one_minus_exp_neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::OneMinusExpNeg(x), "one_minus_exp_neg", |a| -(-a).exp_m1())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), "log", f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), "square", |a| a * a)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sqrt(x), "sqrt", f64::sqrt)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), "scale", |a| a * c)
    }

    /// `x + c`.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Shift(x), "shift", |a| a + c)
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Op::Clamp(x, lo, hi), "clamp", |a| a.clamp(lo, hi))
    }

    /// Max over time of `[N, C, T]`, restricted to the first `len` timesteps; yields `[N, C]`.
    pub fn max_pool_time(&mut self, x: Var, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || len == 0 || len > xs[2] {
            return Err(Error::Shape {
                op: "max_pool_time",
                detail: format!("input {xs:?}, prefix {len}"),
            });
        }
        let (n, c, t) = (xs[0], xs[1], xs[2]);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for row in 0..n * c {
            let slice = &data[row * t..row * t + len];
            let mut best = 0;
            for (i, v) in slice.iter().enumerate() {
                if *v > slice[best] {
                    best = i;
                }
            }
            out.push(slice[best]);
            argmax.push(row * t + best);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![n, c], out)?,
            Op::MaxPoolTime { input: x, argmax },
            rg,
            "max_pool_time",
        )
    }

    /// Scales each row of `[N, E]` to unit norm, `x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::Shape {
                op: "l2_normalize",
                detail: format!("input {xs:?}"),
            });
        }
        let (n, e) = (xs[0], xs[1]);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * e);
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = &data[r * e..(r + 1) * e];
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + L2_NORMALIZE_EPS).sqrt();
            out.extend(row.iter().map(|v| v / norm));
            norms.push(norm);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![n, e], out)?,
            Op::L2Normalize { input: x, norms },
            rg,
            "l2_normalize",
        )
    }

    /// Row sums of `[N, E]`, giving `[N]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::Shape {
                op: "sum_rows",
                detail: format!("input {xs:?}"),
            });
        }
        let (n, e) = (xs[0], xs[1]);
        let out: Vec<f64> = self.value(x).data().chunks(e.max(1)).map(|r| r.iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n], out)?, Op::SumRows(x), rg, "sum_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg, "mean")
    }

    /// Row-wise Euclidean norm of `[N, E]`.
    pub fn euclidean_norm_rows(&mut self, x: Var) -> Result<Var> {
        let sq = self.square(x)?;
        let s = self.sum_rows(sq)?;
        self.sqrt(s)
    }

    /// Gradients of a scalar `loss`; the graph cannot be differentiated again afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let grads = self.backward_retained(loss)?;
        self.consumed = true;
        Ok(grads)
    }

    /// Gradients of a scalar `loss`, leaving the graph reusable.
    pub fn backward_retained(&self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
            } => {
                let xs = self.shape(*input);
                let (n, cin, t) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(*weight);
                let (cout, k) = (ws[0], ws[2]);
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                if let Some(gb) = bias.and_then(|b| self.acc(grads, b)) {
                    for ni in 0..n {
                        for o in 0..cout {
                            gb[o] += g[(ni * cout + o) * t..(ni * cout + o + 1) * t].iter().sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *weight) {
                    for ni in 0..n {
                        for o in 0..cout {
                            let grow = &g[(ni * cout + o) * t..(ni * cout + o + 1) * t];
                            for i in 0..cin {
                                let xrow = &x[(ni * cin + i) * t..(ni * cin + i + 1) * t];
                                for kk in 0..k {
                                    let shift = (k - 1 - kk) * dilation;
                                    if shift >= t {
                                        continue;
                                    }
                                    let dot: f64 = grow[shift..].iter().zip(&xrow[..t - shift]).map(|(a, b)| a * b).sum();
                                    gw[(o * cin + i) * k + kk] += dot;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *input) {
                    for ni in 0..n {
                        for o in 0..cout {
                            let grow = &g[(ni * cout + o) * t..(ni * cout + o + 1) * t];
                            for i in 0..cin {
                                let xrow = &mut gx[(ni * cin + i) * t..(ni * cin + i + 1) * t];
                                for kk in 0..k {
                                    let shift = (k - 1 - kk) * dilation;
                                    if shift >= t {
                                        continue;
                                    }
                                    let wv = w[(o * cin + i) * k + kk];
                                    for (xg, gv) in xrow[..t - shift].iter_mut().zip(&grow[shift..]) {
                                        *xg += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.shape(*input);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*weight)[0];
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                if let Some(gb) = bias.and_then(|b| self.acc(grads, b)) {
                    for r in 0..n {
                        for o in 0..dout {
                            gb[o] += g[r * dout + o];
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *weight) {
                    for r in 0..n {
                        for o in 0..dout {
                            let gv = g[r * dout + o];
                            for j in 0..din {
                                gw[o * din + j] += gv * x[r * din + j];
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *input) {
                    for r in 0..n {
                        for o in 0..dout {
                            let gv = g[r * dout + o];
                            for j in 0..din {
                                gx[r * din + j] += gv * w[o * din + j];
                            }
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, gv), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *a += if *xi > 0.0 { *gv } else { slope * gv };
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gx) = self.acc(grads, v) {
                        add_into(gx, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(gx) = self.acc(grads, *a) {
                    add_into(gx, g);
                }
                if let Some(gx) = self.acc(grads, *b) {
                    for (x, gv) in gx.iter_mut().zip(g) {
                        *x -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(gx) = self.acc(grads, *a) {
                    for ((x, gv), y) in gx.iter_mut().zip(g).zip(vb) {
                        *x += gv * y;
                    }
                }
                if let Some(gx) = self.acc(grads, *b) {
                    for ((x, gv), y) in gx.iter_mut().zip(g).zip(va) {
                        *x += gv * y;
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).data();
                if let Some(gx) = self.acc(grads, *a) {
                    for ((x, gv), y) in gx.iter_mut().zip(g).zip(vb) {
                        *x += gv / y;
                    }
                }
                if let Some(gx) = self.acc(grads, *b) {
                    for (((x, gv), y), o) in gx.iter_mut().zip(g).zip(vb).zip(out) {
                        *x -= gv * o / y;
                    }
                }
            }
            Op::Neg(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (a, gv) in gx.iter_mut().zip(g) {
                        *a -= gv;
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, gv), o) in gx.iter_mut().zip(g).zip(out) {
                        *a += gv * o;
                    }
                }
            }
            Op::OneMinusExpNeg(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, gv), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *a += gv * (-xi).exp();
                    }
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, gv), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *a += gv / xi;
                    }
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, gv), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *a += 2.0 * gv * xi;
                    }
                }
            }
            Op::Sqrt(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, gv), o) in gx.iter_mut().zip(g).zip(out) {
                        if *o > 0.0 {
                            *a += gv / (2.0 * o);
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (a, gv) in gx.iter_mut().zip(g) {
                        *a += c * gv;
                    }
                }
            }
            Op::Shift(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, gv), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > *lo && *xi < *hi {
                            *a += gv;
                        }
                    }
                }
            }
            Op::MaxPoolTime { input, argmax } => {
                if let Some(gx) = self.acc(grads, *input) {
                    for (pos, gv) in argmax.iter().zip(g) {
                        gx[*pos] += gv;
                    }
                }
            }
            Op::L2Normalize { input, norms } => {
                let e = self.shape(*input)[1];
                if let Some(gx) = self.acc(grads, *input) {
                    for (r, norm) in norms.iter().enumerate() {
                        let y = &out[r * e..(r + 1) * e];
                        let gy = &g[r * e..(r + 1) * e];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..e {
                            gx[r * e + j] += (gy[j] - y[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::SumRows(x) => {
                let e = self.shape(*x)[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, gv) in g.iter().enumerate() {
                        for a in &mut gx[r * e..(r + 1) * e] {
                            *a += gv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for a in gx.iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let scale = g[0] / gx.len() as f64;
                    for a in gx.iter_mut() {
                        *a += scale;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    /// Central differences of `f` at `x`, compared with the analytic gradient.
    fn check_grad(x0: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
        let mut g = Graph::new();
        let x = g.parameter(x0.clone()).unwrap();
        let loss = f(&mut g, x).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic = grads.tensor(x);
        let h = 1e-5;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut p = x0.clone();
                p.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.constant(p).unwrap();
                let l = f(&mut g, x).unwrap();
                g.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-5, "element {i}: analytic {a}, numeric {fd}");
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 4], &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let w = g.constant(t(&[1, 1, 1], &[1.0])).unwrap();
        let y = g.conv1d_causal(x, w, None, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xv = random(&mut rng, &[2, 3, 9]);
        let wv = random(&mut rng, &[4, 3, 3]);
        let bv = random(&mut rng, &[4]);
        let mut g = Graph::new();
        let (x, w, b) = (
            g.constant(xv.clone()).unwrap(),
            g.constant(wv.clone()).unwrap(),
            g.constant(bv.clone()).unwrap(),
        );
        let y = g.conv1d_causal(x, w, Some(b), 2).unwrap();
        for n in 0..2 {
            for o in 0..4 {
                for tt in 0..9 {
                    let mut acc = bv.data()[o];
                    for i in 0..3 {
                        for k in 0..3 {
                            let src = tt as isize - ((2 - k) * 2) as isize;
                            if src >= 0 {
                                acc += wv.data()[(o * 3 + i) * 3 + k] * xv.data()[(n * 3 + i) * 9 + src as usize];
                            }
                        }
                    }
                    let got = g.value(y).data()[(n * 4 + o) * 9 + tt];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xv = random(&mut rng, &[1, 2, 12]);
        let wv = random(&mut rng, &[3, 2, 3]);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let x = g.constant(x.clone()).unwrap();
            let w = g.constant(wv.clone()).unwrap();
            let y = g.conv1d_causal(x, w, None, 2).unwrap();
            g.value(y).clone()
        };
        let base = run(&xv);
        for pert in 0..12 {
            let mut p = xv.clone();
            p.data_mut()[pert] += 1.0;
            let out = run(&p);
            for o in 0..3 {
                for tt in 0..pert {
                    assert_eq!(out.data()[o * 12 + tt], base.data()[o * 12 + tt]);
                }
            }
        }
    }

    #[test]
    fn normalize_and_pool_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[3.0, 4.0])).unwrap();
        let y = g.l2_normalize_rows(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);

        let p = g.constant(t(&[1, 1, 3], &[1.0, 5.0, 2.0])).unwrap();
        let m = g.max_pool_time(p, 3).unwrap();
        assert_eq!(g.value(m).data(), &[5.0]);
        let m = g.max_pool_time(p, 1).unwrap();
        assert_eq!(g.value(m).data(), &[1.0]);

        let z = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
        let zn = g.l2_normalize_rows(z).unwrap();
        assert_eq!(g.value(zn).data(), &[0.0, 0.0]);
    }

    #[test]
    fn simple_gradients() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.parameter(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let s = g.sum(x).unwrap();
        g.backward_retained(s).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0])).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite(_))));
        let y = g.constant(Tensor::vector(vec![0.0])).unwrap();
        assert!(matches!(g.div(x, y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::vector(vec![1.0])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        let x = g.constant(Tensor::zeros(vec![1, 2, 5])).unwrap();
        let w = g.constant(Tensor::zeros(vec![1, 3, 2])).unwrap();
        assert!(matches!(g.conv1d_causal(x, w, None, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[2, 3]);
        let pos = t(&[2, 3], &x.data().iter().map(|v| v.abs() + 0.5).collect::<Vec<_>>());
        check_grad(&x, |g, x| {
            let e = g.exp(x)?;
            let s = g.scale(e, 0.7)?;
            let n = g.neg(s)?;
            let sh = g.shift(n, 3.0)?;
            let l = g.log(sh)?;
            g.mean(l)
        });
        check_grad(&pos, |g, x| {
            let r = g.sqrt(x)?;
            let q = g.square(r)?;
            let d = g.div(q, x)?;
            let m = g.mul(d, x)?;
            let c = g.clamp(m, 0.0, 10.0)?;
            g.sum(c)
        });
        check_grad(&x, |g, x| {
            let n = g.l2_normalize_rows(x)?;
            let lr = g.leaky_relu(n, 0.1)?;
            let s = g.sum_rows(lr)?;
            let sq = g.square(s)?;
            g.sum(sq)
        });
        check_grad(&x, |g, x| {
            let nr = g.euclidean_norm_rows(x)?;
            g.sum(nr)
        });
    }

    #[test]
    fn conv_linear_pool_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = random(&mut rng, &[2, 2, 7]);
        let wv = random(&mut rng, &[3, 2, 2]);
        let lw = random(&mut rng, &[2, 3]);
        let wv2 = wv.clone();
        check_grad(&xv, move |g, x| {
            let w = g.constant(wv2.clone())?;
            let y = g.conv1d_causal(x, w, None, 3)?;
            let sq = g.square(y)?;
            g.sum(sq)
        });
        let xv2 = xv.clone();
        let lw2 = lw.clone();
        check_grad(&wv, move |g, w| {
            let x = g.constant(xv2.clone())?;
            let y = g.conv1d_causal(x, w, None, 1)?;
            let p = g.max_pool_time(y, 5)?;
            let lw = g.constant(lw2.clone())?;
            let z = g.linear(p, lw, None)?;
            let sq = g.square(z)?;
            g.sum(sq)
        });
        let bias = random(&mut rng, &[2]);
        let pooled = random(&mut rng, &[4, 3]);
        check_grad(&lw, move |g, w| {
            let p = g.constant(pooled.clone())?;
            let b = g.constant(bias.clone())?;
            let z = g.linear(p, w, Some(b))?;
            let sq = g.square(z)?;
            g.mean(sq)
        });
    }
}
