//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and whatever
//! the backward rule needs (cached derivatives, normalized activations,
//! softmax probabilities). Inputs always precede their consumers, so a
//! single reverse sweep over the node list is a valid topological order.
//!
//! A tape supports exactly one `backward` call; call [`Tape::reset`] (or
//! build a fresh tape) before recording the next step.

use crate::basis::{BasisKind, Elementwise, GridBasis};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Differentiable element-wise activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sin,
    Cos,
    Arctan,
    Tanh,
    Dog,
    /// `x * sigmoid(x)`, the base branch of the spline KANs.
    Silu,
}

impl TryFrom<Elementwise> for Activation {
    type Error = Error;

    fn try_from(e: Elementwise) -> Result<Self> {
        Ok(match e {
            Elementwise::Relu => Activation::Relu,
            Elementwise::Sin => Activation::Sin,
            Elementwise::Cos => Activation::Cos,
            Elementwise::Arctan => Activation::Arctan,
            Elementwise::Tanh => Activation::Tanh,
            Elementwise::Dog => Activation::Dog,
            Elementwise::Tan => return Err(Error::UnsupportedKind("tan".into())),
        })
    }
}

impl Activation {
    #[inline]
    fn value(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sin => x.sin(),
            Activation::Cos => x.cos(),
            Activation::Arctan => x.atan(),
            Activation::Tanh => x.tanh(),
            Activation::Dog => -x * (-0.5 * x * x).exp(),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    #[inline]
    fn value_and_derivative(self, x: f32) -> (f32, f32) {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Sin => {
                let (s, c) = x.sin_cos();
                (s, c)
            }
            Activation::Cos => {
                let (s, c) = x.sin_cos();
                (c, -s)
            }
            Activation::Arctan => (x.atan(), 1.0 / (1.0 + x * x)),
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Dog => {
                let e = (-0.5 * x * x).exp();
                (-x * e, (x * x - 1.0) * e)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                (x * s, s * (1.0 + x * (1.0 - s)))
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Unary { x: Var, deriv: Vec<f32> },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Sum(Var),
    Expand { x: Var, width: usize, deriv: Vec<f32> },
    GroupScale { w: Var, s: Var, group: usize },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

/// Recorded computation. Values and gradients are kept in parallel vectors
/// so a backward rule can read any value while writing an input's gradient.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f32>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
    swept: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Drops every node so the tape can record a new computation.
    pub fn reset(&mut self) {
        self.values.clear();
        self.grads.clear();
        self.requires.clear();
        self.ops.clear();
        self.swept = false;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires_grad);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let (r, c) = self.values[v.0].shape();
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(r, c, g.clone()).expect("grad length matches value"))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: (m, k),
                right: (k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::normal(&self.values[a.0]),
            Mat::normal(&self.values[b.0]),
            &mut out,
            n,
            false,
        );
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::new(m, n, out)?, req, Op::MatMul(a, b)))
    }

    pub fn activation(&mut self, act: Activation, x: Var) -> Var {
        let req = self.requires[x.0];
        let input = &self.values[x.0];
        let (r, c) = input.shape();
        let (out, deriv) = if req {
            let mut out = Vec::with_capacity(input.len());
            let mut deriv = Vec::with_capacity(input.len());
            for &v in input.data() {
                let (y, d) = act.value_and_derivative(v);
                out.push(y);
                deriv.push(d);
            }
            (out, deriv)
        } else {
            (input.data().iter().map(|&v| act.value(v)).collect(), Vec::new())
        };
        let value = Tensor::new(r, c, out).expect("same shape as input");
        self.push(value, req, Op::Unary { x, deriv })
    }

    /// Element-wise basis function; grid kinds and `tan` are rejected.
    pub fn apply_unary(&mut self, kind: &BasisKind, x: Var) -> Result<Var> {
        match kind {
            BasisKind::Elementwise(e) => Ok(self.activation(Activation::try_from(*e)?, x)),
            other => Err(Error::UnsupportedKind(other.name().to_string())),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (r, c) = self.shape(a);
        let out = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::new(r, c, out)?, req, Op::Add(a, b)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (r, c) = self.shape(a);
        let out = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::new(r, c, out)?, req, Op::Mul(a, b)))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(bias) != (1, n) {
            return Err(Error::Shape {
                op: "add_row",
                left: (m, n),
                right: self.shape(bias),
            });
        }
        let b = self.values[bias.0].data();
        let mut out = self.values[x.0].data().to_vec();
        for row in out.chunks_exact_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let req = self.requires[x.0] || self.requires[bias.0];
        Ok(self.push(Tensor::new(m, n, out)?, req, Op::AddRow { x, bias }))
    }

    /// Per-row `(x - mean) / sqrt(var + eps) * gamma + beta` with the biased
    /// variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (m, d) = self.shape(x);
        if d == 0 {
            return Err(Error::EmptyInput { op: "layer_norm" });
        }
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        for p in [gamma, beta] {
            if self.shape(p) != (1, d) {
                return Err(Error::Shape {
                    op: "layer_norm affine",
                    left: (m, d),
                    right: self.shape(p),
                });
            }
        }
        let xs = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        let inv_d = 1.0 / d as f32;
        for r in 0..m {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() * inv_d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() * inv_d;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            let xh = &mut xhat[r * d..(r + 1) * d];
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                // Zero-variance rows with eps = 0 normalize to 0 rather than NaN.
                let h = if rs.is_finite() { (row[j] - mean) * rs } else { 0.0 };
                xh[j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        let req = self.requires[x.0] || self.requires[gamma.0] || self.requires[beta.0];
        Ok(self.push(
            Tensor::new(m, d, out)?,
            req,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.values[x.0].data().iter().sum();
        let req = self.requires[x.0];
        self.push(Tensor::scalar(s), req, Op::Sum(x))
    }

    /// Expands each entry of an `m x d` matrix into its `nb` grid-basis
    /// values, giving `m x (d * nb)` laid out feature-major:
    /// column `i * nb + b` holds basis `b` of feature `i`.
    pub fn expand(&mut self, x: Var, basis: &GridBasis) -> Var {
        let req = self.requires[x.0];
        let input = &self.values[x.0];
        let (m, d) = input.shape();
        let nb = basis.len();
        let mut out = vec![0.0; m * d * nb];
        let mut deriv = if req { vec![0.0; m * d * nb] } else { Vec::new() };
        for (i, &v) in input.data().iter().enumerate() {
            let span = i * nb..(i + 1) * nb;
            if req {
                basis.eval_with_derivative_into(v, &mut out[span.clone()], &mut deriv[span]);
            } else {
                basis.eval_into(v, &mut out[span]);
            }
        }
        let value = Tensor::new(m, d * nb, out).expect("expanded shape");
        self.push(
            value,
            req,
            Op::Expand {
                x,
                width: nb,
                deriv,
            },
        )
    }

    /// Scales each `group`-row block `i` of `w` (shape `(d * group) x o`)
    /// by row `i` of `s` (shape `d x o`).
    pub fn group_scale(&mut self, w: Var, s: Var, group: usize) -> Result<Var> {
        let (wr, o) = self.shape(w);
        let (d, so) = self.shape(s);
        if group == 0 || so != o || d * group != wr {
            return Err(Error::Shape {
                op: "group_scale",
                left: (wr, o),
                right: (d, so),
            });
        }
        let wv = self.values[w.0].data();
        let sv = self.values[s.0].data();
        let mut out = vec![0.0; wr * o];
        for i in 0..d {
            let srow = &sv[i * o..(i + 1) * o];
            for b in 0..group {
                let r = i * group + b;
                for c in 0..o {
                    out[r * o + c] = wv[r * o + c] * srow[c];
                }
            }
        }
        let req = self.requires[w.0] || self.requires[s.0];
        Ok(self.push(Tensor::new(wr, o, out)?, req, Op::GroupScale { w, s, group }))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, as a `1 x 1` tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.shape(logits);
        if m == 0 || c == 0 {
            return Err(Error::EmptyInput {
                op: "softmax_cross_entropy",
            });
        }
        if labels.len() != m {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: (m, c),
                right: (labels.len(), 1),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Label {
                index,
                label,
                classes: c,
            });
        }
        let z = self.values[logits.0].data();
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0f64;
        for r in 0..m {
            let row = &z[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let p = &mut probs[r * c..(r + 1) * c];
            let mut total = 0.0f32;
            for (pj, &v) in p.iter_mut().zip(row) {
                *pj = (v - max).exp();
                total += *pj;
            }
            let inv = 1.0 / total;
            p.iter_mut().for_each(|pj| *pj *= inv);
            let log_sum = max + total.ln();
            loss += (log_sum - row[labels[r]]) as f64;
        }
        let value = Tensor::scalar((loss / m as f64) as f32);
        let req = self.requires[logits.0];
        Ok(self.push(
            value,
            req,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// into every reachable node with `requires_grad`. A tape can be swept
    /// once; a second call errors until [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.swept {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.swept = true;
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f32]) {
        let Tape {
            values,
            grads,
            requires,
            ops,
            ..
        } = self;

        // Gradient buffer for `v`, allocated on first touch; None when `v`
        // does not require a gradient.
        fn slot<'a>(
            grads: &'a mut [Option<Vec<f32>>],
            requires: &[bool],
            values: &[Tensor],
            v: Var,
        ) -> Option<&'a mut Vec<f32>> {
            if !requires[v.0] {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; values[v.0].len()]))
        }

        match &ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = values[i].shape();
                let gm = Mat::from_slice(g, m, n);
                let av = Mat::normal(&values[a.0]);
                let bv = Mat::normal(&values[b.0]);
                if let Some(ga) = slot(grads, requires, values, *a) {
                    // dA = dC * B^T
                    gemm(gm, bv.t(), ga, av.cols, true);
                }
                if let Some(gb) = slot(grads, requires, values, *b) {
                    // dB = A^T * dC
                    gemm(av.t(), gm, gb, n, true);
                }
            }
            Op::Unary { x, deriv } => {
                if let Some(gx) = slot(grads, requires, values, *x) {
                    for ((o, d), gv) in gx.iter_mut().zip(deriv).zip(g) {
                        *o += gv * d;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(grads, requires, values, v) {
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if let Some(gv) = slot(grads, requires, values, v) {
                        let ov = values[other.0].data();
                        for ((o, x), y) in gv.iter_mut().zip(g).zip(ov) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::AddRow { x, bias } => {
                let n = values[i].cols();
                if let Some(gx) = slot(grads, requires, values, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gb) = slot(grads, requires, values, *bias) {
                    for row in g.chunks_exact(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, d) = values[i].shape();
                if let Some(gg) = slot(grads, requires, values, *gamma) {
                    for r in 0..m {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = slot(grads, requires, values, *beta) {
                    for r in 0..m {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                let gam = values[gamma.0].data().to_vec();
                if let Some(gx) = slot(grads, requires, values, *x) {
                    let inv_d = 1.0 / d as f32;
                    let mut dxhat = vec![0.0; d];
                    for r in 0..m {
                        let rs = rstd[r];
                        if !rs.is_finite() {
                            continue;
                        }
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut sum = 0.0;
                        let mut dot = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                            sum += dxhat[j];
                            dot += dxhat[j] * xh[j];
                        }
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rs * (dxhat[j] - inv_d * sum - xh[j] * inv_d * dot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(grads, requires, values, *x) {
                    let s = g[0];
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Expand { x, width, deriv } => {
                if let Some(gx) = slot(grads, requires, values, *x) {
                    for (e, o) in gx.iter_mut().enumerate() {
                        let span = e * width..(e + 1) * width;
                        *o += g[span.clone()]
                            .iter()
                            .zip(&deriv[span])
                            .map(|(a, b)| a * b)
                            .sum::<f32>();
                    }
                }
            }
            Op::GroupScale { w, s, group } => {
                let (wr, o) = values[w.0].shape();
                let d = wr / group;
                let sv = values[s.0].data().to_vec();
                let wv = values[w.0].data().to_vec();
                if let Some(gw) = slot(grads, requires, values, *w) {
                    for i in 0..d {
                        for b in 0..*group {
                            let r = i * group + b;
                            for c in 0..o {
                                gw[r * o + c] += g[r * o + c] * sv[i * o + c];
                            }
                        }
                    }
                }
                if let Some(gs) = slot(grads, requires, values, *s) {
                    for i in 0..d {
                        for b in 0..*group {
                            let r = i * group + b;
                            for c in 0..o {
                                gs[i * o + c] += g[r * o + c] * wv[r * o + c];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (m, c) = values[logits.0].shape();
                if let Some(gl) = slot(grads, requires, values, *logits) {
                    let scale = g[0] / m as f32;
                    for r in 0..m {
                        for j in 0..c {
                            let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}
