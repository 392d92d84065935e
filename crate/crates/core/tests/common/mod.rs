//! f64 reference implementations and a finite-difference gradient checker
//! shared by the test targets.

#![allow(dead_code)]

use std::collections::HashMap;

use fckan::basis::{Elementwise, RbfSpec, SplineSpec};
use fckan::models::{build_model, Combine, ModelConfig, ModelKind, LAYER_NORM_EPS};
use fckan::{Activation, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const MAX_REL: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    pub fn zeros(r: usize, c: usize) -> M {
        M { r, c, d: vec![0.0; r * c] }
    }
    pub fn from_tensor(t: &Tensor) -> M {
        M {
            r: t.rows(),
            c: t.cols(),
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.r, self.c, self.d.iter().map(|&v| v as f32).collect()).unwrap()
    }
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }
    pub fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M { r: self.r, c: self.c, d: self.d.iter().map(|&v| f(v)).collect() }
    }
    pub fn zip(&self, o: &M, f: impl Fn(f64, f64) -> f64) -> M {
        assert_eq!((self.r, self.c), (o.r, o.c));
        M { r: self.r, c: self.c, d: self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect() }
    }
    pub fn matmul(&self, o: &M) -> M {
        assert_eq!(self.c, o.r);
        let mut out = M::zeros(self.r, o.c);
        for i in 0..self.r {
            for k in 0..self.c {
                for j in 0..o.c {
                    out.d[i * o.c + j] += self.at(i, k) * o.at(k, j);
                }
            }
        }
        out
    }
    pub fn add_row(&self, b: &M) -> M {
        let mut out = self.clone();
        for i in 0..self.r {
            for j in 0..self.c {
                out.d[i * self.c + j] += b.d[j];
            }
        }
        out
    }
}

pub fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> M {
    // Round through f32 so the tape and the reference see identical inputs.
    M { r, c, d: (0..r * c).map(|_| rng.gen_range(lo..hi) as f32 as f64).collect() }
}

pub fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Sin => x.sin(),
        Activation::Cos => x.cos(),
        Activation::Arctan => x.atan(),
        Activation::Tanh => x.tanh(),
        Activation::Dog => -x * (-x * x / 2.0).exp(),
        Activation::Silu => x / (1.0 + (-x).exp()),
    }
}

pub fn elementwise_act(e: Elementwise) -> Activation {
    match e {
        Elementwise::Relu => Activation::Relu,
        Elementwise::Sin => Activation::Sin,
        Elementwise::Cos => Activation::Cos,
        Elementwise::Arctan => Activation::Arctan,
        Elementwise::Tanh => Activation::Tanh,
        Elementwise::Dog => Activation::Dog,
        Elementwise::Tan => panic!("tan is not trainable"),
    }
}

pub fn layer_norm(x: &M, g: &M, b: &M, eps: f64) -> M {
    let mut out = M::zeros(x.r, x.c);
    for i in 0..x.r {
        let row = &x.d[i * x.c..(i + 1) * x.c];
        let mean = row.iter().sum::<f64>() / x.c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..x.c {
            out.d[i * x.c + j] = (row[j] - mean) * rstd * g.d[j] + b.d[j];
        }
    }
    out
}

/// Textbook recursive Cox–de Boor over a uniform grid extended by `k`
/// knots on each side.
pub fn bspline(x: f64, s: &SplineSpec) -> Vec<f64> {
    let (g, k) = (s.grid_size, s.order);
    let h = (s.hi as f64 - s.lo as f64) / g as f64;
    let t: Vec<f64> = (0..g + 2 * k + 1)
        .map(|i| s.lo as f64 + (i as f64 - k as f64) * h)
        .collect();
    pub fn b(t: &[f64], j: usize, p: usize, x: f64) -> f64 {
        if p == 0 {
            return if t[j] <= x && x < t[j + 1] { 1.0 } else { 0.0 };
        }
        let left = (x - t[j]) / (t[j + p] - t[j]) * b(t, j, p - 1, x);
        let right = (t[j + p + 1] - x) / (t[j + p + 1] - t[j + 1]) * b(t, j + 1, p - 1, x);
        left + right
    }
    (0..g + k).map(|j| b(&t, j, k, x)).collect()
}

pub fn rbf(x: f64, s: &RbfSpec) -> Vec<f64> {
    let (lo, hi) = (s.lo as f64, s.hi as f64);
    let h = (hi - lo) / (s.grid_size - 1) as f64;
    (0..s.grid_size)
        .map(|i| {
            let c = lo + i as f64 * h;
            (-((x - c) / h).powi(2)).exp()
        })
        .collect()
}

pub fn expand(x: &M, f: &dyn Fn(f64) -> Vec<f64>) -> M {
    let nb = f(0.0).len();
    let mut out = M::zeros(x.r, x.c * nb);
    for i in 0..x.r {
        for j in 0..x.c {
            for (b, v) in f(x.at(i, j)).into_iter().enumerate() {
                out.d[i * x.c * nb + j * nb + b] = v;
            }
        }
    }
    out
}

pub fn group_scale(w: &M, s: &M, group: usize) -> M {
    let mut out = w.clone();
    for r in 0..w.r {
        for c in 0..w.c {
            out.d[r * w.c + c] *= s.at(r / group, c);
        }
    }
    out
}

pub fn cross_entropy(logits: &M, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.d[i * logits.c..(i + 1) * logits.c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

pub fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / (fd.abs() + 1e-6)
}

/// Checks d(loss)/d(input) for every entry of every input in `check` and
/// returns the worst relative error.
/// `loss_ref` maps f64 inputs to the scalar loss; `tape_fn` builds the same
/// scalar on a tape.
pub fn check_grads(
    name: &str,
    inputs: &[M],
    check: &[usize],
    tape_fn: &dyn Fn(&mut Tape, &[Var]) -> Var,
    loss_ref: &dyn Fn(&[M]) -> f64,
) -> Result<f64, String> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.to_tensor(), true)).collect();
    let loss = tape_fn(&mut tape, &vars);
    let tape_loss = tape.value(loss).data()[0] as f64;
    let ref_loss = loss_ref(inputs);
    if (tape_loss - ref_loss).abs() > 1e-4 * (1.0 + ref_loss.abs()) {
        return Err(format!("{name}: forward {tape_loss} vs reference {ref_loss}"));
    }
    tape.backward(loss).map_err(|e| e.to_string())?;
    let mut overall: f64 = 0.0;
    for &k in check {
        let grad = tape.grad(vars[k]).expect("gradient");
        let mut worst = (0.0, 0, 0.0, 0.0);
        for e in 0..inputs[k].d.len() {
            let mut plus = inputs.to_vec();
            plus[k].d[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].d[e] -= FD_STEP;
            let fd = (loss_ref(&plus) - loss_ref(&minus)) / (2.0 * FD_STEP);
            let r = rel_err(grad[e] as f64, fd);
            if r > worst.0 {
                worst = (r, e, grad[e] as f64, fd);
            }
        }
        if worst.0 >= MAX_REL {
            return Err(format!(
                "{name}: input {k} entry {} analytic {} vs fd {} (rel {})",
                worst.1, worst.2, worst.3, worst.0
            ));
        }
        overall = overall.max(worst.0);
    }
    Ok(overall)
}

/// `sum(out * r)` for a fixed random `r`: every output entry gets a
/// distinct weight so cancellations cannot hide errors.
pub fn weighted(tape: &mut Tape, out: Var, r: &M) -> Var {
    let rv = tape.constant(r.to_tensor());
    let prod = tape.mul(out, rv).unwrap();
    tape.sum(prod)
}

pub fn dot(a: &M, r: &M) -> f64 {
    a.d.iter().zip(&r.d).map(|(x, y)| x * y).sum()
}

/// Independent f64 forward of every model kind, driven by parameter names.
pub fn reference_logits(cfg: &ModelConfig, p: &HashMap<String, M>, x: &M) -> M {
    let n_layers = cfg.widths.len() - 1;
    let get = |l: usize, name: &str| &p[&format!("layers.{l}.{name}")];
    let silu = |v: f64| act(Activation::Silu, v);
    let eps = LAYER_NORM_EPS as f64;
    match cfg.kind {
        ModelKind::Mlp => {
            let mut h = x.clone();
            for l in 0..n_layers {
                h = layer_norm(&h, get(l, "norm.gamma"), get(l, "norm.beta"), eps).matmul(get(l, "weight"));
                if l + 1 < n_layers {
                    h = h.map(|v| v.max(0.0));
                }
            }
            h
        }
        ModelKind::FcKan => {
            let outs: Vec<M> = cfg
                .functions
                .iter()
                .map(|&f| {
                    let a = elementwise_act(f);
                    let mut h = x.clone();
                    for l in 0..n_layers {
                        h = layer_norm(&h, get(l, "norm.gamma"), get(l, "norm.beta"), eps)
                            .map(|v| act(a, v))
                            .matmul(get(l, "weight"));
                    }
                    h
                })
                .collect();
            outs.iter().skip(1).fold(outs[0].clone(), |acc, o| match cfg.combine {
                Combine::Sum => acc.zip(o, |a, b| a + b),
                Combine::Product => acc.zip(o, |a, b| a * b),
            })
        }
        ModelKind::EfficientKan => {
            let nb = cfg.spline.num_basis();
            let mut h = x.clone();
            for l in 0..n_layers {
                let base = h.map(silu).matmul(get(l, "base_weight"));
                let w = group_scale(get(l, "spline_weight"), get(l, "spline_scaler"), nb);
                let spline = expand(&h, &|v| bspline(v, &cfg.spline)).matmul(&w);
                h = base.zip(&spline, |a, b| a + b);
            }
            h
        }
        ModelKind::FastKan => {
            let mut h = x.clone();
            for l in 0..n_layers {
                let normed = layer_norm(&h, get(l, "norm.gamma"), get(l, "norm.beta"), eps);
                let rbf_out = expand(&normed, &|v| rbf(v, &cfg.rbf)).matmul(get(l, "rbf_weight"));
                let base = h.map(silu).matmul(get(l, "base_weight")).add_row(get(l, "base_bias"));
                h = rbf_out.zip(&base, |a, b| a + b);
            }
            h
        }
        ModelKind::BsrbfKan => {
            let rspec = RbfSpec {
                grid_size: cfg.spline.num_basis(),
                lo: cfg.spline.lo,
                hi: cfg.spline.hi,
            };
            let mut h = x.clone();
            for l in 0..n_layers {
                let normed = layer_norm(&h, get(l, "norm.gamma"), get(l, "norm.beta"), eps);
                let base = normed.map(silu).matmul(get(l, "base_weight"));
                let mixed = expand(&normed, &|v| bspline(v, &cfg.spline))
                    .zip(&expand(&normed, &|v| rbf(v, &rspec)), |a, b| a + b);
                let spline = mixed.matmul(get(l, "spline_weight"));
                h = base.zip(&spline, |a, b| a + b);
            }
            h
        }
    }
}

/// Cross-entropy gradients of every parameter on a batch of 4 inputs.
pub fn check_model(cfg: ModelConfig) -> Result<f64, String> {
    let mut model = build_model(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Non-trivial affine parameters so their gradients are exercised.
    for p in model.params_mut() {
        if p.name.ends_with("norm.gamma") || p.name.ends_with("norm.beta") || p.name.ends_with("bias") {
            let shift = if p.name.ends_with("gamma") { 1.0 } else { 0.0 };
            for v in p.value.data_mut() {
                *v = shift + rng.gen_range(-0.3f32..0.3);
            }
        }
    }
    let x = random(&mut rng, 4, cfg.widths[0], -0.95, 0.95);
    let labels: Vec<usize> = (0..4).map(|i| i % cfg.widths[cfg.widths.len() - 1]).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut inputs: Vec<M> = model.params().iter().map(|p| M::from_tensor(&p.value)).collect();
    inputs.push(x);
    let check: Vec<usize> = (0..names.len()).collect();
    let label = cfg.label();
    check_grads(
        &label,
        &inputs,
        &check,
        &|t, v| {
            let (params, x) = v.split_at(v.len() - 1);
            let logits = model.forward(t, params, x[0]).unwrap();
            t.softmax_cross_entropy(logits, &labels).unwrap()
        },
        &|m| {
            let p: HashMap<String, M> = names.iter().cloned().zip(m.iter().cloned()).collect();
            cross_entropy(&reference_logits(&cfg, &p, &m[m.len() - 1]), &labels)
        },
    )
}

pub const TOY: [usize; 3] = [16, 5, 3];
