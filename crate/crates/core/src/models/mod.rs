//! Model zoo: MLP, FC-KAN and the spline/RBF KAN baselines.
//!
//! Every model is a stack of layers over `widths = (d0, d1, ..., dL)`.
//! Parameters live in one flat list; a forward pass registers them on a
//! [`Tape`] and the layer descriptors refer to them by index.
//!
//! Layer templates (`x` is the layer input, `W` maps `d_l -> d_{l+1}`):
//!
//! | kind           | layer                                               |
//! |----------------|-----------------------------------------------------|
//! | mlp            | `LN(x) W`, ReLU after every hidden layer            |
//! | fc-kan         | `f(LN(x)) W` for each `f` in F, weights shared      |
//! | efficient-kan  | `silu(x) W_base + B(x) (W_spline * scaler)`         |
//! | fast-kan       | `R(LN(x)) W_rbf + silu(x) W_base + b`               |
//! | bsrbf-kan      | `silu(h) W_base + (B(h) + R(h)) W_spline`, `h = LN(x)` |
//!
//! For fc-kan the per-function networks are run independently and their
//! logits merged with [`combine_outputs`].

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Tape, Var};
use crate::basis::{Elementwise, GridBasis, RbfGrid, RbfSpec, SplineGrid, SplineSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "fc-kan")]
    FcKan,
    #[serde(rename = "efficient-kan")]
    EfficientKan,
    #[serde(rename = "fast-kan")]
    FastKan,
    #[serde(rename = "bsrbf-kan")]
    BsrbfKan,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Mlp,
        ModelKind::FcKan,
        ModelKind::EfficientKan,
        ModelKind::FastKan,
        ModelKind::BsrbfKan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::FcKan => "fc-kan",
            ModelKind::EfficientKan => "efficient-kan",
            ModelKind::FastKan => "fast-kan",
            ModelKind::BsrbfKan => "bsrbf-kan",
        }
    }

    pub fn is_spline_kan(self) -> bool {
        matches!(
            self,
            ModelKind::EfficientKan | ModelKind::FastKan | ModelKind::BsrbfKan
        )
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown model kind `{s}`")))
    }
}

/// How fc-kan merges its per-function outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    Sum,
    Product,
}

impl Combine {
    pub fn name(self) -> &'static str {
        match self {
            Combine::Sum => "sum",
            Combine::Product => "product",
        }
    }
}

impl FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sum" => Ok(Combine::Sum),
            "product" | "prod" => Ok(Combine::Product),
            other => Err(Error::Config(format!("unknown combination `{other}`"))),
        }
    }
}

/// Default RBF grid for fast-kan: 8 centres on `[-2, 2]`.
pub fn default_fast_rbf() -> RbfSpec {
    RbfSpec {
        grid_size: 8,
        lo: -2.0,
        hi: 2.0,
    }
}

/// Declarative description of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub widths: Vec<usize>,
    /// fc-kan only.
    #[serde(default)]
    pub functions: Vec<Elementwise>,
    /// fc-kan only; ignored with a single function.
    #[serde(default)]
    pub combine: Combine,
    /// efficient-kan and bsrbf-kan B-spline grid.
    #[serde(default)]
    pub spline: SplineSpec,
    /// fast-kan RBF grid.
    #[serde(default = "default_fast_rbf")]
    pub rbf: RbfSpec,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    fn base(kind: ModelKind, widths: &[usize]) -> Self {
        Self {
            kind,
            widths: widths.to_vec(),
            functions: Vec::new(),
            combine: Combine::Sum,
            spline: SplineSpec::default(),
            rbf: default_fast_rbf(),
            seed: 0,
        }
    }

    pub fn mlp(widths: &[usize]) -> Self {
        Self::base(ModelKind::Mlp, widths)
    }

    pub fn fc_kan(widths: &[usize], functions: &[Elementwise], combine: Combine) -> Self {
        Self {
            functions: functions.to_vec(),
            combine,
            ..Self::base(ModelKind::FcKan, widths)
        }
    }

    pub fn efficient_kan(widths: &[usize]) -> Self {
        Self::base(ModelKind::EfficientKan, widths)
    }

    pub fn fast_kan(widths: &[usize]) -> Self {
        Self::base(ModelKind::FastKan, widths)
    }

    pub fn bsrbf_kan(widths: &[usize]) -> Self {
        Self::base(ModelKind::BsrbfKan, widths)
    }

    /// Default configuration for any kind; fc-kan gets `{sin, cos}` summed.
    pub fn for_kind(kind: ModelKind, widths: &[usize]) -> Self {
        match kind {
            ModelKind::FcKan => {
                Self::fc_kan(widths, &[Elementwise::Sin, Elementwise::Cos], Combine::Sum)
            }
            _ => Self::base(kind, widths),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Short human label, e.g. `fc-kan sin+cos (sum)`.
    pub fn label(&self) -> String {
        match self.kind {
            ModelKind::FcKan => {
                let names: Vec<_> = self.functions.iter().map(|f| f.name()).collect();
                if self.functions.len() > 1 {
                    format!("fc-kan {} ({})", names.join("+"), self.combine.name())
                } else {
                    format!("fc-kan {}", names.join("+"))
                }
            }
            k => k.name().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 widths, got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "widths must be >= 1, got {:?}",
                self.widths
            )));
        }
        if self.kind == ModelKind::FcKan {
            if self.functions.is_empty() || self.functions.len() > 4 {
                return Err(Error::Config(format!(
                    "fc-kan needs 1 to 4 functions, got {}",
                    self.functions.len()
                )));
            }
            if let Some(f) = self.functions.iter().find(|f| {
                !matches!(
                    f,
                    Elementwise::Sin | Elementwise::Cos | Elementwise::Arctan | Elementwise::Relu
                )
            }) {
                return Err(Error::Config(format!(
                    "fc-kan functions are drawn from sin, cos, arctan, relu; got {f}"
                )));
            }
        }
        if matches!(self.kind, ModelKind::EfficientKan | ModelKind::BsrbfKan) {
            SplineGrid::new(&self.spline)?;
        }
        if self.kind == ModelKind::BsrbfKan {
            RbfGrid::new(&self.bsrbf_rbf())?;
        }
        if self.kind == ModelKind::FastKan {
            RbfGrid::new(&self.rbf)?;
        }
        Ok(())
    }

    /// bsrbf-kan pairs each spline with `G + k` Gaussians over the same range.
    fn bsrbf_rbf(&self) -> RbfSpec {
        RbfSpec {
            grid_size: self.spline.num_basis(),
            lo: self.spline.lo,
            hi: self.spline.hi,
        }
    }
}

/// A trainable tensor with bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub layer: usize,
    pub value: Tensor,
    /// Whether weight decay applies (weights yes, norms and biases no).
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    /// mlp and fc-kan share this layout.
    Plain {
        gamma: usize,
        beta: usize,
        weight: usize,
    },
    Efficient {
        base: usize,
        spline: usize,
        scaler: usize,
    },
    Fast {
        gamma: usize,
        beta: usize,
        rbf_weight: usize,
        base: usize,
        bias: usize,
    },
    Bsrbf {
        gamma: usize,
        beta: usize,
        base: usize,
        spline: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    layers: Vec<Layer>,
    spline_grid: Option<GridBasis>,
    rbf_grid: Option<GridBasis>,
}

/// PyTorch-style Kaiming-uniform (`a = sqrt(5)`): `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn kaiming_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, scale: f32) -> Tensor {
    let bound = scale / (fan_in as f32).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::new(rows, cols, data).expect("shape")
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl Builder {
    fn add(&mut self, name: String, layer: usize, value: Tensor, decay: bool) -> usize {
        self.params.push(Param {
            name,
            layer,
            value,
            decay,
        });
        self.params.len() - 1
    }

    fn norm(&mut self, l: usize, d: usize) -> (usize, usize) {
        let g = self.add(format!("layers.{l}.norm.gamma"), l, Tensor::ones(1, d), false);
        let b = self.add(format!("layers.{l}.norm.beta"), l, Tensor::zeros(1, d), false);
        (g, b)
    }

    fn linear(&mut self, name: String, l: usize, fan_in: usize, out: usize, scale: f32) -> usize {
        let w = kaiming_uniform(&mut self.rng, fan_in, out, fan_in, scale);
        self.add(name, l, w, true)
    }
}

/// Builds and deterministically initializes a model from `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        params: Vec::new(),
    };
    let spline_grid = match config.kind {
        ModelKind::EfficientKan | ModelKind::BsrbfKan => {
            Some(GridBasis::BSpline(SplineGrid::new(&config.spline)?))
        }
        _ => None,
    };
    let rbf_grid = match config.kind {
        ModelKind::FastKan => Some(GridBasis::Rbf(RbfGrid::new(&config.rbf)?)),
        ModelKind::BsrbfKan => Some(GridBasis::Rbf(RbfGrid::new(&config.bsrbf_rbf())?)),
        _ => None,
    };

    let mut layers = Vec::new();
    for (l, pair) in config.widths.windows(2).enumerate() {
        let (d_in, d_out) = (pair[0], pair[1]);
        let layer = match config.kind {
            ModelKind::Mlp | ModelKind::FcKan => {
                let (gamma, beta) = b.norm(l, d_in);
                let weight = b.linear(format!("layers.{l}.weight"), l, d_in, d_out, 1.0);
                Layer::Plain {
                    gamma,
                    beta,
                    weight,
                }
            }
            ModelKind::EfficientKan => {
                let nb = config.spline.num_basis();
                let base = b.linear(format!("layers.{l}.base_weight"), l, d_in, d_out, 1.0);
                let spline = b.linear(
                    format!("layers.{l}.spline_weight"),
                    l,
                    d_in * nb,
                    d_out,
                    0.1,
                );
                let scaler = b.linear(format!("layers.{l}.spline_scaler"), l, d_in, d_out, 1.0);
                Layer::Efficient {
                    base,
                    spline,
                    scaler,
                }
            }
            ModelKind::FastKan => {
                let nb = config.rbf.grid_size;
                let (gamma, beta) = b.norm(l, d_in);
                let rbf_weight =
                    b.linear(format!("layers.{l}.rbf_weight"), l, d_in * nb, d_out, 0.1);
                let base = b.linear(format!("layers.{l}.base_weight"), l, d_in, d_out, 1.0);
                let bound = 1.0 / (d_in as f32).sqrt();
                let bias_data = (0..d_out).map(|_| b.rng.gen_range(-bound..=bound)).collect();
                let bias = b.add(
                    format!("layers.{l}.base_bias"),
                    l,
                    Tensor::new(1, d_out, bias_data)?,
                    false,
                );
                Layer::Fast {
                    gamma,
                    beta,
                    rbf_weight,
                    base,
                    bias,
                }
            }
            ModelKind::BsrbfKan => {
                let nb = config.spline.num_basis();
                let (gamma, beta) = b.norm(l, d_in);
                let base = b.linear(format!("layers.{l}.base_weight"), l, d_in, d_out, 1.0);
                let spline = b.linear(
                    format!("layers.{l}.spline_weight"),
                    l,
                    d_in * nb,
                    d_out,
                    0.1,
                );
                Layer::Bsrbf {
                    gamma,
                    beta,
                    base,
                    spline,
                }
            }
        };
        layers.push(layer);
    }

    Ok(Model {
        config: config.clone(),
        params: b.params,
        layers,
        spline_grid,
        rbf_grid,
    })
}

/// Merges per-function outputs element-wise: sum or Hadamard product.
pub fn combine_outputs(tape: &mut Tape, outputs: &[Var], method: Combine) -> Result<Var> {
    let (&first, rest) = outputs
        .split_first()
        .ok_or_else(|| Error::Contract("combine_outputs needs at least one tensor".into()))?;
    rest.iter().try_fold(first, |acc, &o| match method {
        Combine::Sum => tape.add(acc, o),
        Combine::Product => tape.mul(acc, o),
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Trainable scalars per layer, in layer order.
    pub fn layer_param_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.layers.len()];
        for p in &self.params {
            counts[p.layer] += p.value.len();
        }
        counts
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Puts every parameter on the tape, trainable or constant.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let d0 = self.config.widths[0];
        let shape = tape.value(x).shape();
        if shape.1 != d0 {
            return Err(Error::Shape {
                op: "model input",
                left: shape,
                right: (shape.0, d0),
            });
        }
        Ok(())
    }

    fn expect_kind(&self, ok: bool, what: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{what} called on a {} model",
                self.config.kind
            )))
        }
    }

    /// Logits for `x`, dispatching on the model kind.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        match self.config.kind {
            ModelKind::Mlp => self.forward_mlp(tape, params, x),
            ModelKind::FcKan => self.forward_fckan(tape, params, x),
            _ => self.forward_spline_kan(tape, params, x),
        }
    }

    pub fn forward_mlp(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.expect_kind(self.config.kind == ModelKind::Mlp, "forward_mlp")?;
        self.check_input(tape, x)?;
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let Layer::Plain {
                gamma,
                beta,
                weight,
            } = *layer
            else {
                unreachable!("mlp layers are plain")
            };
            h = tape.layer_norm(h, params[gamma], params[beta], LAYER_NORM_EPS)?;
            h = tape.matmul(h, params[weight])?;
            if l < last {
                h = tape.activation(Activation::Relu, h);
            }
        }
        Ok(h)
    }

    /// One independent pass per function, all sharing the same weights,
    /// merged with the configured combination.
    pub fn forward_fckan(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.expect_kind(self.config.kind == ModelKind::FcKan, "forward_fckan")?;
        if self.config.functions.is_empty() {
            return Err(Error::Config("fc-kan needs at least one function".into()));
        }
        self.check_input(tape, x)?;
        let plain = |layer: &Layer| match *layer {
            Layer::Plain {
                gamma,
                beta,
                weight,
            } => (params[gamma], params[beta], params[weight]),
            _ => unreachable!("fc-kan layers are plain"),
        };

        // The first normalization sees the same input in every pass.
        let (g0, b0, _) = plain(&self.layers[0]);
        let normed = tape.layer_norm(x, g0, b0, LAYER_NORM_EPS)?;

        let mut outputs = Vec::with_capacity(self.config.functions.len());
        for &f in &self.config.functions {
            let act = Activation::try_from(f)?;
            let mut h = normed;
            for (l, layer) in self.layers.iter().enumerate() {
                let (gamma, beta, weight) = plain(layer);
                if l > 0 {
                    h = tape.layer_norm(h, gamma, beta, LAYER_NORM_EPS)?;
                }
                h = tape.activation(act, h);
                h = tape.matmul(h, weight)?;
            }
            outputs.push(h);
        }
        combine_outputs(tape, &outputs, self.config.combine)
    }

    pub fn forward_spline_kan(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.expect_kind(self.config.kind.is_spline_kan(), "forward_spline_kan")?;
        self.check_input(tape, x)?;
        let mut h = x;
        for layer in &self.layers {
            h = match *layer {
                Layer::Efficient {
                    base,
                    spline,
                    scaler,
                } => {
                    let grid = self.spline_grid.as_ref().expect("spline grid");
                    let act = tape.activation(Activation::Silu, h);
                    let base_out = tape.matmul(act, params[base])?;
                    let expanded = tape.expand(h, grid);
                    let scaled = tape.group_scale(params[spline], params[scaler], grid.len())?;
                    let spline_out = tape.matmul(expanded, scaled)?;
                    tape.add(base_out, spline_out)?
                }
                Layer::Fast {
                    gamma,
                    beta,
                    rbf_weight,
                    base,
                    bias,
                } => {
                    let grid = self.rbf_grid.as_ref().expect("rbf grid");
                    let normed = tape.layer_norm(h, params[gamma], params[beta], LAYER_NORM_EPS)?;
                    let expanded = tape.expand(normed, grid);
                    let rbf_out = tape.matmul(expanded, params[rbf_weight])?;
                    let act = tape.activation(Activation::Silu, h);
                    let base_out = tape.matmul(act, params[base])?;
                    let base_out = tape.add_row(base_out, params[bias])?;
                    tape.add(rbf_out, base_out)?
                }
                Layer::Bsrbf {
                    gamma,
                    beta,
                    base,
                    spline,
                } => {
                    let sgrid = self.spline_grid.as_ref().expect("spline grid");
                    let rgrid = self.rbf_grid.as_ref().expect("rbf grid");
                    let normed = tape.layer_norm(h, params[gamma], params[beta], LAYER_NORM_EPS)?;
                    let act = tape.activation(Activation::Silu, normed);
                    let base_out = tape.matmul(act, params[base])?;
                    let bs = tape.expand(normed, sgrid);
                    let rb = tape.expand(normed, rgrid);
                    let mixed = tape.add(bs, rb)?;
                    let spline_out = tape.matmul(mixed, params[spline])?;
                    tape.add(base_out, spline_out)?
                }
                Layer::Plain { .. } => unreachable!("spline kans have no plain layers"),
            };
        }
        Ok(h)
    }

    /// Logits without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let input = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, input)?;
        Ok(tape.value(out).clone())
    }
}

/// Parameter count without allocating the model.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    Ok(build_model(config)?.count_params())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE: [usize; 3] = [784, 64, 10];

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    #[test]
    fn mlp_param_count() {
        let m = build_model(&ModelConfig::mlp(&TABLE)).unwrap();
        assert_eq!(m.count_params(), 784 * 64 + 64 * 10 + 2 * 784 + 2 * 64);
        assert_eq!(m.count_params(), 52512);
        assert_eq!(m.layer_param_counts(), vec![784 * 64 + 2 * 784, 64 * 10 + 2 * 64]);
    }

    #[test]
    fn efficient_kan_param_count() {
        let m = build_model(&ModelConfig::efficient_kan(&TABLE)).unwrap();
        assert_eq!(m.count_params(), 508160);
        let spline = m.param("layers.0.spline_weight").unwrap();
        assert_eq!(spline.value.shape(), (784 * 8, 64));
    }

    #[test]
    fn fc_kan_count_is_shared_across_variants() {
        use Elementwise::*;
        let sets: [&[Elementwise]; 8] = [
            &[Sin, Cos],
            &[Sin, Relu],
            &[Sin, Arctan],
            &[Cos, Relu],
            &[Cos, Arctan],
            &[Arctan, Relu],
            &[Sin],
            &[Cos],
        ];
        for fs in sets {
            for c in [Combine::Sum, Combine::Product] {
                let m = build_model(&ModelConfig::fc_kan(&TABLE, fs, c)).unwrap();
                assert_eq!(m.count_params(), 52512);
            }
        }
    }

    #[test]
    fn baseline_counts_are_close_to_reported() {
        let fast = count_params(&ModelConfig::fast_kan(&TABLE)).unwrap();
        let bsrbf = count_params(&ModelConfig::bsrbf_kan(&TABLE)).unwrap();
        assert_eq!(fast, 459114);
        assert_eq!(bsrbf, 459040);
        assert!((fast as f64 - 459098.0).abs() / 459098.0 < 5e-4);
        assert!((bsrbf as f64 - 459024.0).abs() / 459024.0 < 5e-4);
    }

    #[test]
    fn config_validation() {
        assert!(build_model(&ModelConfig::mlp(&[784])).is_err());
        assert!(build_model(&ModelConfig::mlp(&[784, 0, 10])).is_err());
        let empty = ModelConfig::fc_kan(&TABLE, &[], Combine::Sum);
        assert!(matches!(build_model(&empty), Err(Error::Config(_))));
        let tan = ModelConfig::fc_kan(&TABLE, &[Elementwise::Tan], Combine::Sum);
        assert!(build_model(&tan).is_err());
        assert!("convnet".parse::<ModelKind>().is_err());
    }

    #[test]
    fn zero_final_weights_give_zero_logits() {
        let mut m = build_model(&ModelConfig::mlp(&[16, 8, 10])).unwrap();
        m.param_mut("layers.1.weight").unwrap().value = Tensor::zeros(8, 10);
        let logits = m.predict(&Tensor::zeros(3, 16)).unwrap();
        assert_eq!(logits.shape(), (3, 10));
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_kind_produces_finite_logits_of_the_right_shape() {
        let x = random_input(5, 20, 7);
        for kind in ModelKind::ALL {
            let m = build_model(&ModelConfig::for_kind(kind, &[20, 12, 10])).unwrap();
            let y = m.predict(&x).unwrap();
            assert_eq!(y.shape(), (5, 10), "{kind}");
            assert!(y.is_finite(), "{kind}");
        }
    }

    #[test]
    fn input_width_mismatch() {
        let m = build_model(&ModelConfig::mlp(&[20, 10])).unwrap();
        assert!(matches!(
            m.predict(&Tensor::zeros(2, 19)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn forward_kind_mismatch_is_an_error() {
        let m = build_model(&ModelConfig::mlp(&[4, 2])).unwrap();
        let mut tape = Tape::new();
        let p = m.register(&mut tape, false);
        let x = tape.constant(Tensor::zeros(1, 4));
        assert!(m.forward_fckan(&mut tape, &p, x).is_err());
        assert!(m.forward_spline_kan(&mut tape, &p, x).is_err());
    }

    fn fckan_logits(fs: &[Elementwise], combine: Combine, x: &Tensor) -> Tensor {
        let cfg = ModelConfig::fc_kan(&[12, 6, 4], fs, combine).with_seed(3);
        build_model(&cfg).unwrap().predict(x).unwrap()
    }

    #[test]
    fn fckan_singleton_and_sum_identities() {
        use Elementwise::*;
        let x = random_input(4, 12, 1);
        let sin = fckan_logits(&[Sin], Combine::Sum, &x);
        let sin_p = fckan_logits(&[Sin], Combine::Product, &x);
        assert_eq!(sin, sin_p);

        let cos = fckan_logits(&[Cos], Combine::Sum, &x);
        let both = fckan_logits(&[Sin, Cos], Combine::Sum, &x);
        for ((a, b), s) in sin.data().iter().zip(cos.data()).zip(both.data()) {
            assert_eq!(a + b, *s);
        }
        let twice = fckan_logits(&[Sin, Sin], Combine::Sum, &x);
        for (a, t) in sin.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *t);
        }
    }

    #[test]
    fn relu_fckan_is_linear_in_last_weight() {
        let x = random_input(3, 12, 2);
        let cfg = ModelConfig::fc_kan(&[12, 6, 4], &[Elementwise::Relu], Combine::Sum);
        let mut m = build_model(&cfg).unwrap();
        let y = m.predict(&x).unwrap();
        let w = &mut m.param_mut("layers.1.weight").unwrap().value;
        w.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let y2 = m.predict(&x).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((2.0 * a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn zero_spline_weights_leave_the_base_branch() {
        let x = random_input(3, 10, 4);
        let mut m = build_model(&ModelConfig::efficient_kan(&[10, 4]).with_seed(5)).unwrap();
        let spline = &mut m.param_mut("layers.0.spline_weight").unwrap().value;
        spline.data_mut().fill(0.0);
        let y = m.predict(&x).unwrap();

        let base = &m.param("layers.0.base_weight").unwrap().value;
        let silu: Vec<f32> = x.data().iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let want = Tensor::new(3, 10, silu).unwrap().matmul(base).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn builds_are_deterministic() {
        let x = random_input(2, 16, 9);
        for kind in ModelKind::ALL {
            let cfg = ModelConfig::for_kind(kind, &[16, 8, 10]).with_seed(11);
            let a = build_model(&cfg).unwrap();
            let b = build_model(&cfg).unwrap();
            assert_eq!(a, b);
            let ya = a.predict(&x).unwrap();
            let yb = b.predict(&x).unwrap();
            assert!(ya.data().iter().zip(yb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn combine_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(&[2.0, 3.0]));
        let b = tape.constant(Tensor::row(&[4.0, 5.0]));
        let p = combine_outputs(&mut tape, &[a, b], Combine::Product).unwrap();
        assert_eq!(tape.value(p).data(), &[8.0, 15.0]);
        let s = combine_outputs(&mut tape, &[a], Combine::Sum).unwrap();
        assert_eq!(tape.value(s), tape.value(a));
        let ones = tape.constant(Tensor::ones(1, 2));
        let q = combine_outputs(&mut tape, &[a, ones], Combine::Product).unwrap();
        assert_eq!(tape.value(q), tape.value(a));
        let c = tape.constant(Tensor::ones(1, 3));
        assert!(combine_outputs(&mut tape, &[a, c], Combine::Sum).is_err());
        assert!(combine_outputs(&mut tape, &[], Combine::Sum).is_err());
    }

    #[test]
    fn weights_decay_norms_do_not() {
        let m = build_model(&ModelConfig::fast_kan(&[6, 3])).unwrap();
        for p in m.params() {
            let expect = p.name.ends_with("weight");
            assert_eq!(p.decay, expect, "{}", p.name);
        }
    }
}
