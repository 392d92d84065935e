//! Univariate basis functions.
//!
//! Two families live here: element-wise kernels (ReLU, sin, cos, arctan,
//! tan, tanh and the derivative-of-Gaussian) that map a scalar to a scalar,
//! and grid-expanding bases (B-splines and Gaussian RBFs) that map a scalar
//! to a vector of basis values over a fixed grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar-to-scalar basis kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Elementwise {
    Relu,
    Sin,
    Cos,
    Arctan,
    Tan,
    Tanh,
    Dog,
}

impl Elementwise {
    pub const ALL: [Elementwise; 7] = [
        Elementwise::Relu,
        Elementwise::Sin,
        Elementwise::Cos,
        Elementwise::Arctan,
        Elementwise::Tan,
        Elementwise::Tanh,
        Elementwise::Dog,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Elementwise::Relu => "relu",
            Elementwise::Sin => "sin",
            Elementwise::Cos => "cos",
            Elementwise::Arctan => "arctan",
            Elementwise::Tan => "tan",
            Elementwise::Tanh => "tanh",
            Elementwise::Dog => "dog",
        }
    }

    /// `tan` is only ever benchmarked, never trained.
    pub fn is_trainable(self) -> bool {
        self != Elementwise::Tan
    }

    #[inline]
    pub fn eval(self, x: f32) -> f32 {
        match self {
            Elementwise::Relu => x.max(0.0),
            Elementwise::Sin => x.sin(),
            Elementwise::Cos => x.cos(),
            Elementwise::Arctan => x.atan(),
            Elementwise::Tan => x.tan(),
            Elementwise::Tanh => x.tanh(),
            Elementwise::Dog => -x * (-0.5 * x * x).exp(),
        }
    }

    /// Analytic derivative. `relu'(0)` is taken as 0.
    #[inline]
    pub fn derivative(self, x: f32) -> Result<f32> {
        Ok(match self {
            Elementwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Elementwise::Sin => x.cos(),
            Elementwise::Cos => -x.sin(),
            Elementwise::Arctan => 1.0 / (1.0 + x * x),
            Elementwise::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Elementwise::Dog => (x * x - 1.0) * (-0.5 * x * x).exp(),
            Elementwise::Tan => return Err(Error::UnsupportedKind("tan".into())),
        })
    }
}

impl fmt::Display for Elementwise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Elementwise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Elementwise::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::UnsupportedKind(s.to_string()))
    }
}

/// Order-`order` B-splines over `grid_size` uniform intervals of `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub grid_size: usize,
    pub order: usize,
    pub lo: f32,
    pub hi: f32,
}

impl Default for SplineSpec {
    fn default() -> Self {
        Self {
            grid_size: 5,
            order: 3,
            lo: -1.0,
            hi: 1.0,
        }
    }
}

impl SplineSpec {
    /// Number of basis functions, `G + k`.
    pub fn num_basis(&self) -> usize {
        self.grid_size + self.order
    }
}

/// `grid_size` Gaussian bumps centred uniformly on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfSpec {
    pub grid_size: usize,
    pub lo: f32,
    pub hi: f32,
}

/// Any basis family with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BasisKind {
    Elementwise(Elementwise),
    BSpline(SplineSpec),
    Rbf(RbfSpec),
}

impl BasisKind {
    pub fn name(&self) -> &'static str {
        match self {
            BasisKind::Elementwise(e) => e.name(),
            BasisKind::BSpline(_) => "bspline",
            BasisKind::Rbf(_) => "rbf",
        }
    }
}

impl From<Elementwise> for BasisKind {
    fn from(e: Elementwise) -> Self {
        BasisKind::Elementwise(e)
    }
}

/// Uniform knot vector for B-splines, extended `order` knots past each end.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineGrid {
    order: usize,
    knots: Vec<f32>,
    // 1 / (p * h) for p = 1..=order, the common denominator at each level.
    inv_span: Vec<f32>,
}

impl SplineGrid {
    pub fn new(spec: &SplineSpec) -> Result<Self> {
        if spec.grid_size < 1 {
            return Err(Error::Config("B-spline grid size must be >= 1".into()));
        }
        if spec.lo.is_nan() || spec.hi.is_nan() || spec.lo >= spec.hi {
            return Err(Error::Config(format!(
                "B-spline range [{}, {}] is empty",
                spec.lo, spec.hi
            )));
        }
        let (g, k) = (spec.grid_size, spec.order);
        let h = (spec.hi - spec.lo) / g as f32;
        let knots = (0..=g + 2 * k)
            .map(|j| spec.lo + (j as f32 - k as f32) * h)
            .collect();
        let inv_span = (1..=k).map(|p| 1.0 / (p as f32 * h)).collect();
        Ok(Self {
            order: k,
            knots,
            inv_span,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f32] {
        &self.knots
    }

    /// `G + k`.
    pub fn len(&self) -> usize {
        self.knots.len() - 1 - self.order
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn eval(&self, x: f32) -> Vec<f32> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: f32, out: &mut [f32]) {
        self.recurse(x, out, None);
    }

    pub fn eval_with_derivative_into(&self, x: f32, values: &mut [f32], derivs: &mut [f32]) {
        self.recurse(x, values, Some(derivs));
    }

    fn recurse(&self, x: f32, values: &mut [f32], derivs: Option<&mut [f32]>) {
        const STACK: usize = 64;
        let t = &self.knots;
        let k = self.order;
        let n0 = t.len() - 1;
        debug_assert_eq!(values.len(), n0 - k);

        let mut stack = [0.0f32; STACK];
        let mut heap;
        let buf: &mut [f32] = if n0 <= STACK {
            &mut stack[..n0]
        } else {
            heap = vec![0.0f32; n0];
            &mut heap
        };

        // Order 0: half-open interval indicators.
        for j in 0..n0 {
            buf[j] = if t[j] <= x && x < t[j + 1] { 1.0 } else { 0.0 };
        }

        let mut derivs = derivs;
        if k == 0 {
            if let Some(d) = derivs.as_deref_mut() {
                d.fill(0.0);
            }
        }
        for p in 1..=k {
            let inv = self.inv_span[p - 1];
            let n = n0 - p;
            if p == k {
                if let Some(d) = derivs.as_deref_mut() {
                    // B'_{j,k} = k (B_{j,k-1} - B_{j+1,k-1}) / (k h) on a uniform grid.
                    let scale = p as f32 * inv;
                    for j in 0..n {
                        d[j] = scale * (buf[j] - buf[j + 1]);
                    }
                }
            }
            for j in 0..n {
                let left = (x - t[j]) * inv;
                let right = (t[j + p + 1] - x) * inv;
                buf[j] = left * buf[j] + right * buf[j + 1];
            }
        }
        values.copy_from_slice(&buf[..n0 - k]);
    }
}

/// Centres and bandwidth of a Gaussian RBF expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfGrid {
    centers: Vec<f32>,
    h: f32,
}

impl RbfGrid {
    pub fn new(spec: &RbfSpec) -> Result<Self> {
        if spec.grid_size < 2 {
            return Err(Error::Config(
                "RBF grid needs at least 2 centres to define a bandwidth".into(),
            ));
        }
        if spec.lo.is_nan() || spec.hi.is_nan() || spec.lo >= spec.hi {
            return Err(Error::Config(format!(
                "RBF range [{}, {}] is empty",
                spec.lo, spec.hi
            )));
        }
        let h = (spec.hi - spec.lo) / (spec.grid_size - 1) as f32;
        let centers = (0..spec.grid_size)
            .map(|i| spec.lo + i as f32 * h)
            .collect();
        Ok(Self { centers, h })
    }

    pub fn centers(&self) -> &[f32] {
        &self.centers
    }

    pub fn bandwidth(&self) -> f32 {
        self.h
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn eval(&self, x: f32) -> Vec<f32> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        out
    }

    #[inline]
    pub fn eval_into(&self, x: f32, out: &mut [f32]) {
        let inv_h = 1.0 / self.h;
        for (o, &c) in out.iter_mut().zip(&self.centers) {
            let z = (x - c) * inv_h;
            *o = (-z * z).exp();
        }
    }

    pub fn eval_with_derivative_into(&self, x: f32, values: &mut [f32], derivs: &mut [f32]) {
        let inv_h = 1.0 / self.h;
        for ((v, d), &c) in values.iter_mut().zip(derivs.iter_mut()).zip(&self.centers) {
            let z = (x - c) * inv_h;
            let e = (-z * z).exp();
            *v = e;
            *d = -2.0 * z * inv_h * e;
        }
    }
}

/// A grid-expanding basis ready for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum GridBasis {
    BSpline(SplineGrid),
    Rbf(RbfGrid),
}

impl GridBasis {
    pub fn from_kind(kind: &BasisKind) -> Result<Self> {
        match kind {
            BasisKind::BSpline(s) => Ok(GridBasis::BSpline(SplineGrid::new(s)?)),
            BasisKind::Rbf(s) => Ok(GridBasis::Rbf(RbfGrid::new(s)?)),
            BasisKind::Elementwise(e) => Err(Error::UnsupportedKind(format!(
                "{e} is element-wise, not grid-expanding"
            ))),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            GridBasis::BSpline(g) => g.len(),
            GridBasis::Rbf(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn eval_into(&self, x: f32, out: &mut [f32]) {
        match self {
            GridBasis::BSpline(g) => g.eval_into(x, out),
            GridBasis::Rbf(g) => g.eval_into(x, out),
        }
    }

    #[inline]
    pub fn eval_with_derivative_into(&self, x: f32, values: &mut [f32], derivs: &mut [f32]) {
        match self {
            GridBasis::BSpline(g) => g.eval_with_derivative_into(x, values, derivs),
            GridBasis::Rbf(g) => g.eval_with_derivative_into(x, values, derivs),
        }
    }
}

/// Value of an element-wise kernel at `x`.
pub fn eval_elementwise(kind: Elementwise, x: f32) -> f32 {
    kind.eval(x)
}

/// All `G + k` B-spline values at `x`. Outside the extended knot span every
/// value is 0.
pub fn bspline_basis(x: f32, spec: &SplineSpec) -> Result<Vec<f32>> {
    Ok(SplineGrid::new(spec)?.eval(x))
}

pub fn rbf_basis(x: f32, spec: &RbfSpec) -> Result<Vec<f32>> {
    Ok(RbfGrid::new(spec)?.eval(x))
}

/// Derivative of a basis at `x`: a scalar for element-wise kernels, one
/// entry per basis function for grid kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum Derivative {
    Scalar(f32),
    Vector(Vec<f32>),
}

pub fn basis_derivative(kind: &BasisKind, x: f32) -> Result<Derivative> {
    match kind {
        BasisKind::Elementwise(e) => e.derivative(x).map(Derivative::Scalar),
        grid => {
            let basis = GridBasis::from_kind(grid)?;
            let mut values = vec![0.0; basis.len()];
            let mut derivs = vec![0.0; basis.len()];
            basis.eval_with_derivative_into(x, &mut values, &mut derivs);
            Ok(Derivative::Vector(derivs))
        }
    }
}
