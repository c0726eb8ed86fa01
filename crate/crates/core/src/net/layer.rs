use std::fmt;
use std::str::FromStr;

use crate::error::{param, Error, Result};
use crate::matrix::{matmul, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: &Matrix) -> Matrix {
        match self {
            Activation::Linear => z.clone(),
            Activation::Relu => z.map(|x| if x > 0.0 { x } else { 0.0 }),
            Activation::Tanh => z.map(f64::tanh),
        }
    }

    /// Multiplies `upstream` by the derivative, expressed through the
    /// activation output. ReLU's derivative at 0 is 0.
    pub(crate) fn backprop(self, output: &Matrix, upstream: &Matrix) -> Matrix {
        match self {
            Activation::Linear => upstream.clone(),
            Activation::Relu => Matrix::from_fn(upstream.rows(), upstream.cols(), |i, j| {
                if output.get(i, j) > 0.0 {
                    upstream.get(i, j)
                } else {
                    0.0
                }
            }),
            Activation::Tanh => Matrix::from_fn(upstream.rows(), upstream.cols(), |i, j| {
                let a = output.get(i, j);
                upstream.get(i, j) * (1.0 - a * a)
            }),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "identity" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => param(format!("unknown activation '{other}'")),
        }
    }
}

/// A full weight matrix with a frozen copy of its initial value.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Matrix,
    pub bias: Option<Matrix>,
    pub activation: Activation,
    w0_snapshot: Matrix,
}

impl DenseLayer {
    pub fn new(w: Matrix, bias: Option<Matrix>, activation: Activation) -> Result<Self> {
        if let Some(b) = &bias {
            if b.shape() != (w.rows(), 1) {
                return Err(Error::Shape {
                    op: "dense bias",
                    lhs: w.shape(),
                    rhs: b.shape(),
                });
            }
        }
        Ok(Self {
            w0_snapshot: w.clone(),
            w,
            bias,
            activation,
        })
    }

    pub fn w0_snapshot(&self) -> &Matrix {
        &self.w0_snapshot
    }
}

/// `W = W0 + U·V` with `W0` frozen. `U` is `out×(r+b)`, `V` is `(r+b)×in`.
///
/// After fusion `w0` is `None` and the layer is a plain `U·V` factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedLayer {
    w0: Option<Matrix>,
    u: Matrix,
    v: Matrix,
    rank: usize,
    buffer: usize,
    pub bias: Option<Matrix>,
    pub activation: Activation,
}

impl FactorizedLayer {
    /// Factors start at zero.
    pub fn new(
        w0: Matrix,
        rank: usize,
        buffer: usize,
        bias: Option<Matrix>,
        activation: Activation,
    ) -> Result<Self> {
        let (out, inp) = w0.shape();
        let width = rank + buffer;
        if width == 0 {
            return param("factor width r + b must be at least 1");
        }
        let layer = Self {
            u: Matrix::zeros(out, width),
            v: Matrix::zeros(width, inp),
            w0: Some(w0),
            rank,
            buffer,
            bias,
            activation,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// A factorization without a base matrix.
    pub fn without_base(
        u: Matrix,
        v: Matrix,
        rank: usize,
        bias: Option<Matrix>,
        activation: Activation,
    ) -> Result<Self> {
        if u.cols() != v.rows() {
            return Err(Error::Shape {
                op: "factorized layer",
                lhs: u.shape(),
                rhs: v.shape(),
            });
        }
        let buffer = u.cols().checked_sub(rank).ok_or_else(|| {
            Error::Parameter(format!("rank {rank} exceeds factor width {}", u.cols()))
        })?;
        let layer = Self {
            w0: None,
            u,
            v,
            rank,
            buffer,
            bias,
            activation,
        };
        layer.validate()?;
        Ok(layer)
    }

    fn validate(&self) -> Result<()> {
        let (out, inp) = (self.u.rows(), self.v.cols());
        if self.u.cols() != self.v.rows() || self.u.cols() != self.rank + self.buffer {
            return Err(Error::Shape {
                op: "factorized layer",
                lhs: self.u.shape(),
                rhs: self.v.shape(),
            });
        }
        if let Some(w0) = &self.w0 {
            if w0.shape() != (out, inp) {
                return Err(Error::Shape {
                    op: "factorized base",
                    lhs: w0.shape(),
                    rhs: (out, inp),
                });
            }
        }
        if self.rank > out.min(inp) {
            return param(format!(
                "active rank {} exceeds min({out}, {inp})",
                self.rank
            ));
        }
        if let Some(b) = &self.bias {
            if b.shape() != (out, 1) {
                return Err(Error::Shape {
                    op: "factorized bias",
                    lhs: (out, 1),
                    rhs: b.shape(),
                });
            }
        }
        Ok(())
    }

    pub fn w0(&self) -> Option<&Matrix> {
        self.w0.as_ref()
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn buffer(&self) -> usize {
        self.buffer
    }

    pub fn width(&self) -> usize {
        self.u.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.u.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.v.cols()
    }

    /// Replaces both factors; the width may change, the active rank is kept
    /// unless `rank` is given.
    pub fn set_factors(&mut self, u: Matrix, v: Matrix, rank: Option<usize>) -> Result<()> {
        let rank = rank.unwrap_or(self.rank);
        if u.rows() != self.out_dim() || v.cols() != self.in_dim() || u.cols() != v.rows() {
            return Err(Error::Shape {
                op: "set_factors",
                lhs: u.shape(),
                rhs: v.shape(),
            });
        }
        let buffer = u.cols().checked_sub(rank).ok_or_else(|| {
            Error::Parameter(format!("rank {rank} exceeds factor width {}", u.cols()))
        })?;
        let backup = (
            std::mem::replace(&mut self.u, u),
            std::mem::replace(&mut self.v, v),
            self.rank,
            self.buffer,
        );
        self.rank = rank;
        self.buffer = buffer;
        if let Err(e) = self.validate() {
            (self.u, self.v, self.rank, self.buffer) = backup;
            return Err(e);
        }
        Ok(())
    }

    /// `U·V`.
    pub fn update_product(&self) -> Matrix {
        matmul(&self.u, &self.v).expect("factor shapes agree")
    }

    /// `W0 + U·V`, materialized.
    pub fn effective_weight(&self) -> Matrix {
        let uv = self.update_product();
        match &self.w0 {
            Some(w0) => w0.add(&uv).expect("base and product shapes agree"),
            None => uv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Factorized(FactorizedLayer),
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.w.rows(),
            Layer::Factorized(f) => f.out_dim(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.w.cols(),
            Layer::Factorized(f) => f.in_dim(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Dense(d) => d.activation,
            Layer::Factorized(f) => f.activation,
        }
    }

    pub fn bias(&self) -> Option<&Matrix> {
        match self {
            Layer::Dense(d) => d.bias.as_ref(),
            Layer::Factorized(f) => f.bias.as_ref(),
        }
    }

    pub fn effective_weight(&self) -> Matrix {
        match self {
            Layer::Dense(d) => d.w.clone(),
            Layer::Factorized(f) => f.effective_weight(),
        }
    }

    pub fn as_factorized(&self) -> Option<&FactorizedLayer> {
        match self {
            Layer::Factorized(f) => Some(f),
            Layer::Dense(_) => None,
        }
    }

    pub fn as_factorized_mut(&mut self) -> Option<&mut FactorizedLayer> {
        match self {
            Layer::Factorized(f) => Some(f),
            Layer::Dense(_) => None,
        }
    }

    /// Trainable tensors in a fixed order: `w, bias` or `u, v, bias`.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(3);
        match self {
            Layer::Dense(d) => {
                out.push(&d.w);
                out.extend(d.bias.as_ref());
            }
            Layer::Factorized(f) => {
                out.push(&f.u);
                out.push(&f.v);
                out.extend(f.bias.as_ref());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(3);
        match self {
            Layer::Dense(d) => {
                out.push(&mut d.w);
                out.extend(d.bias.as_mut());
            }
            Layer::Factorized(f) => {
                out.push(&mut f.u);
                out.push(&mut f.v);
                out.extend(f.bias.as_mut());
            }
        }
        out
    }

    /// Shape signature used to detect stale forward caches.
    pub(crate) fn signature(&self) -> (usize, usize, usize) {
        match self {
            Layer::Dense(d) => (d.w.rows(), d.w.cols(), 0),
            Layer::Factorized(f) => (f.out_dim(), f.in_dim(), f.width()),
        }
    }
}
