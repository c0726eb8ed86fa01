//! Deterministic weight initializers.

use std::fmt;
use std::str::FromStr;

use crate::error::{param, Error, Result};
use crate::linalg::qr;
use crate::matrix::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Uniform in `±√(6 / fan_in)`.
    KaimingUniform,
    /// Orthonormal rows or columns, whichever dimension is smaller.
    Orthogonal,
    Zeros,
    /// `N(0, σ²)` entries.
    Gaussian(f64),
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitScheme::KaimingUniform => write!(f, "kaiming-uniform"),
            InitScheme::Orthogonal => write!(f, "orthogonal"),
            InitScheme::Zeros => write!(f, "zeros"),
            InitScheme::Gaussian(s) => write!(f, "gaussian({s})"),
        }
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    /// Accepts `kaiming-uniform`, `orthogonal`, `zeros`, `gaussian(σ)` or
    /// `gaussian:σ`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "kaiming-uniform" | "kaiming" => return Ok(InitScheme::KaimingUniform),
            "orthogonal" => return Ok(InitScheme::Orthogonal),
            "zeros" => return Ok(InitScheme::Zeros),
            _ => {}
        }
        let sigma = s
            .strip_prefix("gaussian(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("gaussian:"));
        match sigma.map(|v| v.trim().parse::<f64>()) {
            Some(Ok(sigma)) => InitScheme::Gaussian(sigma).validated(),
            Some(Err(_)) => param(format!("bad gaussian scale in init scheme '{s}'")),
            None => param(format!("unknown init scheme '{s}'")),
        }
    }
}

impl InitScheme {
    pub fn validated(self) -> Result<Self> {
        if let InitScheme::Gaussian(sigma) = self {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return param(format!("gaussian scale must be finite and >= 0, got {sigma}"));
            }
        }
        Ok(self)
    }
}

/// A `rows×cols` weight matrix (`cols` is the fan-in).
pub fn init_weights(rows: usize, cols: usize, scheme: InitScheme, rng: &mut Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return param(format!("weight shape must be positive, got {rows}x{cols}"));
    }
    let scheme = scheme.validated()?;
    Ok(match scheme {
        InitScheme::Zeros => Matrix::zeros(rows, cols),
        InitScheme::KaimingUniform => {
            let bound = (6.0 / cols as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
        }
        InitScheme::Gaussian(sigma) => Matrix::from_fn(rows, cols, |_, _| sigma * rng.gaussian()),
        InitScheme::Orthogonal => {
            if rows >= cols {
                let g = Matrix::from_fn(rows, cols, |_, _| rng.gaussian());
                qr(&g).0
            } else {
                let g = Matrix::from_fn(cols, rows, |_, _| rng.gaussian());
                qr(&g).0.transpose()
            }
        }
    })
}
