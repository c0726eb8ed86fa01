//! Cumulative weight updates, the explained ratio, and spectrum histories.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::linalg::{singular_values, thin_svd_of_product};
use crate::matrix::Matrix;
use crate::net::{Layer, Model};

/// `D_t = W_t − W_0`: `w − w0_snapshot` for dense layers, `U·V` for
/// factorized ones.
pub fn cumulative_update(layer: &Layer) -> Matrix {
    match layer {
        Layer::Dense(d) => d.w.sub(d.w0_snapshot()).expect("snapshot shape is fixed"),
        Layer::Factorized(f) => f.update_product(),
    }
}

/// Singular values of [`cumulative_update`], descending. Factorized layers
/// go through the thin product SVD and never form `U·V`.
pub fn update_spectrum(layer: &Layer) -> Result<Vec<f64>> {
    match layer {
        Layer::Dense(_) => singular_values(&cumulative_update(layer)),
        Layer::Factorized(f) => {
            let k = f.width().min(f.out_dim()).min(f.in_dim());
            Ok(thin_svd_of_product(f.u(), f.v(), k)?.s)
        }
    }
}

/// Variation measure applied to singular-value windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariationMeasure {
    /// `Σ sᵢ²`, the spectral energy.
    #[default]
    SumOfSquares,
    /// Unbiased sample variance of the listed values.
    SampleVariance,
}

impl FromStr for VariationMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum-of-squares" => Ok(VariationMeasure::SumOfSquares),
            "sample-variance" => Ok(VariationMeasure::SampleVariance),
            other => param(format!("unknown variation measure '{other}'")),
        }
    }
}

impl VariationMeasure {
    fn of(self, values: &[f64]) -> f64 {
        match self {
            VariationMeasure::SumOfSquares => values.iter().map(|x| x * x).sum(),
            VariationMeasure::SampleVariance => {
                let n = values.len();
                if n < 2 {
                    return 0.0;
                }
                let mean = values.iter().sum::<f64>() / n as f64;
                values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            }
        }
    }
}

/// `g = 1 − V(s_{r+1..r+b}) / V(s_{1..r+b})`, with the window zero-padded
/// past the end of `singular_values`. Returns 1 when the window carries no
/// variation.
pub fn explained_ratio(
    singular_values: &[f64],
    rank: usize,
    buffer: usize,
    measure: VariationMeasure,
) -> Result<f64> {
    if buffer < 1 {
        return param("explained ratio needs a buffer of at least 1");
    }
    if let Some(bad) = singular_values.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return param(format!("singular values must be finite and >= 0, got {bad}"));
    }
    let window: Vec<f64> = (0..rank + buffer)
        .map(|i| singular_values.get(i).copied().unwrap_or(0.0))
        .collect();
    let total = measure.of(&window);
    if total == 0.0 {
        return Ok(1.0);
    }
    let tail = measure.of(&window[rank..]);
    Ok((1.0 - tail / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSnapshot {
    pub iteration: u64,
    pub layer: usize,
    pub values: Vec<f64>,
}

/// Snapshots in recording order; iterations strictly increase per layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectrumTrace {
    snapshots: Vec<SpectrumSnapshot>,
}

impl SpectrumTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, snap: SpectrumSnapshot) -> Result<()> {
        if let Some(prev) = self.snapshots.iter().rev().find(|s| s.layer == snap.layer) {
            if snap.iteration <= prev.iteration {
                return Err(Error::Usage(format!(
                    "layer {} snapshot at iteration {} does not follow {}",
                    snap.layer, snap.iteration, prev.iteration
                )));
            }
        }
        if snap.values.windows(2).any(|w| w[0] < w[1]) || snap.values.iter().any(|&v| v < 0.0) {
            return param("snapshot values must be nonincreasing and nonnegative");
        }
        self.snapshots.push(snap);
        Ok(())
    }

    pub fn snapshots(&self) -> &[SpectrumSnapshot] {
        &self.snapshots
    }

    pub fn for_layer(&self, layer: usize) -> impl Iterator<Item = &SpectrumSnapshot> {
        self.snapshots.iter().filter(move |s| s.layer == layer)
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut ls: Vec<usize> = self.snapshots.iter().map(|s| s.layer).collect();
        ls.sort_unstable();
        ls.dedup();
        ls
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }
}

/// Appends the update spectrum of every layer of `model` at `iteration`.
pub fn snapshot_spectrum(model: &Model, iteration: u64, trace: &mut SpectrumTrace) -> Result<()> {
    for (idx, layer) in model.layers.iter().enumerate() {
        if layer.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite weights in layer {idx} at iteration {iteration}"
            )));
        }
        let values = update_spectrum(layer)?;
        trace.push(SpectrumSnapshot {
            iteration,
            layer: idx,
            values,
        })?;
    }
    Ok(())
}
