//! First-order optimizers whose state can follow factor growth.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::matrix::Matrix;
use crate::net::{GradientSet, Layer, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Momentum,
    Adam,
    AdamW,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Algorithm::Sgd),
            "momentum" => Ok(Algorithm::Momentum),
            "adam" => Ok(Algorithm::Adam),
            "adamw" => Ok(Algorithm::AdamW),
            other => param(format!("unknown optimizer '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Linear warmup length in steps; 0 disables it.
    pub warmup_steps: u64,
}

impl Hyper {
    pub fn new(algorithm: Algorithm, lr: f64) -> Self {
        Self {
            algorithm,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            momentum: 0.9,
            warmup_steps: 0,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(Algorithm::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(Algorithm::Adam, lr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return param(format!("learning rate must be > 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return param(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return param("adam epsilon must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return param("weight decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return param("momentum must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    first: Matrix,
    second: Matrix,
}

impl Slot {
    fn zeros_like(p: &Matrix) -> Self {
        Self {
            first: Matrix::zeros(p.rows(), p.cols()),
            second: Matrix::zeros(p.rows(), p.cols()),
        }
    }
}

/// Per-tensor moment buffers plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: Hyper,
    step: u64,
    slots: Vec<Vec<Slot>>,
}

impl OptimizerState {
    pub fn new(hyper: Hyper, model: &Model) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            hyper,
            step: 0,
            slots: model.layers.iter().map(slots_for).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First-moment (momentum) buffers of one layer, in parameter order.
    pub fn first_moments(&self, layer: usize) -> Vec<&Matrix> {
        self.slots[layer].iter().map(|s| &s.first).collect()
    }

    pub fn second_moments(&self, layer: usize) -> Vec<&Matrix> {
        self.slots[layer].iter().map(|s| &s.second).collect()
    }

    /// Applies one update to every trainable tensor of `model`.
    pub fn step(&mut self, model: &mut Model, grads: &GradientSet) -> Result<()> {
        if grads.layers.len() != model.layers.len() || self.slots.len() != model.layers.len() {
            return Err(Error::Usage("gradient/model/optimizer layer counts differ".into()));
        }
        for (idx, (layer, g)) in model.layers.iter().zip(&grads.layers).enumerate() {
            let params = layer.params();
            let tensors = g.tensors();
            if params.len() != tensors.len() || params.len() != self.slots[idx].len() {
                return Err(Error::Usage(format!("layer {idx}: tensor count mismatch")));
            }
            for ((p, t), s) in params.iter().zip(&tensors).zip(&self.slots[idx]) {
                if p.shape() != t.shape() || p.shape() != s.first.shape() {
                    return Err(Error::Shape {
                        op: "optimizer step",
                        lhs: p.shape(),
                        rhs: t.shape(),
                    });
                }
                if !t.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient in layer {idx}")));
                }
            }
        }

        self.step += 1;
        let h = self.hyper;
        let lr = if h.warmup_steps > 0 {
            h.lr * (self.step as f64 / h.warmup_steps as f64).min(1.0)
        } else {
            h.lr
        };
        let t = self.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);

        for (idx, layer) in model.layers.iter_mut().enumerate() {
            let tensors = grads.layers[idx].tensors();
            for ((p, g), slot) in layer
                .params_mut()
                .into_iter()
                .zip(tensors)
                .zip(self.slots[idx].iter_mut())
            {
                let p = p.as_mut_slice();
                let g = g.as_slice();
                match h.algorithm {
                    Algorithm::Sgd => {
                        for (pi, gi) in p.iter_mut().zip(g) {
                            *pi -= lr * gi;
                        }
                    }
                    Algorithm::Momentum => {
                        let m = slot.first.as_mut_slice();
                        for ((pi, gi), mi) in p.iter_mut().zip(g).zip(m) {
                            *mi = h.momentum * *mi + gi;
                            *pi -= lr * *mi;
                        }
                    }
                    Algorithm::Adam | Algorithm::AdamW => {
                        let decay = if h.algorithm == Algorithm::AdamW {
                            h.weight_decay
                        } else {
                            0.0
                        };
                        let m = slot.first.as_mut_slice();
                        let v = slot.second.as_mut_slice();
                        for (((pi, gi), mi), vi) in p.iter_mut().zip(g).zip(m).zip(v) {
                            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
                            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
                            if decay != 0.0 {
                                *pi -= lr * decay * *pi;
                            }
                            let m_hat = *mi / bc1;
                            let v_hat = *vi / bc2;
                            *pi -= lr * m_hat / (v_hat.sqrt() + h.eps);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Widens the `u` (columns) and `v` (rows) buffers of a factorized layer
    /// with zeros. Existing entries and the step counter are untouched.
    pub fn expand_state(&mut self, layer: usize, old_width: usize, new_width: usize) -> Result<()> {
        if new_width <= old_width {
            return Err(Error::Usage(format!(
                "cannot shrink or keep optimizer width ({old_width} -> {new_width})"
            )));
        }
        let slots = self
            .slots
            .get_mut(layer)
            .ok_or_else(|| Error::Parameter(format!("no layer {layer}")))?;
        if slots.len() < 2 || slots[0].first.cols() != old_width || slots[1].first.rows() != old_width
        {
            return Err(Error::Usage(format!(
                "layer {layer} optimizer state is not a width-{old_width} factorization"
            )));
        }
        let extra = new_width - old_width;
        let (rows_u, cols_v) = (slots[0].first.rows(), slots[1].first.cols());
        let Slot { first, second } = &mut slots[0];
        for buf in [first, second] {
            *buf = buf.hstack(&Matrix::zeros(rows_u, extra))?;
        }
        let Slot { first, second } = &mut slots[1];
        for buf in [first, second] {
            *buf = buf.vstack(&Matrix::zeros(extra, cols_v))?;
        }
        Ok(())
    }

    /// Zeroes and reshapes the buffers of one layer to its current tensors.
    pub fn reset_layer(&mut self, layer: usize, model: &Model) -> Result<()> {
        let l = model
            .layers
            .get(layer)
            .ok_or_else(|| Error::Parameter(format!("no layer {layer}")))?;
        self.slots[layer] = slots_for(l);
        Ok(())
    }
}

fn slots_for(layer: &Layer) -> Vec<Slot> {
    layer.params().into_iter().map(Slot::zeros_like).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, DenseLayer, FactorizedLayer, LayerGrad, LossKind};

    fn scalar_model(p: f64) -> Model {
        let w = Matrix::from_rows(&[[p]]).unwrap();
        Model::new(
            vec![Layer::Dense(DenseLayer::new(w, None, Activation::Linear).unwrap())],
            LossKind::Squared,
        )
        .unwrap()
    }

    fn scalar_grad(g: f64) -> GradientSet {
        GradientSet {
            layers: vec![LayerGrad::Dense {
                w: Matrix::from_rows(&[[g]]).unwrap(),
                bias: None,
            }],
        }
    }

    fn weight(m: &Model) -> f64 {
        m.layers[0].params()[0].get(0, 0)
    }

    #[test]
    fn sgd_step() {
        let mut m = scalar_model(1.0);
        let mut opt = OptimizerState::new(Hyper::sgd(0.1), &m).unwrap();
        opt.step(&mut m, &scalar_grad(0.5)).unwrap();
        assert!((weight(&m) - 0.95).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [0.5, -3.0, 1e-3] {
            let mut m = scalar_model(0.0);
            let mut opt = OptimizerState::new(Hyper::adam(0.01), &m).unwrap();
            opt.step(&mut m, &scalar_grad(g)).unwrap();
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((weight(&m) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for alg in [Algorithm::Sgd, Algorithm::Momentum, Algorithm::Adam, Algorithm::AdamW] {
            let mut m = scalar_model(0.7);
            let mut opt = OptimizerState::new(Hyper::new(alg, 0.1), &m).unwrap();
            for _ in 0..3 {
                opt.step(&mut m, &scalar_grad(0.0)).unwrap();
            }
            assert_eq!(weight(&m), 0.7, "{alg:?}");
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut m = scalar_model(0.0);
        let mut opt = OptimizerState::new(Hyper::new(Algorithm::Momentum, 1.0), &m).unwrap();
        opt.step(&mut m, &scalar_grad(1.0)).unwrap();
        opt.step(&mut m, &scalar_grad(1.0)).unwrap();
        // m1 = 1, m2 = 1.9
        assert!((weight(&m) + 2.9).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_decay_equals_adam() {
        let mut a = scalar_model(0.3);
        let mut b = scalar_model(0.3);
        let mut oa = OptimizerState::new(Hyper::adam(0.05), &a).unwrap();
        let mut hb = Hyper::new(Algorithm::AdamW, 0.05);
        hb.weight_decay = 0.0;
        let mut ob = OptimizerState::new(hb, &b).unwrap();
        for k in 0..20 {
            let g = scalar_grad((k as f64 * 0.7).sin());
            oa.step(&mut a, &g).unwrap();
            ob.step(&mut b, &g).unwrap();
        }
        assert_eq!(weight(&a).to_bits(), weight(&b).to_bits());
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let mut m = scalar_model(0.0);
        let mut opt = OptimizerState::new(Hyper::sgd(0.1), &m).unwrap();
        let err = opt.step(&mut m, &scalar_grad(f64::NAN)).unwrap_err();
        assert!(matches!(&err, Error::Numeric(msg) if msg.contains("layer 0")));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn expand_preserves_existing_moments() {
        let w0 = Matrix::zeros(3, 5);
        let mut f = FactorizedLayer::new(w0, 2, 2, None, Activation::Linear).unwrap();
        f.set_factors(
            Matrix::from_fn(3, 4, |i, j| (i + j) as f64 * 0.1),
            Matrix::from_fn(4, 5, |i, j| (i * j) as f64 * 0.1),
            None,
        )
        .unwrap();
        let mut m = Model::new(vec![Layer::Factorized(f)], LossKind::Squared).unwrap();
        let mut opt = OptimizerState::new(Hyper::adam(0.01), &m).unwrap();
        let g = GradientSet {
            layers: vec![LayerGrad::Factorized {
                u: Matrix::from_fn(3, 4, |i, j| 1.0 + (i * 4 + j) as f64),
                v: Matrix::from_fn(4, 5, |i, j| -1.0 + (i + j) as f64 * 0.3),
                bias: None,
            }],
        };
        opt.step(&mut m, &g).unwrap();
        let before_u = opt.first_moments(0)[0].clone();
        let before_v2 = opt.second_moments(0)[1].clone();
        opt.expand_state(0, 4, 6).unwrap();
        let after_u = opt.first_moments(0)[0];
        let after_v2 = opt.second_moments(0)[1];
        assert_eq!(after_u.shape(), (3, 6));
        assert_eq!(after_v2.shape(), (6, 5));
        assert_eq!(&after_u.column_range(0, 4), &before_u);
        assert_eq!(&after_v2.leading_rows(4), &before_v2);
        assert_eq!(after_u.column_range(4, 6).max_abs(), 0.0);
        assert_eq!(opt.step_count(), 1);
        assert!(matches!(opt.expand_state(0, 6, 5), Err(Error::Usage(_))));
    }
}
