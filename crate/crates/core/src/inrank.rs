//! Incremental rank growth for factorized layers.
//!
//! Each factorized layer trains `U·V` on top of a frozen base `W0`. The
//! factors start aligned with the top singular directions of the initial
//! gradient; every `check_interval` steps the spectrum of `U·V` is tested
//! with the explained ratio and the active rank grows until the ratio
//! reaches the threshold. The efficient variant stops growing after
//! `fuse_after` steps and folds `W0 + U·V` into a balanced rank-`r*`
//! factorization.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{param, Error, Result};
use crate::linalg::{svd, thin_svd_of_product};
use crate::matrix::Matrix;
use crate::net::{effective_weight_grads, FactorizedLayer, Layer, Model};
use crate::optim::{Hyper, OptimizerState};
use crate::rng::Rng;
use crate::spectrum::{explained_ratio, VariationMeasure};
use crate::train::{train, TrainConfig, TrainObserver, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InRankConfig {
    /// Initial active rank `r0`.
    pub initial_rank: usize,
    /// Buffer width `b`; clamped per layer to `min(out, in) − r0`.
    pub buffer: usize,
    /// Explained-ratio threshold `α`.
    pub threshold: f64,
    /// Initialization scale `ε`.
    pub init_scale: f64,
    /// Steps between rank checks.
    pub check_interval: u64,
    /// Fuse into fixed-rank factors after `fuse_after` steps.
    pub efficient: bool,
    pub fuse_after: u64,
    pub measure: VariationMeasure,
}

impl Default for InRankConfig {
    fn default() -> Self {
        Self {
            initial_rank: 2,
            buffer: 100,
            threshold: 0.9,
            init_scale: 1e-3,
            check_interval: 100,
            efficient: false,
            fuse_after: 0,
            measure: VariationMeasure::SumOfSquares,
        }
    }
}

impl InRankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return param(format!("threshold must be in (0, 1), got {}", self.threshold));
        }
        if self.initial_rank < 1 {
            return param("initial rank must be >= 1");
        }
        if self.buffer < 1 {
            return param("buffer must be >= 1");
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return param(format!("init scale must be > 0, got {}", self.init_scale));
        }
        if self.check_interval < 1 {
            return param("check interval must be >= 1");
        }
        if self.efficient && self.fuse_after < 1 {
            return param("efficient mode needs fuse_after >= 1");
        }
        Ok(())
    }

    /// `(r0, b)` for an `out×in` layer.
    pub fn layer_widths(&self, out: usize, inp: usize) -> (usize, usize) {
        let cap = out.min(inp);
        let r0 = self.initial_rank.min(cap);
        let b = self.buffer.min(cap.saturating_sub(r0)).max(1);
        (r0, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankEvent {
    pub iteration: u64,
    pub layer: usize,
    pub rank: usize,
    /// Growth hit `min(out, in)`.
    pub saturated: bool,
}

/// Per-layer history of active ranks; nondecreasing within a layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankSchedule {
    events: Vec<RankEvent>,
}

impl RankSchedule {
    pub fn record(&mut self, event: RankEvent) -> Result<()> {
        if let Some(prev) = self.events.iter().rev().find(|e| e.layer == event.layer) {
            if event.rank < prev.rank || event.iteration < prev.iteration {
                return Err(Error::Usage(format!(
                    "layer {} rank schedule must be nondecreasing ({} at {} after {} at {})",
                    event.layer, event.rank, event.iteration, prev.rank, prev.iteration
                )));
            }
        }
        self.events.push(event);
        Ok(())
    }

    pub fn events(&self) -> &[RankEvent] {
        &self.events
    }

    pub fn final_rank(&self, layer: usize) -> Option<usize> {
        self.events.iter().rev().find(|e| e.layer == layer).map(|e| e.rank)
    }
}

/// Outcome of [`inrank_init`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InitReport {
    /// Layers whose initial gradient vanished and fell back to Gaussian factors.
    pub fallback_layers: Vec<usize>,
}

/// Sets the factors of every factorized layer from the top `r0 + b`
/// singular directions of `∂L/∂W` at the base weights:
/// `U ← −ε·u_g`, `V ← ε·v_gᵀ`, active rank `r0`.
pub fn inrank_init(
    model: &mut Model,
    x: &Matrix,
    target: &Matrix,
    cfg: &InRankConfig,
    rng: &Rng,
) -> Result<InitReport> {
    cfg.validate()?;
    let indices = model.factorized_indices();
    for &idx in &indices {
        let f = model.layers[idx].as_factorized().expect("factorized");
        if f.u().max_abs() != 0.0 || f.v().max_abs() != 0.0 {
            return Err(Error::Usage(format!(
                "layer {idx} factors must be zero before initialization"
            )));
        }
    }
    let (_, grads) = effective_weight_grads(model, x, target)?;
    let eps = cfg.init_scale;
    let mut report = InitReport::default();
    for &idx in &indices {
        let f = model.layers[idx].as_factorized_mut().expect("factorized");
        let (out, inp) = (f.out_dim(), f.in_dim());
        let (r0, b) = cfg.layer_widths(out, inp);
        let width = r0 + b;
        let g = &grads[idx];
        let (u, v) = if g.max_abs() == 0.0 {
            warn!("layer {idx}: zero gradient at initialization, using gaussian factors");
            report.fallback_layers.push(idx);
            let mut r = rng.substream_named("inrank-init").substream(idx as u64);
            (
                Matrix::from_fn(out, width, |_, _| eps * r.gaussian()),
                Matrix::from_fn(width, inp, |_, _| eps * r.gaussian()),
            )
        } else {
            let k = width.min(out).min(inp);
            let top = svd(g, k)?;
            let mut u = Matrix::zeros(out, width);
            let mut v = Matrix::zeros(width, inp);
            for j in 0..k {
                for i in 0..out {
                    u.set(i, j, -eps * top.u.get(i, j));
                }
                for i in 0..inp {
                    v.set(j, i, eps * top.v.get(i, j));
                }
            }
            (u, v)
        };
        f.set_factors(u, v, Some(r0))?;
    }
    Ok(report)
}

/// Result of one rank check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthOutcome {
    pub old_rank: usize,
    pub new_rank: usize,
    pub ratio: f64,
    pub saturated: bool,
}

/// Smallest `r′ ≥ rank` (up to `cap`) with `g(s, r′, b) ≥ α`.
pub fn required_rank(
    singular_values: &[f64],
    rank: usize,
    buffer: usize,
    cap: usize,
    threshold: f64,
    measure: VariationMeasure,
) -> Result<(usize, f64, bool)> {
    let mut r = rank;
    loop {
        let g = explained_ratio(singular_values, r, buffer, measure)?;
        if g >= threshold {
            return Ok((r, g, false));
        }
        if r >= cap {
            return Ok((cap, g, true));
        }
        r += 1;
    }
}

/// Tests layer `idx` and grows its factors if the explained ratio of `U·V`
/// is below the threshold. New columns of `U` and rows of `V` are drawn
/// from `N(0, (ε/√width)²)`; the optimizer state widens with zeros.
pub fn rank_check_and_grow(
    model: &mut Model,
    idx: usize,
    cfg: &InRankConfig,
    opt: &mut OptimizerState,
    rng: &Rng,
    iteration: u64,
    schedule: &mut RankSchedule,
) -> Result<GrowthOutcome> {
    let f = model
        .layers
        .get_mut(idx)
        .and_then(Layer::as_factorized_mut)
        .ok_or_else(|| Error::Usage(format!("layer {idx} is not factorized")))?;
    let (out, inp) = (f.out_dim(), f.in_dim());
    let cap = out.min(inp);
    let k = f.width().min(cap);
    let s = thin_svd_of_product(f.u(), f.v(), k)?.s;
    let old_rank = f.rank();
    let buffer = f.buffer().max(1);
    let (new_rank, ratio, saturated) =
        required_rank(&s, old_rank, buffer, cap, cfg.threshold, cfg.measure)?;
    if new_rank > old_rank {
        let extra = new_rank - old_rank;
        let old_width = f.width();
        let new_width = old_width + extra;
        let scale = cfg.init_scale / (new_width as f64).sqrt();
        let mut r = rng
            .substream_named("inrank-growth")
            .substream(idx as u64)
            .substream(iteration);
        let u_new = Matrix::from_fn(out, extra, |_, _| scale * r.gaussian());
        let v_new = Matrix::from_fn(extra, inp, |_, _| scale * r.gaussian());
        let u = f.u().hstack(&u_new)?;
        let v = f.v().vstack(&v_new)?;
        f.set_factors(u, v, Some(new_rank))?;
        opt.expand_state(idx, old_width, new_width)?;
        schedule.record(RankEvent {
            iteration,
            layer: idx,
            rank: new_rank,
            saturated,
        })?;
    }
    Ok(GrowthOutcome {
        old_rank,
        new_rank,
        ratio,
        saturated,
    })
}

/// Balanced rank-`r_star` factorization of `W0 + U·V`, without a base.
pub fn fuse_layer(layer: &FactorizedLayer, r_star: usize) -> Result<FactorizedLayer> {
    let cap = layer.out_dim().min(layer.in_dim());
    if r_star < 1 || r_star > cap {
        return param(format!("fusion rank {r_star} outside 1..={cap}"));
    }
    let w = layer.effective_weight();
    let top = svd(&w, r_star)?;
    let root: Vec<f64> = top.s.iter().map(|s| s.sqrt()).collect();
    let u = Matrix::from_fn(w.rows(), r_star, |i, j| top.u.get(i, j) * root[j]);
    let v = Matrix::from_fn(r_star, w.cols(), |i, j| root[i] * top.v.get(j, i));
    FactorizedLayer::without_base(u, v, r_star, layer.bias.clone(), layer.activation)
}

/// Fuses layer `idx` in place and resets its optimizer buffers.
pub fn fuse_to_fixed_rank(
    model: &mut Model,
    idx: usize,
    r_star: usize,
    opt: &mut OptimizerState,
) -> Result<()> {
    let f = model
        .layers
        .get(idx)
        .and_then(Layer::as_factorized)
        .ok_or_else(|| Error::Usage(format!("layer {idx} is not factorized")))?;
    let fused = fuse_layer(f, r_star)?;
    model.layers[idx] = Layer::Factorized(fused);
    opt.reset_layer(idx, model)
}

/// Full InRank (or InRank-Efficient) training run.
///
/// `model` must already contain zero-factor [`FactorizedLayer`]s where
/// growth should happen; they are initialized from the gradient on the whole
/// training set before the first step.
pub fn run_inrank_training(
    model: &mut Model,
    data: &Dataset,
    cfg: &InRankConfig,
    hyper: Hyper,
    train_cfg: &TrainConfig,
    rng: &Rng,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.factorized_indices().is_empty() {
        return Err(Error::Usage("InRank needs at least one factorized layer".into()));
    }
    train(model, data, hyper, train_cfg, Some(cfg), rng, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::InitScheme;
    use crate::net::build_deep_linear;
    use crate::optim::Hyper;

    fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gaussian())
    }

    fn one_layer(out: usize, inp: usize, r: usize, b: usize) -> Model {
        let mut m = build_deep_linear(&[inp, out], InitScheme::Zeros, &Rng::new(0)).unwrap();
        m.factorize_layer(0, r, b).unwrap();
        m
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = InRankConfig::default();
        assert_eq!((c.initial_rank, c.buffer, c.threshold), (2, 100, 0.9));
        assert_eq!(c.layer_widths(64, 32), (2, 30));
        assert!(InRankConfig { threshold: 1.0, ..c }.validate().is_err());
        assert!(InRankConfig { init_scale: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn init_is_descent_aligned() {
        let mut rng = Rng::new(1);
        let cfg = InRankConfig {
            buffer: 3,
            ..InRankConfig::default()
        };
        let mut m = build_deep_linear(&[8, 6], InitScheme::KaimingUniform, &rng).unwrap();
        m.factorize_layer(0, 2, 3).unwrap();
        let x = gaussian(8, 20, &mut rng);
        let t = gaussian(6, 20, &mut rng);
        let (_, g) = effective_weight_grads(&m, &x, &t).unwrap();
        let report = inrank_init(&mut m, &x, &t, &cfg, &rng).unwrap();
        assert!(report.fallback_layers.is_empty());
        let f = m.layers[0].as_factorized().unwrap();
        assert_eq!(f.rank(), 2);
        let uv = f.update_product();
        let eps = cfg.init_scale;
        let s = svd(&g[0], 5).unwrap().s;
        let inner = g[0].dot(&uv);
        let expect = -eps * eps * s.iter().sum::<f64>();
        assert!(inner < 0.0);
        assert!((inner - expect).abs() <= 1e-10 * expect.abs());
        assert!((uv.frobenius_norm() - eps * eps * 5f64.sqrt()).abs() <= 1e-15);
    }

    #[test]
    fn init_falls_back_on_zero_gradient() {
        let mut m = one_layer(4, 4, 1, 1);
        let x = Matrix::zeros(4, 3);
        let t = Matrix::zeros(4, 3);
        let cfg = InRankConfig { initial_rank: 1, buffer: 1, ..Default::default() };
        let report = inrank_init(&mut m, &x, &t, &cfg, &Rng::new(0)).unwrap();
        assert_eq!(report.fallback_layers, vec![0]);
        assert!(m.layers[0].as_factorized().unwrap().u().max_abs() > 0.0);
    }

    fn planted_layer(spectrum: &[f64], out: usize, inp: usize, rank: usize, buffer: usize) -> Model {
        let mut rng = Rng::new(5);
        let qu = crate::linalg::random_orthogonal(out, &mut rng);
        let qv = crate::linalg::random_orthogonal(inp, &mut rng);
        let width = rank + buffer;
        let u = Matrix::from_fn(out, width, |i, j| {
            if j < spectrum.len() { qu.get(i, j) * spectrum[j] } else { 0.0 }
        });
        let v = Matrix::from_fn(width, inp, |i, j| if i < spectrum.len() { qv.get(j, i) } else { 0.0 });
        let mut m = one_layer(out, inp, rank, buffer);
        m.layers[0].as_factorized_mut().unwrap().set_factors(u, v, None).unwrap();
        m
    }

    #[test]
    fn planted_spectrum_grows_to_three() {
        let mut m = planted_layer(&[4.0, 3.0, 2.0, 1.0], 10, 10, 1, 3);
        let mut opt = OptimizerState::new(Hyper::adam(0.01), &m).unwrap();
        let cfg = InRankConfig { threshold: 0.9, buffer: 3, ..Default::default() };
        let mut sched = RankSchedule::default();
        let out = rank_check_and_grow(&mut m, 0, &cfg, &mut opt, &Rng::new(0), 100, &mut sched)
            .unwrap();
        assert_eq!(out.new_rank, 3);
        assert!((out.ratio - (1.0 - 1.0 / 30.0)).abs() < 1e-12);
        let f = m.layers[0].as_factorized().unwrap();
        assert_eq!(f.width(), 3 + 3);
        assert_eq!(opt.first_moments(0)[0].cols(), 6);
        assert_eq!(sched.final_rank(0), Some(3));
    }

    #[test]
    fn satisfied_spectrum_leaves_factors_untouched() {
        let mut m = planted_layer(&[4.0, 0.1], 6, 6, 1, 2);
        let before = m.clone();
        let mut opt = OptimizerState::new(Hyper::sgd(0.01), &m).unwrap();
        let cfg = InRankConfig::default();
        let mut sched = RankSchedule::default();
        let out = rank_check_and_grow(&mut m, 0, &cfg, &mut opt, &Rng::new(0), 1, &mut sched)
            .unwrap();
        assert_eq!(out.new_rank, 1);
        assert_eq!(m, before);
        assert!(sched.events().is_empty());
    }

    #[test]
    fn growth_saturates_at_layer_dims() {
        let mut m = planted_layer(&[1.0, 1.0, 1.0], 3, 3, 1, 2);
        let mut opt = OptimizerState::new(Hyper::sgd(0.01), &m).unwrap();
        let cfg = InRankConfig { threshold: 0.999, ..Default::default() };
        let mut sched = RankSchedule::default();
        let out = rank_check_and_grow(&mut m, 0, &cfg, &mut opt, &Rng::new(0), 1, &mut sched)
            .unwrap();
        assert_eq!(out.new_rank, 3);
    }

    #[test]
    fn fusion_is_lossless_at_full_rank() {
        let mut rng = Rng::new(9);
        let mut f = FactorizedLayer::new(gaussian(5, 4, &mut rng), 2, 1, None,
            crate::net::Activation::Linear).unwrap();
        f.set_factors(gaussian(5, 3, &mut rng), gaussian(3, 4, &mut rng), None).unwrap();
        let fused = fuse_layer(&f, 4).unwrap();
        assert!(fused.w0().is_none());
        let w = f.effective_weight();
        let err = fused.update_product().sub(&w).unwrap().frobenius_norm();
        assert!(err <= 1e-10 * w.frobenius_norm());
        // balanced split: UᵀU = VVᵀ
        let utu = crate::matrix::matmul_tn(fused.u(), fused.u()).unwrap();
        let vvt = crate::matrix::matmul_nt(fused.v(), fused.v()).unwrap();
        assert!(utu.sub(&vvt).unwrap().max_abs() < 1e-10);
        assert!(fuse_layer(&f, 0).is_err());
        assert!(fuse_layer(&f, 5).is_err());
    }

    #[test]
    fn fusion_resets_optimizer() {
        let mut m = planted_layer(&[2.0, 1.0], 5, 5, 1, 2);
        let mut opt = OptimizerState::new(Hyper::adam(0.01), &m).unwrap();
        fuse_to_fixed_rank(&mut m, 0, 2, &mut opt).unwrap();
        let f = m.layers[0].as_factorized().unwrap();
        assert_eq!((f.width(), f.rank(), f.buffer()), (2, 2, 0));
        assert_eq!(opt.first_moments(0)[0].shape(), (5, 2));
        let x = Matrix::identity(5);
        let (y, _) = crate::net::forward(&m, &x).unwrap();
        assert_eq!(y.shape(), (5, 5));
    }
}
