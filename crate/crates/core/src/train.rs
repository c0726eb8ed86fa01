//! Mini-batch training loop shared by dense baselines and InRank runs.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{param, Error, Result};
use crate::inrank::{
    fuse_to_fixed_rank, inrank_init, rank_check_and_grow, InRankConfig, InitReport, RankEvent,
    RankSchedule,
};
use crate::linalg::numerical_rank;
use crate::net::{accuracy, forward, loss, loss_and_grad, Layer, Model};
use crate::optim::{Hyper, OptimizerState};
use crate::rng::Rng;
use crate::spectrum::{cumulative_update, snapshot_spectrum, SpectrumSnapshot, SpectrumTrace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    /// Evaluate on the full training set every this many steps.
    pub metrics_every: u64,
    /// Record update spectra every this many steps; 0 disables.
    pub spectrum_every: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 0,
            metrics_every: 1,
            spectrum_every: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return param("epochs must be >= 1");
        }
        if self.metrics_every < 1 {
            return param("metrics_every must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: u64,
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// Active rank of factorized layers; for dense layers the numerical
    /// rank of `W − W0` at [`DENSE_RANK_TOL`].
    pub ranks: Vec<usize>,
}

/// Receives results as they are produced so a failing run still leaves
/// everything up to the failure on disk.
pub trait TrainObserver {
    fn on_metrics(&mut self, _row: &MetricRow) -> Result<()> {
        Ok(())
    }
    fn on_spectrum(&mut self, _snapshots: &[SpectrumSnapshot]) -> Result<()> {
        Ok(())
    }
    fn on_rank(&mut self, _event: &RankEvent) -> Result<()> {
        Ok(())
    }
}

/// Observer that drops everything.
pub struct NullObserver;

impl TrainObserver for NullObserver {}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<MetricRow>,
    pub spectra: SpectrumTrace,
    pub schedule: RankSchedule,
    pub iterations: u64,
    pub final_loss: f64,
    pub fused_at: Option<u64>,
    pub init: Option<InitReport>,
}

/// Relative singular-value cutoff used to report dense-layer ranks.
pub const DENSE_RANK_TOL: f64 = 1e-3;

pub fn layer_ranks(model: &Model) -> Result<Vec<usize>> {
    model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Factorized(f) => Ok(f.rank()),
            Layer::Dense(_) => numerical_rank(&cumulative_update(l), DENSE_RANK_TOL),
        })
        .collect()
}

/// Loss (and accuracy for labelled data) on the whole dataset.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, Option<f64>)> {
    let (y, _) = forward(model, &data.x)?;
    let (value, _) = loss(model.loss, &y, &data.y)?;
    let acc = data.labels.as_ref().map(|_| accuracy(&y, &data.y));
    Ok((value, acc))
}

fn record_metrics(
    model: &Model,
    data: &Dataset,
    iteration: u64,
    report: &mut TrainReport,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    let (value, acc) = evaluate(model, data)?;
    report.final_loss = value;
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at iteration {iteration}"
        )));
    }
    let row = MetricRow {
        iteration,
        loss: value,
        accuracy: acc,
        ranks: layer_ranks(model)?,
    };
    observer.on_metrics(&row)?;
    report.metrics.push(row);
    Ok(())
}

fn record_spectrum(
    model: &Model,
    iteration: u64,
    report: &mut TrainReport,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    let start = report.spectra.len();
    snapshot_spectrum(model, iteration, &mut report.spectra)?;
    observer.on_spectrum(&report.spectra.snapshots()[start..])
}

fn record_rank(
    event: RankEvent,
    report: &mut TrainReport,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    report.schedule.record(event)?;
    observer.on_rank(&event)
}

/// Trains `model` on `data`. With `inrank` set, factorized layers are
/// initialized from the gradient, checked every `check_interval` steps and,
/// in efficient mode, fused at `fuse_after`.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    hyper: Hyper,
    cfg: &TrainConfig,
    inrank: Option<&InRankConfig>,
    rng: &Rng,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    cfg.validate()?;
    hyper.validate()?;
    if data.is_empty() {
        return param("training data is empty");
    }
    let mut report = TrainReport::default();
    if let Some(ic) = inrank {
        report.init = Some(inrank_init(model, &data.x, &data.y, ic, rng)?);
        for idx in model.factorized_indices() {
            let f = model.layers[idx].as_factorized().expect("factorized");
            record_rank(
                RankEvent {
                    iteration: 0,
                    layer: idx,
                    rank: f.rank(),
                    saturated: false,
                },
                &mut report,
                observer,
            )?;
        }
    }
    let mut opt = OptimizerState::new(hyper, model)?;
    let n = data.len();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let growth_rng = rng.substream_named("growth");
    let shuffle_rng = rng.substream_named("shuffle");

    record_metrics(model, data, 0, &mut report, observer)?;
    if cfg.spectrum_every > 0 {
        record_spectrum(model, 0, &mut report, observer)?;
    }

    let mut it: u64 = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            let mut r = shuffle_rng.substream(epoch as u64);
            order = (0..n).collect();
            r.shuffle(&mut order);
        }
        for chunk in order.chunks(batch) {
            let (bx, by) = data.batch(chunk);
            let (_, grads) = match loss_and_grad(model, &bx, &by) {
                Ok(v) => v,
                Err(e) => {
                    report.iterations = it;
                    return Err(e);
                }
            };
            opt.step(model, &grads)?;
            it += 1;

            if let Some(ic) = inrank {
                let growing = !ic.efficient || it <= ic.fuse_after;
                if growing && it % ic.check_interval == 0 {
                    for idx in model.factorized_indices() {
                        let before = report.schedule.events().len();
                        rank_check_and_grow(
                            model,
                            idx,
                            ic,
                            &mut opt,
                            &growth_rng,
                            it,
                            &mut report.schedule,
                        )?;
                        for ev in &report.schedule.events()[before..] {
                            observer.on_rank(ev)?;
                        }
                    }
                }
                if ic.efficient && it == ic.fuse_after {
                    for idx in model.factorized_indices() {
                        let r = model.layers[idx].as_factorized().expect("factorized").rank();
                        fuse_to_fixed_rank(model, idx, r, &mut opt)?;
                    }
                    report.fused_at = Some(it);
                }
            }

            if it % cfg.metrics_every == 0 {
                record_metrics(model, data, it, &mut report, observer)?;
            }
            if cfg.spectrum_every > 0 && it % cfg.spectrum_every == 0 {
                record_spectrum(model, it, &mut report, observer)?;
            }
        }
    }
    report.iterations = it;
    if it % cfg.metrics_every != 0 {
        record_metrics(model, data, it, &mut report, observer)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, make_teacher_student};
    use crate::init::InitScheme;
    use crate::net::{build_deep_linear, build_mlp, Activation, LossKind};

    #[test]
    fn dense_regression_decreases_loss() {
        let rng = Rng::new(3);
        let data = make_teacher_student(8, 6, 2, 64, 0.0, &rng).unwrap();
        let mut m = build_deep_linear(&[8, 6], InitScheme::Zeros, &rng).unwrap();
        let cfg = TrainConfig { epochs: 50, batch_size: 16, ..Default::default() };
        let rep = train(&mut m, &data, Hyper::sgd(0.02), &cfg, None, &rng, &mut NullObserver)
            .unwrap();
        assert!(rep.final_loss < 0.1 * rep.metrics[0].loss);
        assert_eq!(rep.iterations, 200);
        assert_eq!(rep.metrics.last().unwrap().iteration, 200);
    }

    #[test]
    fn training_is_deterministic() {
        let rng = Rng::new(11);
        let data = make_blobs(3, 4, 20, 4.0, 0.5, &rng).unwrap();
        let run = || {
            let mut m =
                build_mlp(&[4, 8, 3], Activation::Relu, InitScheme::KaimingUniform,
                    LossKind::CrossEntropy, &rng).unwrap();
            let cfg = TrainConfig { epochs: 3, batch_size: 10, ..Default::default() };
            train(&mut m, &data, Hyper::adam(0.01), &cfg, None, &rng, &mut NullObserver)
                .unwrap()
                .metrics
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn efficient_mode_freezes_rank_after_fusion() {
        let rng = Rng::new(4);
        let data = make_teacher_student(12, 12, 3, 96, 0.01, &rng).unwrap();
        let mut m = build_deep_linear(&[12, 12], InitScheme::Zeros, &rng).unwrap();
        m.factorize_layer(0, 1, 2).unwrap();
        let ic = InRankConfig {
            initial_rank: 1,
            buffer: 2,
            check_interval: 5,
            efficient: true,
            fuse_after: 40,
            ..Default::default()
        };
        let cfg = TrainConfig { epochs: 20, batch_size: 32, ..Default::default() };
        let rep = train(&mut m, &data, Hyper::adam(0.01), &cfg, Some(&ic), &rng,
            &mut NullObserver).unwrap();
        assert_eq!(rep.fused_at, Some(40));
        let after: Vec<usize> = rep
            .metrics
            .iter()
            .filter(|r| r.iteration >= 40)
            .map(|r| r.ranks[0])
            .collect();
        assert!(after.windows(2).all(|w| w[0] == w[1]));
        let f = m.layers[0].as_factorized().unwrap();
        assert!(f.w0().is_none());
        assert_eq!(f.buffer(), 0);
    }

    #[test]
    fn spectra_recorded_on_schedule() {
        let rng = Rng::new(2);
        let data = make_teacher_student(5, 4, 2, 20, 0.0, &rng).unwrap();
        let mut m = build_deep_linear(&[5, 4], InitScheme::Zeros, &rng).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 0,
            spectrum_every: 5,
            ..Default::default()
        };
        let rep = train(&mut m, &data, Hyper::sgd(0.01), &cfg, None, &rng, &mut NullObserver)
            .unwrap();
        let iters: Vec<u64> = rep.spectra.snapshots().iter().map(|s| s.iteration).collect();
        assert_eq!(iters, vec![0, 5, 10]);
    }

    #[test]
    fn divergence_reports_numeric_error() {
        let rng = Rng::new(2);
        let data = make_teacher_student(5, 4, 2, 20, 0.0, &rng).unwrap();
        let mut m = build_deep_linear(&[5, 5, 4], InitScheme::KaimingUniform, &rng).unwrap();
        let cfg = TrainConfig { epochs: 500, ..Default::default() };
        let mut rows = Vec::new();
        struct Keep<'a>(&'a mut Vec<MetricRow>);
        impl TrainObserver for Keep<'_> {
            fn on_metrics(&mut self, row: &MetricRow) -> Result<()> {
                self.0.push(row.clone());
                Ok(())
            }
        }
        let err = train(&mut m, &data, Hyper::sgd(5.0), &cfg, None, &rng, &mut Keep(&mut rows))
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err:?}");
        assert!(!rows.is_empty());
    }
}
