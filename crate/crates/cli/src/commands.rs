//! The four subcommands.

use std::path::{Path, PathBuf};

use serde::Serialize;

use inrank_core::data::{
    linear_spectrum, load_csv, make_blobs, make_planted_task, make_teacher_student, CsvSchema,
    Dataset,
};
use inrank_core::glrl::{eckart_young_loss, glrl_train_with, GlrlEvent, SquaredTarget};
use inrank_core::inrank::RankEvent;
use inrank_core::linalg::singular_values;
use inrank_core::net::{build_deep_linear, build_mlp, Activation, LossKind, Model};
use inrank_core::spectrum::SpectrumSnapshot;
use inrank_core::theory::{
    half_rise_time, sample_u0, simulate_discrete_training, simulate_gradient_flow,
    suggested_horizon, verify_trajectory, FlowConfig, FlowResult, ModeSpec, TimeMap,
    TrajectoryReport,
};
use inrank_core::train::{layer_ranks, train, MetricRow, TrainObserver, DENSE_RANK_TOL};
use inrank_core::Rng;

use crate::config::{ExperimentConfig, LayerMode, TaskConfig};
use crate::error::CliError;
use crate::report::{
    metrics_header, metrics_line, schedule_line, spectrum_lines, spectrum_svg, write_json,
    CsvSink, SCHEDULE_HEADER, SPECTRUM_HEADER,
};

/// Where a run writes and what it has produced so far.
pub struct RunContext {
    pub out: PathBuf,
    pub plot: bool,
    pub seed: u64,
    /// Directory against which relative data paths are resolved.
    pub base_dir: PathBuf,
    pub outputs: Vec<String>,
    pub final_ranks: Vec<usize>,
}

impl RunContext {
    fn sink(&mut self, name: &str, header: &str) -> Result<CsvSink, CliError> {
        let sink = CsvSink::create(&self.out.join(name), header)?;
        self.outputs.push(name.to_string());
        Ok(sink)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        write_json(value, &self.out.join(name))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn svg(&mut self, name: &str, snaps: &[&SpectrumSnapshot], title: &str) -> Result<(), CliError> {
        let text = spectrum_svg(snaps, title)?;
        let path = self.out.join(name);
        std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.outputs.push(name.to_string());
        Ok(())
    }
}

pub fn build_task(cfg: &ExperimentConfig, rng: &Rng, base_dir: &Path) -> Result<Dataset, CliError> {
    let task = cfg
        .task
        .as_ref()
        .ok_or_else(|| CliError::Config("task: section is required for this command".into()))?;
    let ds = match task {
        TaskConfig::Planted { nx, ny, spectrum, a, modes } => {
            let values = match (spectrum, a, modes) {
                (Some(s), _, _) => s.clone(),
                (None, Some(a), Some(n)) => linear_spectrum(*a, *n),
                _ => unreachable!("validated"),
            };
            make_planted_task(*nx, *ny, &values, rng)?
        }
        TaskConfig::TeacherStudent { nx, ny, rank, samples, noise } => {
            make_teacher_student(*nx, *ny, *rank, *samples, *noise, rng)?
        }
        TaskConfig::Blobs { classes, dim, per_class, separation, spread } => {
            make_blobs(*classes, *dim, *per_class, *separation, *spread, rng)?
        }
        TaskConfig::Csv { path, classes } => {
            let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
            load_csv(&path, CsvSchema { n_classes: *classes, dim: None })?
        }
    };
    Ok(ds)
}

pub fn build_model(cfg: &ExperimentConfig, data: &Dataset, rng: &Rng) -> Result<Model, CliError> {
    let mut dims = vec![data.input_dim()];
    dims.extend(&cfg.model.widths);
    dims.push(data.output_dim());
    let act = cfg.activation()?;
    let scheme = cfg.init_scheme()?;
    let loss = cfg.loss(data.labels.is_some())?;
    let mut model = if act == Activation::Linear && loss == LossKind::Squared {
        build_deep_linear(&dims, scheme, rng)?
    } else {
        build_mlp(&dims, act, scheme, loss, rng)?
    };
    if cfg.model.layer_mode == LayerMode::Factorized {
        let all: Vec<usize> = (0..model.layers.len()).collect();
        let chosen = cfg.model.factorized_layers.as_ref().unwrap_or(&all);
        for &idx in chosen {
            if idx >= model.layers.len() {
                return Err(CliError::Config(format!(
                    "model.factorized_layers: no layer {idx} in a {}-layer model",
                    model.layers.len()
                )));
            }
            let l = &model.layers[idx];
            let (r0, b) = cfg.inrank.layer_widths(l.out_dim(), l.in_dim());
            model.factorize_layer(idx, r0, b)?;
        }
    }
    Ok(model)
}

struct FileObserver {
    metrics: CsvSink,
    with_accuracy: bool,
    spectrum: Option<CsvSink>,
    schedule: Option<CsvSink>,
    snapshots: Vec<SpectrumSnapshot>,
}

impl FileObserver {
    fn flush(&mut self) -> Result<(), CliError> {
        self.metrics.flush()?;
        if let Some(s) = &mut self.spectrum {
            s.flush()?;
        }
        if let Some(s) = &mut self.schedule {
            s.flush()?;
        }
        Ok(())
    }
}

fn io(e: CliError) -> inrank_core::Error {
    inrank_core::Error::Io(e.to_string())
}

impl TrainObserver for FileObserver {
    fn on_metrics(&mut self, row: &MetricRow) -> inrank_core::Result<()> {
        self.metrics
            .line(&metrics_line(row, self.with_accuracy))
            .map_err(io)
    }

    fn on_spectrum(&mut self, snapshots: &[SpectrumSnapshot]) -> inrank_core::Result<()> {
        if let Some(sink) = &mut self.spectrum {
            for snap in snapshots {
                for line in spectrum_lines(snap) {
                    sink.line(&line).map_err(io)?;
                }
            }
        }
        self.snapshots.extend_from_slice(snapshots);
        Ok(())
    }

    fn on_rank(&mut self, event: &RankEvent) -> inrank_core::Result<()> {
        if let Some(sink) = &mut self.schedule {
            sink.line(&schedule_line(event)).map_err(io)?;
        }
        Ok(())
    }
}

/// `train` and `spectrum-trace`; the latter always records spectra.
pub fn run_training(
    cfg: &ExperimentConfig,
    ctx: &mut RunContext,
    force_spectrum: bool,
) -> Result<(), CliError> {
    let rng = Rng::new(ctx.seed);
    let data = build_task(cfg, &rng.substream_named("task"), &ctx.base_dir)?;
    let mut model = build_model(cfg, &data, &rng.substream_named("model"))?;
    let tc = cfg.train_config(force_spectrum);
    let hyper = cfg.hyper()?;
    let inrank = (cfg.model.layer_mode == LayerMode::Factorized).then_some(&cfg.inrank);
    let with_accuracy = data.labels.is_some();

    let metrics = ctx.sink("metrics.csv", &metrics_header(with_accuracy, model.layers.len()))?;
    let spectrum = if tc.spectrum_every > 0 {
        Some(ctx.sink("spectrum.csv", SPECTRUM_HEADER)?)
    } else {
        None
    };
    let schedule = if inrank.is_some() {
        Some(ctx.sink("rank_schedule.csv", SCHEDULE_HEADER)?)
    } else {
        None
    };
    let mut obs = FileObserver {
        metrics,
        with_accuracy,
        spectrum,
        schedule,
        snapshots: Vec::new(),
    };
    let result = train(
        &mut model,
        &data,
        hyper,
        &tc,
        inrank,
        &rng.substream_named("train"),
        &mut obs,
    );
    obs.flush()?;
    ctx.final_ranks = layer_ranks(&model).unwrap_or_default();
    let report = result?;
    log::info!(
        "trained {} iterations, final loss {}",
        report.iterations,
        report.final_loss
    );
    if ctx.plot && !obs.snapshots.is_empty() {
        for layer in 0..model.layers.len() {
            let snaps: Vec<&SpectrumSnapshot> =
                obs.snapshots.iter().filter(|s| s.layer == layer).collect();
            if !snaps.is_empty() {
                ctx.svg(
                    &format!("spectrum_layer{layer}.svg"),
                    &snaps,
                    &format!("Cumulative update spectrum, layer {layer}"),
                )?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ModeReport {
    index: usize,
    s: f64,
    u0: f64,
    half_rise_time: Option<f64>,
    flow_max_rel_error: Option<f64>,
    sgd_max_rel_error: Option<f64>,
    sgd_half_eta_max_rel_error: Option<f64>,
    compared_points: usize,
}

#[derive(Debug, Serialize)]
struct TheoryReport {
    a: f64,
    modes: Vec<ModeReport>,
    integrator: String,
    flow_dt: f64,
    eta: f64,
    horizon: f64,
    flow_worst: f64,
    sgd_worst: f64,
    sgd_half_eta_worst: f64,
    flow_tolerance: f64,
    sgd_tolerance: f64,
    flow_pass: bool,
    sgd_pass: bool,
    gap_shrinks_with_eta: bool,
}

fn flow_config(
    modes: &[ModeSpec],
    dt: f64,
    horizon: f64,
    samples: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> FlowConfig {
    let n = modes.len();
    let steps = (horizon / dt).ceil() as usize;
    FlowConfig {
        nx: n,
        ny: n,
        nh: n,
        spectrum: modes.iter().map(|m| m.s).collect(),
        u0: modes.iter().map(|m| m.u0).collect(),
        mixing: None,
        dt,
        steps,
        sample_every: (steps / samples).max(1),
        integrator: cfg.theory.integrator,
        seed,
    }
}

/// Planted modes `s_i = a·i` with their initial strengths.
pub fn theory_modes(cfg: &ExperimentConfig, seed: u64) -> Vec<ModeSpec> {
    let t = &cfg.theory;
    let s = linear_spectrum(t.a, t.modes);
    let u0 = match t.u0_fixed {
        Some(u) => vec![u; t.modes],
        None => sample_u0(t.u0_scale, t.modes, &mut Rng::new(seed).substream_named("u0")),
    };
    s.into_iter()
        .zip(u0)
        .map(|(s, u0)| ModeSpec { s, u0, tau: 1.0 })
        .collect()
}

pub fn run_theory(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<(), CliError> {
    let t = &cfg.theory;
    let modes = theory_modes(cfg, ctx.seed);
    let horizon = t.horizon.unwrap_or_else(|| suggested_horizon(&modes));
    let s_max = modes.iter().map(|m| m.s).fold(0.0, f64::max);
    let flow_dt = t.flow_dt.unwrap_or(0.01 / s_max);

    let flow_cfg = flow_config(&modes, flow_dt, horizon, t.samples, cfg, ctx.seed);
    let flow = simulate_gradient_flow(&flow_cfg)?;
    let flow_rep = verify_trajectory(&flow.spectra, 0, &modes, TimeMap { scale: flow_dt })?;

    let sgd_cfg = flow_config(&modes, t.eta, horizon, t.samples, cfg, ctx.seed);
    let sgd = simulate_discrete_training(&sgd_cfg)?;
    write_flow_outputs(ctx, &sgd)?;
    let sgd_rep = verify_trajectory(&sgd.spectra, 0, &modes, TimeMap { scale: t.eta })?;

    let half_cfg = flow_config(&modes, t.eta / 2.0, horizon, t.samples, cfg, ctx.seed);
    let half = simulate_discrete_training(&half_cfg)?;
    let half_rep = verify_trajectory(&half.spectra, 0, &modes, TimeMap { scale: t.eta / 2.0 })?;

    let report = theory_report(cfg, &modes, [&flow_rep, &sgd_rep, &half_rep], flow_dt, horizon);
    ctx.json("report.json", &report)?;
    ctx.final_ranks = vec![modes.len()];
    if ctx.plot {
        let snaps: Vec<&SpectrumSnapshot> = sgd.spectra.snapshots().iter().collect();
        ctx.svg(
            "spectrum.svg",
            &snaps,
            &format!("Singular values of D_t, s_i = {} i", t.a),
        )?;
    }
    Ok(())
}

fn write_flow_outputs(ctx: &mut RunContext, run: &FlowResult) -> Result<(), CliError> {
    let mut metrics = ctx.sink("metrics.csv", &metrics_header(false, 1))?;
    let mut spectrum = ctx.sink("spectrum.csv", SPECTRUM_HEADER)?;
    for (k, snap) in run.spectra.snapshots().iter().enumerate() {
        let top = snap.values.first().copied().unwrap_or(0.0);
        let rank = snap
            .values
            .iter()
            .filter(|&&v| top > 0.0 && v > DENSE_RANK_TOL * top)
            .count();
        let row = MetricRow {
            iteration: snap.iteration,
            loss: run.loss[k],
            accuracy: None,
            ranks: vec![rank],
        };
        metrics.line(&metrics_line(&row, false))?;
        for line in spectrum_lines(snap) {
            spectrum.line(&line)?;
        }
    }
    metrics.flush()?;
    spectrum.flush()
}

fn theory_report(
    cfg: &ExperimentConfig,
    modes: &[ModeSpec],
    [flow, sgd, half]: [&TrajectoryReport; 3],
    flow_dt: f64,
    horizon: f64,
) -> TheoryReport {
    let t = &cfg.theory;
    let modes_out = modes
        .iter()
        .enumerate()
        .map(|(i, m)| ModeReport {
            index: i,
            s: m.s,
            u0: m.u0,
            half_rise_time: half_rise_time(m).ok(),
            flow_max_rel_error: flow.max_rel_error[i],
            sgd_max_rel_error: sgd.max_rel_error[i],
            sgd_half_eta_max_rel_error: half.max_rel_error[i],
            compared_points: sgd.points[i],
        })
        .collect();
    let (fw, sw, hw) = (flow.worst(), sgd.worst(), half.worst());
    TheoryReport {
        a: t.a,
        modes: modes_out,
        integrator: format!("{:?}", t.integrator).to_lowercase(),
        flow_dt,
        eta: t.eta,
        horizon,
        flow_worst: fw,
        sgd_worst: sw,
        sgd_half_eta_worst: hw,
        flow_tolerance: t.flow_tolerance,
        sgd_tolerance: t.sgd_tolerance,
        flow_pass: fw <= t.flow_tolerance,
        sgd_pass: sw <= t.sgd_tolerance,
        gap_shrinks_with_eta: hw < sw,
    }
}

#[derive(Debug, Serialize)]
struct PlateauReport {
    width: usize,
    step: u64,
    loss: f64,
    eckart_young: f64,
    rel_error: Option<f64>,
}

#[derive(Debug, Serialize)]
struct GlrlReport {
    final_width: usize,
    converged: bool,
    saturated: bool,
    steps: u64,
    final_loss: f64,
    plateaus: Vec<PlateauReport>,
}

pub fn run_glrl(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<(), CliError> {
    if !matches!(cfg.task, Some(TaskConfig::Planted { .. })) {
        return Err(CliError::Config(
            "task: glrl-demo needs a task of type \"planted\"".into(),
        ));
    }
    let data = build_task(cfg, &Rng::new(ctx.seed).substream_named("task"), &ctx.base_dir)?;
    let values = data.planted.as_ref().map(|p| p.values.clone()).unwrap_or_default();
    let cost = SquaredTarget::new(data.correlation());

    let mut metrics = ctx.sink("metrics.csv", &metrics_header(false, 1))?;
    let mut spectrum = ctx.sink("spectrum.csv", SPECTRUM_HEADER)?;
    let mut schedule = ctx.sink("rank_schedule.csv", SCHEDULE_HEADER)?;
    let every = cfg.logging.metrics_every;
    let mut last_width = 0usize;
    let mut last_step: Option<u64> = None;
    let mut snapshots: Vec<SpectrumSnapshot> = Vec::new();

    let result = glrl_train_with(&cost, &cfg.glrl, &mut |event| {
        let to_core = |e: CliError| inrank_core::Error::Io(e.to_string());
        match event {
            GlrlEvent::Step { step, width, loss } => {
                if width != last_width {
                    let ev = RankEvent { iteration: step, layer: 0, rank: width, saturated: false };
                    schedule.line(&schedule_line(&ev)).map_err(to_core)?;
                    last_width = width;
                }
                let is_final = last_step == Some(step);
                if step % every == 0 || is_final {
                    let row = MetricRow { iteration: step, loss, accuracy: None, ranks: vec![width] };
                    metrics.line(&metrics_line(&row, false)).map_err(to_core)?;
                }
            }
            GlrlEvent::Plateau { plateau, state } => {
                let snap = SpectrumSnapshot {
                    iteration: plateau.step,
                    layer: 0,
                    values: singular_values(&state.product())?,
                };
                for line in spectrum_lines(&snap) {
                    spectrum.line(&line).map_err(to_core)?;
                }
                snapshots.push(snap);
                last_step = Some(plateau.step);
            }
        }
        Ok(())
    });
    metrics.flush()?;
    spectrum.flush()?;
    schedule.flush()?;
    let out = result?;
    ctx.final_ranks = vec![out.final_width()];

    let plateaus = out
        .plateaus
        .iter()
        .map(|p| {
            let bound = eckart_young_loss(&values, p.width);
            PlateauReport {
                width: p.width,
                step: p.step,
                loss: p.loss,
                eckart_young: bound,
                rel_error: (bound > 0.0).then(|| (p.loss - bound).abs() / bound),
            }
        })
        .collect();
    let report = GlrlReport {
        final_width: out.final_width(),
        converged: out.converged,
        saturated: out.saturated,
        steps: out.width_history.len() as u64,
        final_loss: out.final_loss(),
        plateaus,
    };
    ctx.json("report.json", &report)?;
    if ctx.plot {
        let snaps: Vec<&SpectrumSnapshot> = snapshots.iter().collect();
        ctx.svg("spectrum.svg", &snaps, "Singular values of the product at each plateau")?;
    }
    Ok(())
}
