//! Mode dynamics of a two-factor linear network with orthogonal inputs.
//!
//! Under the structured initialization `W²₀ = U M Oᵀ`, `W¹₀ = O M Vᵀ` with
//! `M = diag(√u₀)`, every singular mode of `Σ^{yx}` evolves on its own along
//! `du/dt = 2u(s − u)/τ`. This module provides the closed form, an RK4
//! integrator for the scalar equation, matrix-level simulators (continuous
//! flow and discrete SGD) and a comparison of recorded spectra with theory.

use serde::{Deserialize, Serialize};

use crate::data::{make_planted_task, Dataset};
use crate::error::{param, Error, Result};
use crate::linalg::singular_values;
use crate::matrix::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::net::{collapse_product, loss_and_grad, Activation, DenseLayer, Layer, LossKind, Model};
use crate::optim::{Hyper, OptimizerState};
use crate::rng::Rng;
use crate::spectrum::{SpectrumSnapshot, SpectrumTrace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    /// Target singular value.
    pub s: f64,
    /// Initial mode strength.
    pub u0: f64,
    pub tau: f64,
}

impl ModeSpec {
    pub fn new(s: f64, u0: f64, tau: f64) -> Result<Self> {
        let m = Self { s, u0, tau };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !(ok(self.s) && ok(self.u0) && ok(self.tau)) {
            return param(format!(
                "mode needs s, u0, tau > 0 (got s={}, u0={}, tau={})",
                self.s, self.u0, self.tau
            ));
        }
        Ok(())
    }
}

/// Learned part `u(t) − u₀` of a mode, evaluated in logistic form so large
/// `2st/τ` cannot overflow.
pub fn closed_form_mode(t: f64, mode: &ModeSpec) -> Result<f64> {
    mode.validate()?;
    if !(t >= 0.0) {
        return param(format!("time must be >= 0, got {t}"));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let ModeSpec { s, u0, tau } = *mode;
    let decay = (-2.0 * s * t / tau).exp();
    Ok(s / (1.0 + (s / u0 - 1.0) * decay) - u0)
}

/// Time at which `u = s/2`. Needs `u₀ < s`; negative when `u₀ > s/2`.
pub fn half_rise_time(mode: &ModeSpec) -> Result<f64> {
    mode.validate()?;
    if mode.u0 >= mode.s {
        return param(format!(
            "mode with u0={} >= s={} never rises",
            mode.u0, mode.s
        ));
    }
    Ok(mode.tau / (2.0 * mode.s) * ((mode.s - mode.u0) / mode.u0).ln())
}

/// RK4 integration of `du/dt = 2u(s − u)/τ`; returns `u(t_n) − u₀` for
/// `n = 0..=steps`.
pub fn ode_mode(mode: &ModeSpec, dt: f64, steps: usize) -> Result<Vec<f64>> {
    mode.validate()?;
    if !(dt > 0.0) || dt > 0.01 / mode.s {
        return param(format!(
            "dt must be in (0, 0.01/s = {}], got {dt}",
            0.01 / mode.s
        ));
    }
    let ModeSpec { s, u0, tau } = *mode;
    let f = |u: f64| 2.0 * u * (s - u) / tau;
    let mut out = Vec::with_capacity(steps + 1);
    let mut u = u0;
    out.push(0.0);
    for n in 0..steps {
        let k1 = f(u);
        let k2 = f(u + 0.5 * dt * k1);
        let k3 = f(u + 0.5 * dt * k2);
        let k4 = f(u + dt * k3);
        u += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !(0.0..=2.0 * s).contains(&u) {
            return Err(Error::Numeric(format!(
                "mode left [0, 2s] at step {} (dt={dt})",
                n + 1
            )));
        }
        out.push(u - u0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub nx: usize,
    pub ny: usize,
    pub nh: usize,
    /// Planted singular values, padded with zeros to `nh` modes.
    pub spectrum: Vec<f64>,
    /// Initial strength of each of the `nh` hidden modes.
    pub u0: Vec<f64>,
    /// `nh×nh` orthogonal mixing; identity when `None`.
    pub mixing: Option<Matrix>,
    pub dt: f64,
    pub steps: usize,
    /// Record a snapshot every this many steps (step 0 is always recorded).
    pub sample_every: usize,
    pub integrator: Integrator,
    pub seed: u64,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nh == 0 {
            return param("flow widths must be positive");
        }
        if self.nh > self.nx.min(self.ny) {
            return param(format!(
                "hidden width {} exceeds min(N_x, N_y) = {}",
                self.nh,
                self.nx.min(self.ny)
            ));
        }
        if self.spectrum.len() > self.nh {
            return param(format!(
                "{} planted values but only {} hidden modes",
                self.spectrum.len(),
                self.nh
            ));
        }
        if self.u0.len() != self.nh || self.u0.iter().any(|&u| !(u > 0.0 && u.is_finite())) {
            return param("u0 needs one positive value per hidden mode");
        }
        if let Some(o) = &self.mixing {
            if o.shape() != (self.nh, self.nh) {
                return Err(Error::Shape {
                    op: "flow mixing",
                    lhs: o.shape(),
                    rhs: (self.nh, self.nh),
                });
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return param(format!("dt must be > 0, got {}", self.dt));
        }
        if self.sample_every == 0 {
            return param("sample_every must be >= 1");
        }
        Ok(())
    }

    pub fn modes(&self) -> Vec<ModeSpec> {
        self.spectrum
            .iter()
            .zip(&self.u0)
            .map(|(&s, &u0)| ModeSpec { s, u0, tau: 1.0 })
            .collect()
    }

    fn task(&self) -> Result<Dataset> {
        make_planted_task(self.nx, self.ny, &self.spectrum, &Rng::new(self.seed))
    }

    /// `(W¹₀, W²₀)` for the planted basis of `task`.
    fn structured_init(&self, task: &Dataset) -> (Matrix, Matrix) {
        let planted = task.planted.as_ref().expect("planted task");
        let root: Vec<f64> = self.u0.iter().map(|u| u.sqrt()).collect();
        let m1 = Matrix::diag(self.nh, self.nx, &root);
        let m2 = Matrix::diag(self.ny, self.nh, &root);
        let o = self
            .mixing
            .clone()
            .unwrap_or_else(|| Matrix::identity(self.nh));
        let w1 = matmul_nt(&matmul(&o, &m1).expect("shapes"), &planted.v).expect("shapes");
        let w2 = matmul_nt(&matmul(&planted.u, &m2).expect("shapes"), &o).expect("shapes");
        (w1, w2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    /// Continuous time of each sample.
    pub times: Vec<f64>,
    /// `diag(Uᵀ D_t V)` per sample, one entry per planted mode.
    pub mode_strengths: Vec<Vec<f64>>,
    /// Singular values of `D_t` (layer 0, iteration = step index).
    pub spectra: SpectrumTrace,
    /// `‖W¹W¹ᵀ − W²ᵀW²‖_F` per sample.
    pub balance: Vec<f64>,
    /// `½‖Σ^{yx} − W²W¹‖_F²` per sample.
    pub loss: Vec<f64>,
}

impl FlowResult {
    /// Interpolated time at which mode `i`'s learned strength first reaches
    /// `s_i/2 − u0_i`; `None` if it never does within the run.
    pub fn half_rise_times(&self, modes: &[ModeSpec]) -> Vec<Option<f64>> {
        modes
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let level = m.s / 2.0 - m.u0;
                let series: Vec<f64> = self.mode_strengths.iter().map(|row| row[i]).collect();
                let k = series.iter().position(|&v| v >= level)?;
                if k == 0 {
                    return Some(self.times[0]);
                }
                let (a, b) = (series[k - 1], series[k]);
                let frac = (level - a) / (b - a);
                Some(self.times[k - 1] + frac * (self.times[k] - self.times[k - 1]))
            })
            .collect()
    }
}

struct Recorder {
    sigma: Matrix,
    planted_u: Matrix,
    planted_v: Matrix,
    n_modes: usize,
    a0: Matrix,
    out: FlowResult,
}

impl Recorder {
    fn new(task: &Dataset, n_modes: usize, a0: Matrix) -> Self {
        let planted = task.planted.as_ref().expect("planted task");
        Self {
            sigma: task.correlation(),
            planted_u: planted.u.clone(),
            planted_v: planted.v.clone(),
            n_modes,
            a0,
            out: FlowResult {
                times: Vec::new(),
                mode_strengths: Vec::new(),
                spectra: SpectrumTrace::new(),
                balance: Vec::new(),
                loss: Vec::new(),
            },
        }
    }

    fn record(&mut self, step: usize, t: f64, w1: &Matrix, w2: &Matrix) -> Result<()> {
        let a = matmul(w2, w1)?;
        let r = self.sigma.sub(&a)?;
        let d = a.sub(&self.a0)?;
        let proj = matmul(&matmul_tn(&self.planted_u, &d)?, &self.planted_v)?;
        let strengths = (0..self.n_modes).map(|i| proj.get(i, i)).collect();
        let values = singular_values(&d)?;
        self.out.spectra.push(SpectrumSnapshot {
            iteration: step as u64,
            layer: 0,
            values,
        })?;
        let bal = matmul_nt(w1, w1)?.sub(&matmul_tn(w2, w2)?)?.frobenius_norm();
        self.out.times.push(t);
        self.out.mode_strengths.push(strengths);
        self.out.balance.push(bal);
        self.out.loss.push(0.5 * r.dot(&r));
        Ok(())
    }
}

/// Vector field `(Ẇ¹, Ẇ²)` of the gradient flow with `Σ^{xx} = I`.
fn flow_field(sigma: &Matrix, w1: &Matrix, w2: &Matrix) -> Result<(Matrix, Matrix)> {
    let r = sigma.sub(&matmul(w2, w1)?)?;
    Ok((matmul_tn(w2, &r)?, matmul_nt(&r, w1)?))
}

fn combine(base: &Matrix, c: f64, d: &Matrix) -> Matrix {
    let mut out = base.clone();
    out.axpy(c, d).expect("same shape");
    out
}

/// Integrates `Ẇ¹ = W²ᵀ(Σ^{yx} − W²W¹)`, `Ẇ² = (Σ^{yx} − W²W¹)W¹ᵀ` from the
/// structured initialization and records `D_t = W²W¹ − W²₀W¹₀`.
pub fn simulate_gradient_flow(cfg: &FlowConfig) -> Result<FlowResult> {
    cfg.validate()?;
    let task = cfg.task()?;
    let sigma = task.correlation();
    let (mut w1, mut w2) = cfg.structured_init(&task);
    let a0 = matmul(&w2, &w1)?;
    let limit = 1e3 * (1.0 + sigma.frobenius_norm());
    let mut rec = Recorder::new(&task, cfg.spectrum.len(), a0);
    rec.record(0, 0.0, &w1, &w2)?;
    let dt = cfg.dt;
    for step in 1..=cfg.steps {
        match cfg.integrator {
            Integrator::Euler => {
                let (d1, d2) = flow_field(&sigma, &w1, &w2)?;
                w1.axpy(dt, &d1)?;
                w2.axpy(dt, &d2)?;
            }
            Integrator::Rk4 => {
                let (k1a, k1b) = flow_field(&sigma, &w1, &w2)?;
                let (k2a, k2b) = flow_field(
                    &sigma,
                    &combine(&w1, 0.5 * dt, &k1a),
                    &combine(&w2, 0.5 * dt, &k1b),
                )?;
                let (k3a, k3b) = flow_field(
                    &sigma,
                    &combine(&w1, 0.5 * dt, &k2a),
                    &combine(&w2, 0.5 * dt, &k2b),
                )?;
                let (k4a, k4b) =
                    flow_field(&sigma, &combine(&w1, dt, &k3a), &combine(&w2, dt, &k3b))?;
                for (w, k) in [(&mut w1, [k1a, k2a, k3a, k4a]), (&mut w2, [k1b, k2b, k3b, k4b])] {
                    w.axpy(dt / 6.0, &k[0])?;
                    w.axpy(dt / 3.0, &k[1])?;
                    w.axpy(dt / 3.0, &k[2])?;
                    w.axpy(dt / 6.0, &k[3])?;
                }
            }
        }
        let norm = w1.frobenius_norm() + w2.frobenius_norm();
        if !(norm.is_finite() && norm < limit) {
            return Err(Error::Numeric(format!(
                "gradient flow diverged at step {step}; reduce dt (currently {dt})"
            )));
        }
        if step % cfg.sample_every == 0 || step == cfg.steps {
            rec.record(step, step as f64 * dt, &w1, &w2)?;
        }
    }
    Ok(rec.out)
}

/// Full-batch SGD with step `η = cfg.dt` on the 3-layer linear network
/// (sum-form squared loss), from the same structured initialization.
pub fn simulate_discrete_training(cfg: &FlowConfig) -> Result<FlowResult> {
    cfg.validate()?;
    let task = cfg.task()?;
    let (w1, w2) = cfg.structured_init(&task);
    let mut model = Model::new(
        vec![
            Layer::Dense(DenseLayer::new(w1, None, Activation::Linear)?),
            Layer::Dense(DenseLayer::new(w2, None, Activation::Linear)?),
        ],
        LossKind::Squared,
    )?;
    let mut opt = OptimizerState::new(Hyper::sgd(cfg.dt), &model)?;
    let a0 = collapse_product(&model)?;
    let mut rec = Recorder::new(&task, cfg.spectrum.len(), a0);
    let weights = |m: &Model| (m.layers[0].effective_weight(), m.layers[1].effective_weight());
    let (w1, w2) = weights(&model);
    rec.record(0, 0.0, &w1, &w2)?;
    for step in 1..=cfg.steps {
        let (_, grads) = loss_and_grad(&model, &task.x, &task.y)?;
        opt.step(&mut model, &grads)?;
        if step % cfg.sample_every == 0 || step == cfg.steps {
            let (w1, w2) = weights(&model);
            rec.record(step, step as f64 * cfg.dt, &w1, &w2)?;
        }
    }
    Ok(rec.out)
}

/// Maps trace iterations to continuous time: `t = iteration · scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    /// Max relative error per mode, in the order of `modes`; `None` if the
    /// mode never left the pre-transition region.
    pub max_rel_error: Vec<Option<f64>>,
    /// Number of compared points per mode.
    pub points: Vec<usize>,
}

impl TrajectoryReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error
            .iter()
            .flatten()
            .fold(0.0, |a: f64, &b| a.max(b))
    }
}

/// Compares recorded `D_t` spectra of `layer` against the closed form.
///
/// Singular values carry no mode labels, so at every snapshot both the
/// empirical values and the theoretical `|u_f|` are sorted in decreasing
/// order and compared rank by rank. Points where the matched theory value is
/// below `0.05·s` of its mode are skipped.
pub fn verify_trajectory(
    trace: &SpectrumTrace,
    layer: usize,
    modes: &[ModeSpec],
    time: TimeMap,
) -> Result<TrajectoryReport> {
    if modes.is_empty() {
        return param("no modes to verify");
    }
    for m in modes {
        m.validate()?;
    }
    let snaps: Vec<&SpectrumSnapshot> = trace.for_layer(layer).collect();
    if snaps.is_empty() {
        return param(format!("trace has no snapshots for layer {layer}"));
    }
    let mut worst = vec![None::<f64>; modes.len()];
    let mut points = vec![0usize; modes.len()];
    for snap in snaps {
        if snap.values.len() < modes.len() {
            return param(format!(
                "snapshot at iteration {} has {} values for {} modes",
                snap.iteration,
                snap.values.len(),
                modes.len()
            ));
        }
        let t = snap.iteration as f64 * time.scale;
        let mut theory = modes
            .iter()
            .enumerate()
            .map(|(i, m)| Ok((closed_form_mode(t, m)?.abs(), i)))
            .collect::<Result<Vec<_>>>()?;
        theory.sort_by(|a, b| b.0.total_cmp(&a.0));
        for (rank, &(th, i)) in theory.iter().enumerate() {
            if th < 0.05 * modes[i].s {
                continue;
            }
            let err = (snap.values[rank] - th).abs() / th;
            worst[i] = Some(worst[i].map_or(err, |w: f64| w.max(err)));
            points[i] += 1;
        }
    }
    Ok(TrajectoryReport {
        max_rel_error: worst,
        points,
    })
}

/// Run length that covers every mode's rise: `1.5·max t_half + 3/min s`.
pub fn suggested_horizon(modes: &[ModeSpec]) -> f64 {
    let t_half = modes
        .iter()
        .filter_map(|m| half_rise_time(m).ok())
        .fold(0.0, f64::max);
    let s_min = modes.iter().map(|m| m.s).fold(f64::INFINITY, f64::min);
    1.5 * t_half + 3.0 / s_min
}

/// `u₀ = max(|N(0, b²)|, 1e-6)`.
pub fn sample_u0(b: f64, n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| (b * rng.gaussian()).abs().max(1e-6)).collect()
}
