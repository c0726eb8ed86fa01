//! Greedy low-rank learning on deep linear networks.
//!
//! The chain `W^L ⋯ W^1` starts at width one along the top singular pair of
//! `∇C(0)` and is widened by one mode whenever gradient descent stalls above
//! the minimum of the convex cost.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::linalg::svd;
use crate::matrix::{matmul, matmul_nt, matmul_tn, Matrix};

/// A convex cost over the product matrix.
pub trait ConvexCost {
    /// `(N_y, N_x)`.
    fn shape(&self) -> (usize, usize);
    fn value(&self, a: &Matrix) -> Result<f64>;
    fn grad(&self, a: &Matrix) -> Result<Matrix>;
    /// Global minimum over all matrices of the right shape.
    fn minimum(&self) -> f64;
}

/// `C(A) = ½‖A − T‖_F²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquaredTarget {
    target: Matrix,
}

impl SquaredTarget {
    pub fn new(target: Matrix) -> Self {
        Self { target }
    }

    pub fn target(&self) -> &Matrix {
        &self.target
    }
}

impl ConvexCost for SquaredTarget {
    fn shape(&self) -> (usize, usize) {
        self.target.shape()
    }

    fn value(&self, a: &Matrix) -> Result<f64> {
        let d = a.sub(&self.target)?;
        Ok(0.5 * d.dot(&d))
    }

    fn grad(&self, a: &Matrix) -> Result<Matrix> {
        a.sub(&self.target)
    }

    // unconstrained products reach any N_y×N_x matrix
    fn minimum(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StopRule {
    /// Fixed step budget per width.
    Fixed { steps: u64 },
    /// Stop a width once the loss has left the saddle and then improved by
    /// less than `tol_plateau` over `window` steps.
    Plateau {
        window: usize,
        tol_plateau: f64,
        max_steps: u64,
    },
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule::Plateau {
            window: 200,
            tol_plateau: 1e-7,
            max_steps: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlrlConfig {
    pub depth: usize,
    pub eps: f64,
    pub lr: f64,
    /// Stop once `C ≤ C_min + tol`.
    pub tol: f64,
    pub stop: StopRule,
}

impl Default for GlrlConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            eps: 1e-4,
            lr: 0.05,
            tol: 1e-6,
            stop: StopRule::default(),
        }
    }
}

impl GlrlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return param(format!("depth must be >= 2, got {}", self.depth));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return param(format!("eps must be >= 0, got {}", self.eps));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return param(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(self.tol >= 0.0) {
            return param("tol must be >= 0");
        }
        match self.stop {
            StopRule::Fixed { steps } if steps == 0 => param("fixed budget must be >= 1"),
            StopRule::Plateau { window, max_steps, .. } if window == 0 || max_steps == 0 => {
                param("plateau window and max_steps must be >= 1")
            }
            _ => Ok(()),
        }
    }
}

/// Factors `W^1 … W^L` of the linear chain, `W^1` first.
#[derive(Debug, Clone, PartialEq)]
pub struct GlrlState {
    pub factors: Vec<Matrix>,
}

impl GlrlState {
    /// Width-one chain `(−ε vᵀ, ε, …, ε u)`.
    pub fn rank_one(u: &[f64], v: &[f64], depth: usize, eps: f64) -> Self {
        let mut factors = Vec::with_capacity(depth);
        factors.push(Matrix::from_fn(1, v.len(), |_, j| -eps * v[j]));
        for _ in 1..depth - 1 {
            factors.push(Matrix::from_fn(1, 1, |_, _| eps));
        }
        factors.push(Matrix::from_fn(u.len(), 1, |i, _| eps * u[i]));
        Self { factors }
    }

    pub fn width(&self) -> usize {
        self.factors[0].rows()
    }

    pub fn depth(&self) -> usize {
        self.factors.len()
    }

    /// `A_θ = W^L ⋯ W^1`.
    pub fn product(&self) -> Matrix {
        let mut a = self.factors[0].clone();
        for w in &self.factors[1..] {
            a = matmul(w, &a).expect("chain shapes agree");
        }
        a
    }

    /// Gradients of `C(A_θ)` with respect to every factor, given `G = ∇C(A_θ)`.
    pub fn factor_grads(&self, g: &Matrix) -> Result<Vec<Matrix>> {
        let l = self.depth();
        // prefix[i] = W^i ⋯ W^1 (prefix[0] unused: identity)
        let mut prefix: Vec<Matrix> = Vec::with_capacity(l);
        prefix.push(self.factors[0].clone());
        for i in 1..l {
            let p = matmul(&self.factors[i], &prefix[i - 1])?;
            prefix.push(p);
        }
        let mut grads = vec![Matrix::zeros(1, 1); l];
        // back = (W^L ⋯ W^{i+2})ᵀ G, walked from the top
        let mut back = g.clone();
        for i in (0..l).rev() {
            grads[i] = if i == 0 {
                back.clone()
            } else {
                matmul_nt(&back, &prefix[i - 1])?
            };
            if i > 0 {
                back = matmul_tn(&self.factors[i], &back)?;
            }
        }
        Ok(grads)
    }
}

/// Widens the chain by one mode along the top singular pair `(u, v)` of
/// `∇C(A_θ)`. Existing entries are copied unchanged.
pub fn expand_width(state: &GlrlState, u: &[f64], v: &[f64], eps: f64) -> GlrlState {
    let l = state.depth();
    let w = state.width();
    let mut factors = Vec::with_capacity(l);
    let first = &state.factors[0];
    factors.push(Matrix::from_fn(w + 1, first.cols(), |i, j| {
        if i < w { first.get(i, j) } else { -eps * v[j] }
    }));
    for inner in &state.factors[1..l - 1] {
        factors.push(Matrix::from_fn(w + 1, w + 1, |i, j| {
            if i < w && j < w {
                inner.get(i, j)
            } else if i == w && j == w {
                eps
            } else {
                0.0
            }
        }));
    }
    let last = &state.factors[l - 1];
    factors.push(Matrix::from_fn(last.rows(), w + 1, |i, j| {
        if j < w { last.get(i, j) } else { eps * u[i] }
    }));
    GlrlState { factors }
}

fn top_pair(g: &Matrix) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let top = svd(g, 1)?;
    Ok((top.u.column(0), top.v.column(0), top.s[0]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub width: usize,
    /// Global step at which training at this width ended.
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlrlOutcome {
    pub state: GlrlState,
    /// Width in effect at each step (index `n` is the width used by step `n`).
    pub width_history: Vec<usize>,
    /// Loss before step `n`; the last entry is the final loss.
    pub loss_history: Vec<f64>,
    pub plateaus: Vec<Plateau>,
    /// Width reached `min(N_x, N_y)` without meeting the tolerance.
    pub saturated: bool,
    pub converged: bool,
}

impl GlrlOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("at least one loss")
    }

    pub fn final_width(&self) -> usize {
        self.state.width()
    }

    /// Distinct widths in order of appearance.
    pub fn staircase(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for &w in &self.width_history {
            if out.last() != Some(&w) {
                out.push(w);
            }
        }
        if out.last() != Some(&self.final_width()) {
            out.push(self.final_width());
        }
        out
    }
}

/// Progress notifications from [`glrl_train_with`].
#[derive(Debug)]
pub enum GlrlEvent<'a> {
    /// Loss before gradient step `step`, or the final loss.
    Step { step: u64, width: usize, loss: f64 },
    /// Training at the current width ended.
    Plateau { plateau: Plateau, state: &'a GlrlState },
}

/// Runs greedy low-rank learning on `cost`.
pub fn glrl_train(cost: &dyn ConvexCost, cfg: &GlrlConfig) -> Result<GlrlOutcome> {
    glrl_train_with(cost, cfg, &mut |_| Ok(()))
}

/// [`glrl_train`] reporting progress to `observer` as it happens.
pub fn glrl_train_with(
    cost: &dyn ConvexCost,
    cfg: &GlrlConfig,
    observer: &mut dyn FnMut(GlrlEvent<'_>) -> Result<()>,
) -> Result<GlrlOutcome> {
    cfg.validate()?;
    let (ny, nx) = cost.shape();
    let cap = nx.min(ny);
    let target = cost.minimum() + cfg.tol;

    let g0 = cost.grad(&Matrix::zeros(ny, nx))?;
    let (u, v, _) = top_pair(&g0)?;
    let mut state = GlrlState::rank_one(&u, &v, cfg.depth, cfg.eps);

    let mut width_history = Vec::new();
    let mut loss_history = Vec::new();
    let mut plateaus = Vec::new();
    let mut step: u64 = 0;
    let saturated;

    loop {
        let mut escaped = false;
        let mut local: u64 = 0;
        let mut a = state.product();
        let mut c = cost.value(&a)?;
        loop {
            if !c.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite cost at step {step} (width {})",
                    state.width()
                )));
            }
            loss_history.push(c);
            if c <= target {
                break;
            }
            let stop = match cfg.stop {
                StopRule::Fixed { steps } => local >= steps,
                StopRule::Plateau { window, tol_plateau, max_steps } => {
                    let n = loss_history.len();
                    if local as usize >= window {
                        let gain = loss_history[n - 1 - window] - c;
                        if gain > tol_plateau {
                            escaped = true;
                        }
                        (escaped && gain < tol_plateau) || local >= max_steps
                    } else {
                        false
                    }
                }
            };
            if stop {
                break;
            }
            observer(GlrlEvent::Step { step, width: state.width(), loss: c })?;
            let g = cost.grad(&a)?;
            let grads = state.factor_grads(&g)?;
            for (w, dw) in state.factors.iter_mut().zip(&grads) {
                w.axpy(-cfg.lr, dw)?;
            }
            width_history.push(state.width());
            step += 1;
            local += 1;
            a = state.product();
            c = cost.value(&a)?;
        }
        let plateau = Plateau {
            width: state.width(),
            step,
            loss: c,
        };
        plateaus.push(plateau);
        observer(GlrlEvent::Plateau { plateau, state: &state })?;
        if c <= target || state.width() >= cap {
            saturated = c > target;
            observer(GlrlEvent::Step { step, width: state.width(), loss: c })?;
            break;
        }
        let g = cost.grad(&a)?;
        let (u, v, _) = top_pair(&g)?;
        state = expand_width(&state, &u, &v, cfg.eps);
        // the history's last loss belongs to the old width; re-evaluated below
        loss_history.pop();
    }

    let converged = *loss_history.last().expect("non-empty") <= target;
    Ok(GlrlOutcome {
        state,
        width_history,
        loss_history,
        plateaus,
        saturated,
        converged,
    })
}

/// `½·Σ_{i>w} sᵢ²`, the best loss reachable at width `w`.
pub fn eckart_young_loss(singular_values: &[f64], width: usize) -> f64 {
    0.5 * singular_values.iter().skip(width).fold(0.0, |acc, s| acc + s * s)
}
