//! Dense and factorized feedforward layers with explicit forward and
//! backward passes.
//!
//! Batches are column-major in the sense that every column of an input
//! matrix is one sample: a layer of shape `out×in` maps `in×batch` to
//! `out×batch`.

mod layer;
mod loss;

pub use layer::{Activation, DenseLayer, FactorizedLayer, Layer};
pub use loss::{accuracy, loss, one_hot, LossKind};

use crate::error::{param, Error, Result};
use crate::init::{init_weights, InitScheme};
use crate::matrix::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub loss: LossKind,
}

/// Activations saved by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    signature: Vec<(usize, usize, usize)>,
    inputs: Vec<Matrix>,
    outputs: Vec<Matrix>,
    /// `V·x` for factorized layers.
    hidden: Vec<Option<Matrix>>,
}

/// Gradient of one layer's trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Dense { w: Matrix, bias: Option<Matrix> },
    Factorized { u: Matrix, v: Matrix, bias: Option<Matrix> },
}

impl LayerGrad {
    /// Same order as [`Layer::params`].
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(3);
        match self {
            LayerGrad::Dense { w, bias } => {
                out.push(w);
                out.extend(bias.as_ref());
            }
            LayerGrad::Factorized { u, v, bias } => {
                out.push(u);
                out.push(v);
                out.extend(bias.as_ref());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.tensors().iter().all(|t| t.is_finite()))
    }
}

impl Model {
    pub fn new(layers: Vec<Layer>, loss: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return param("a model needs at least one layer");
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape {
                    op: if i == 0 { "model layers 0/1" } else { "model layers" },
                    lhs: (pair[0].out_dim(), pair[0].in_dim()),
                    rhs: (pair[1].out_dim(), pair[1].in_dim()),
                });
            }
        }
        Ok(Self { layers, loss })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    /// Replaces dense layer `idx` by `W0 + U·V` with `W0` its current weight
    /// and zero factors of width `rank + buffer`.
    pub fn factorize_layer(&mut self, idx: usize, rank: usize, buffer: usize) -> Result<()> {
        let layer = self
            .layers
            .get(idx)
            .ok_or_else(|| Error::Parameter(format!("no layer {idx}")))?;
        let Layer::Dense(d) = layer else {
            return Err(Error::Usage(format!("layer {idx} is already factorized")));
        };
        let f = FactorizedLayer::new(d.w.clone(), rank, buffer, d.bias.clone(), d.activation)?;
        self.layers[idx] = Layer::Factorized(f);
        Ok(())
    }

    pub fn factorized_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Factorized(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.params().iter().all(|p| p.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.params().iter().map(|p| p.rows() * p.cols()).sum::<usize>())
            .sum()
    }
}

/// Runs the network on `x` (`in×batch`).
pub fn forward(model: &Model, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if x.rows() != model.in_dim() {
        return Err(Error::Shape {
            op: "forward",
            lhs: (model.layers[0].out_dim(), model.in_dim()),
            rhs: x.shape(),
        });
    }
    let n = model.layers.len();
    let mut cache = ForwardCache {
        signature: model.layers.iter().map(Layer::signature).collect(),
        inputs: Vec::with_capacity(n),
        outputs: Vec::with_capacity(n),
        hidden: Vec::with_capacity(n),
    };
    let mut a = x.clone();
    for layer in &model.layers {
        let (mut z, h) = match layer {
            Layer::Dense(d) => (matmul(&d.w, &a)?, None),
            Layer::Factorized(f) => {
                let h = matmul(f.v(), &a)?;
                let mut z = matmul(f.u(), &h)?;
                if let Some(w0) = f.w0() {
                    z.axpy(1.0, &matmul(w0, &a)?)?;
                }
                (z, Some(h))
            }
        };
        if let Some(b) = layer.bias() {
            z.add_column_broadcast(b);
        }
        let out = layer.activation().apply(&z);
        cache.inputs.push(std::mem::replace(&mut a, out.clone()));
        cache.outputs.push(out);
        cache.hidden.push(h);
    }
    Ok((a, cache))
}

/// Gradients of the loss for every trainable tensor, given `dL/dy`.
/// Frozen bases receive none.
pub fn backward(model: &Model, cache: &ForwardCache, dy: &Matrix) -> Result<GradientSet> {
    let sig: Vec<_> = model.layers.iter().map(Layer::signature).collect();
    if sig != cache.signature {
        return Err(Error::Usage(
            "forward cache does not match the model (stale after growth or fusion?)".into(),
        ));
    }
    let last = cache.outputs.last().expect("non-empty");
    if dy.shape() != last.shape() {
        return Err(Error::Shape {
            op: "backward",
            lhs: last.shape(),
            rhs: dy.shape(),
        });
    }
    let mut grads = Vec::with_capacity(model.layers.len());
    let mut upstream = dy.clone();
    for (idx, layer) in model.layers.iter().enumerate().rev() {
        let dz = layer.activation().backprop(&cache.outputs[idx], &upstream);
        let x = &cache.inputs[idx];
        let bias = layer.bias().map(|_| dz.row_sums());
        let need_input_grad = idx > 0;
        match layer {
            Layer::Dense(d) => {
                grads.push(LayerGrad::Dense {
                    w: matmul_nt(&dz, x)?,
                    bias,
                });
                if need_input_grad {
                    upstream = matmul_tn(&d.w, &dz)?;
                }
            }
            Layer::Factorized(f) => {
                let h = cache.hidden[idx].as_ref().expect("factorized cache");
                let ut_dz = matmul_tn(f.u(), &dz)?;
                grads.push(LayerGrad::Factorized {
                    u: matmul_nt(&dz, h)?,
                    v: matmul_nt(&ut_dz, x)?,
                    bias,
                });
                if need_input_grad {
                    let mut dx = matmul_tn(f.v(), &ut_dz)?;
                    if let Some(w0) = f.w0() {
                        dx.axpy(1.0, &matmul_tn(w0, &dz)?)?;
                    }
                    upstream = dx;
                }
            }
        }
    }
    grads.reverse();
    let set = GradientSet { layers: grads };
    if !set.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(set)
}

/// `∂L/∂W` for the effective weight of every layer (`W0 + U·V` for
/// factorized layers), plus the loss value.
pub fn effective_weight_grads(model: &Model, x: &Matrix, target: &Matrix) -> Result<(f64, Vec<Matrix>)> {
    let (y, cache) = forward(model, x)?;
    let (value, dy) = loss(model.loss, &y, target)?;
    let mut out = Vec::with_capacity(model.layers.len());
    let mut upstream = dy;
    for (idx, layer) in model.layers.iter().enumerate().rev() {
        let dz = layer.activation().backprop(&cache.outputs[idx], &upstream);
        out.push(matmul_nt(&dz, &cache.inputs[idx])?);
        if idx > 0 {
            upstream = matmul_tn(&layer.effective_weight(), &dz)?;
        }
    }
    out.reverse();
    Ok((value, out))
}

/// Forward, loss and backward in one call.
pub fn loss_and_grad(model: &Model, x: &Matrix, target: &Matrix) -> Result<(f64, GradientSet)> {
    let (y, cache) = forward(model, x)?;
    let (value, dy) = loss(model.loss, &y, target)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    Ok((value, backward(model, &cache, &dy)?))
}

/// Bias-free linear chain `dims[0] → … → dims[L]` with squared loss.
/// Layer `l` draws from substream `l`.
pub fn build_deep_linear(dims: &[usize], scheme: InitScheme, rng: &Rng) -> Result<Model> {
    if dims.len() < 2 {
        return param(format!("deep linear net needs >= 2 dims, got {}", dims.len()));
    }
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(l, pair)| {
            let w = init_weights(pair[1], pair[0], scheme, &mut rng.substream(l as u64))?;
            Ok(Layer::Dense(DenseLayer::new(w, None, Activation::Linear)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Model::new(layers, LossKind::Squared)
}

/// Multilayer perceptron with `hidden` activation between layers, a linear
/// output layer and zero-initialized biases.
pub fn build_mlp(
    dims: &[usize],
    hidden: Activation,
    scheme: InitScheme,
    loss: LossKind,
    rng: &Rng,
) -> Result<Model> {
    if dims.len() < 2 {
        return param(format!("mlp needs >= 2 dims, got {}", dims.len()));
    }
    let depth = dims.len() - 1;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(l, pair)| {
            let w = init_weights(pair[1], pair[0], scheme, &mut rng.substream(l as u64))?;
            let act = if l + 1 == depth { Activation::Linear } else { hidden };
            Ok(Layer::Dense(DenseLayer::new(
                w,
                Some(Matrix::zeros(pair[1], 1)),
                act,
            )?))
        })
        .collect::<Result<Vec<_>>>()?;
    Model::new(layers, loss)
}

/// `W^L ⋯ W^1` for a linear, bias-free model.
pub fn collapse_product(model: &Model) -> Result<Matrix> {
    let mut product: Option<Matrix> = None;
    for (i, layer) in model.layers.iter().enumerate() {
        if layer.activation() != Activation::Linear {
            return Err(Error::Usage(format!("layer {i} is nonlinear")));
        }
        if layer.bias().is_some() {
            return Err(Error::Usage(format!("layer {i} has a bias")));
        }
        let w = layer.effective_weight();
        product = Some(match product {
            None => w,
            Some(p) => matmul(&w, &p)?,
        });
    }
    Ok(product.expect("non-empty model"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gaussian())
    }

    #[test]
    fn zero_dense_gives_zero_output() {
        let m = build_deep_linear(&[4, 4], InitScheme::Zeros, &Rng::new(0)).unwrap();
        let x = gaussian(4, 3, &mut Rng::new(1));
        let (y, _) = forward(&m, &x).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn zero_factors_reproduce_base() {
        let mut m = build_deep_linear(&[5, 3], InitScheme::KaimingUniform, &Rng::new(2)).unwrap();
        let w0 = m.layers[0].effective_weight();
        m.factorize_layer(0, 2, 1).unwrap();
        let x = gaussian(5, 4, &mut Rng::new(3));
        let (y, _) = forward(&m, &x).unwrap();
        assert_eq!(y, matmul(&w0, &x).unwrap());
    }

    #[test]
    fn linear_forward_matches_product() {
        let m = build_deep_linear(&[6, 5, 4, 3], InitScheme::Gaussian(0.7), &Rng::new(4)).unwrap();
        let x = gaussian(6, 7, &mut Rng::new(5));
        let (y, _) = forward(&m, &x).unwrap();
        let p = collapse_product(&m).unwrap();
        let direct = matmul(&p, &x).unwrap();
        assert!(y.sub(&direct).unwrap().max_abs() <= 1e-12 * direct.max_abs().max(1.0));
    }

    #[test]
    fn bottleneck_limits_rank() {
        let m = build_deep_linear(&[10, 5, 8], InitScheme::Gaussian(1.0), &Rng::new(6)).unwrap();
        let p = collapse_product(&m).unwrap();
        assert!(crate::linalg::numerical_rank(&p, 1e-10).unwrap() <= 5);
    }

    #[test]
    fn orthogonal_chain_product_is_orthogonal() {
        let m = build_deep_linear(&[6, 6, 6, 6], InitScheme::Orthogonal, &Rng::new(7)).unwrap();
        let p = collapse_product(&m).unwrap();
        let g = matmul_tn(&p, &p).unwrap();
        assert!(g.sub(&Matrix::identity(6)).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn collapse_rejects_nonlinear() {
        let m = build_mlp(
            &[3, 4, 2],
            Activation::Relu,
            InitScheme::KaimingUniform,
            LossKind::Squared,
            &Rng::new(0),
        )
        .unwrap();
        assert!(matches!(collapse_product(&m), Err(Error::Usage(_))));
        assert!(build_deep_linear(&[3], InitScheme::Zeros, &Rng::new(0)).is_err());
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let m = build_deep_linear(&[3, 4, 2], InitScheme::Gaussian(1.0), &Rng::new(8)).unwrap();
        let x = gaussian(3, 5, &mut Rng::new(9));
        let (y, _) = forward(&m, &x).unwrap();
        let (_, g) = loss_and_grad(&m, &x, &y).unwrap();
        for lg in &g.layers {
            for t in lg.tensors() {
                assert_eq!(t.max_abs(), 0.0);
            }
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut m = build_deep_linear(&[3, 3], InitScheme::Gaussian(1.0), &Rng::new(1)).unwrap();
        let x = gaussian(3, 2, &mut Rng::new(2));
        let (y, cache) = forward(&m, &x).unwrap();
        m.factorize_layer(0, 1, 1).unwrap();
        assert!(matches!(backward(&m, &cache, &y), Err(Error::Usage(_))));
    }

    #[test]
    fn relu_zero_input_blocks_gradient() {
        let w = Matrix::from_rows(&[[1.0]]).unwrap();
        let layer = Layer::Dense(DenseLayer::new(w, None, Activation::Relu).unwrap());
        let m = Model::new(vec![layer], LossKind::Squared).unwrap();
        let x = Matrix::from_rows(&[[0.0]]).unwrap();
        let t = Matrix::from_rows(&[[1.0]]).unwrap();
        let (_, g) = loss_and_grad(&m, &x, &t).unwrap();
        assert_eq!(g.layers[0].tensors()[0].get(0, 0), 0.0);
    }

    #[test]
    fn factorized_u_gradient_matches_dense_equivalent() {
        let mut rng = Rng::new(10);
        let w0 = gaussian(4, 5, &mut rng);
        let mut f = FactorizedLayer::new(w0, 2, 1, None, Activation::Linear).unwrap();
        f.set_factors(gaussian(4, 3, &mut rng), gaussian(3, 5, &mut rng), None)
            .unwrap();
        let dense = DenseLayer::new(f.effective_weight(), None, Activation::Linear).unwrap();
        let fm = Model::new(vec![Layer::Factorized(f.clone())], LossKind::Squared).unwrap();
        let dm = Model::new(vec![Layer::Dense(dense)], LossKind::Squared).unwrap();
        let x = gaussian(5, 6, &mut rng);
        let t = gaussian(4, 6, &mut rng);
        let (_, gf) = loss_and_grad(&fm, &x, &t).unwrap();
        let (_, gd) = loss_and_grad(&dm, &x, &t).unwrap();
        let g_w = gd.layers[0].tensors()[0].clone();
        let expect_u = matmul_nt(&g_w, f.v()).unwrap();
        let expect_v = matmul_tn(f.u(), &g_w).unwrap();
        let got = gf.layers[0].tensors();
        assert!(got[0].sub(&expect_u).unwrap().max_abs() <= 1e-10);
        assert!(got[1].sub(&expect_v).unwrap().max_abs() <= 1e-10);
    }
}
