use crate::error::{shape_err, Error, Result};

use super::rng::SeededRng;
use super::tensor::Tensor;

/// Affine layer; `weight` is `out_dim × in_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim {
            return Err(shape_err("Layer weight", &[out_dim, in_dim], &[weight.len()]));
        }
        if bias.len() != out_dim {
            return Err(shape_err("Layer bias", &[out_dim], &[bias.len()]));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Multilayer perceptron: tanh on hidden layers, identity on the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer post-activation outputs recorded by [`Mlp::forward_trace`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    batch: usize,
    activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(shape_err(
                    format!("layer {} input", k + 1),
                    &[pair[0].out_dim],
                    &[pair[1].in_dim],
                ));
            }
        }
        if let Some(k) = layers.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("layer {k} parameters"),
            });
        }
        Ok(Self { layers })
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init(dims: &[usize], rng: &mut SeededRng) -> Result<Self> {
        Self::check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|d| {
                let (i, o) = (d[0], d[1]);
                let mut w = vec![0.0; i * o];
                rng.fill_gaussian(&mut w);
                let scale = (1.0 / i as f64).sqrt();
                w.iter_mut().for_each(|v| *v *= scale);
                Layer {
                    in_dim: i,
                    out_dim: o,
                    weight: w,
                    bias: vec![0.0; o],
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::check_dims(dims)?;
        Self::new(dims.windows(2).map(|d| Layer::zeros(d[0], d[1])).collect())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Layer::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid MLP dims {dims:?}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(|l| l.out_dim));
        d
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim == b.in_dim && a.out_dim == b.out_dim)
    }

    /// Weight and bias slices in a fixed order (layer 0 weight, layer 0 bias, ...).
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    fn batch_of(&self, input: &Tensor) -> Result<usize> {
        let (batch, cols) = match input.shape() {
            [n] => (1, *n),
            [b, n] => (*b, *n),
            s => return Err(shape_err("mlp input rank", &[0, self.in_dim()], s)),
        };
        if cols != self.in_dim() {
            return Err(shape_err("layer 0 input", &[self.in_dim()], &[cols]));
        }
        Ok(batch)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let trace = self.forward_trace(input)?;
        let out = trace.activations.into_iter().next_back().unwrap_or_default();
        let shape = if input.shape().len() == 1 {
            vec![self.out_dim()]
        } else {
            vec![trace.batch, self.out_dim()]
        };
        Tensor::new(shape, out)
    }

    pub fn forward_trace(&self, input: &Tensor) -> Result<ForwardTrace> {
        let batch = self.batch_of(input)?;
        input.ensure_finite("mlp input")?;
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let x = if k == 0 { input.data() } else { activations[k - 1].as_slice() };
            let mut out = Vec::with_capacity(batch * layer.out_dim);
            for _ in 0..batch {
                out.extend_from_slice(&layer.bias);
            }
            // out (b×o) += x (b×i) · Wᵀ (i×o)
            gemm(
                batch,
                layer.in_dim,
                layer.out_dim,
                x,
                (layer.in_dim, 1),
                &layer.weight,
                (1, layer.in_dim),
                &mut out,
                (layer.out_dim, 1),
                1.0,
            );
            if k != last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(out);
        }
        if activations[last].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "mlp output".into(),
            });
        }
        Ok(ForwardTrace { batch, activations })
    }

    /// Exact gradients of `<upstream, forward(input)>` with respect to the
    /// parameters and the input.
    pub fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<(Mlp, Tensor)> {
        let trace = self.forward_trace(input)?;
        let (grads, dx) = self.backward_trace(&trace, input, upstream, true)?;
        let dx = Tensor::new(input.shape().to_vec(), dx.unwrap_or_default())?;
        Ok((grads, dx))
    }

    /// Backward pass reusing a recorded forward trace. The input gradient is
    /// only computed when `want_input_grad` is set.
    pub fn backward_trace(
        &self,
        trace: &ForwardTrace,
        input: &Tensor,
        upstream: &Tensor,
        want_input_grad: bool,
    ) -> Result<(Mlp, Option<Vec<f64>>)> {
        let batch = trace.batch;
        if upstream.len() != batch * self.out_dim() {
            return Err(shape_err("upstream gradient", &[batch, self.out_dim()], upstream.shape()));
        }
        if input.len() != batch * self.in_dim() {
            return Err(shape_err("backward input", &[batch, self.in_dim()], input.shape()));
        }
        let mut grads = self.zeros_like();
        let mut delta = upstream.data().to_vec();
        let mut input_grad = None;
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let (i, o) = (layer.in_dim, layer.out_dim);
            let x = if k == 0 { input.data() } else { trace.activations[k - 1].as_slice() };
            let g = &mut grads.layers[k];
            // dW (o×i) = deltaᵀ (o×b) · x (b×i)
            gemm(o, batch, i, &delta, (1, o), x, (i, 1), &mut g.weight, (i, 1), 0.0);
            for row in delta.chunks_exact(o) {
                for (gb, d) in g.bias.iter_mut().zip(row) {
                    *gb += d;
                }
            }
            if k > 0 || want_input_grad {
                // dx (b×i) = delta (b×o) · W (o×i)
                let mut dx = vec![0.0; batch * i];
                gemm(batch, o, i, &delta, (o, 1), &layer.weight, (i, 1), &mut dx, (i, 1), 0.0);
                if k > 0 {
                    let h = &trace.activations[k - 1];
                    for (d, a) in dx.iter_mut().zip(h) {
                        *d *= 1.0 - a * a;
                    }
                    delta = dx;
                } else {
                    input_grad = Some(dx);
                }
            }
        }
        Ok((grads, input_grad))
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    c_strides: (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index addressed by the given dims and
    // strides, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}
