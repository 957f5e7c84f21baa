use crate::error::{Error, Result};

use super::{gemm, KeyedRng, Scalar, Tensor, Trans};

/// `y = W x + b` applied row-wise to a batch stored as `n × d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineLayer<F = f32> {
    name: String,
    weight: Tensor<F>,
    bias: Tensor<F>,
}

/// Gradients of one affine layer, shaped like its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<F = f32> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Scalar> LayerGrads<F> {
    pub fn zeros_like(layer: &AffineLayer<F>) -> Self {
        LayerGrads {
            weight: Tensor::zeros(layer.weight.shape().to_vec()),
            bias: Tensor::zeros(layer.bias.shape().to_vec()),
        }
    }
}

impl<F: Scalar> AffineLayer<F> {
    pub fn new(name: impl Into<String>, weight: Tensor<F>, bias: Tensor<F>) -> Result<Self> {
        let name = name.into();
        if weight.shape().len() != 2 {
            return Err(Error::shape(&name, "rank-2 weight", format!("{:?}", weight.shape())));
        }
        let (d_out, _) = weight.dims2();
        if bias.shape() != [d_out] {
            return Err(Error::shape(&name, format!("bias [{d_out}]"), format!("{:?}", bias.shape())));
        }
        Ok(AffineLayer { name, weight, bias })
    }

    /// Weights drawn from `N(0, 1/d_in)`, zero bias.
    pub fn init(name: impl Into<String>, d_out: usize, d_in: usize, rng: &mut KeyedRng) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        let weight = Tensor::from_fn(vec![d_out, d_in], |_| F::of(rng.normal() * std));
        AffineLayer {
            name: name.into(),
            weight,
            bias: Tensor::zeros(vec![d_out]),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &Tensor<F> {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor<F> {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<F> {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<F> {
        &mut self.bias
    }

    pub fn params_mut(&mut self) -> (&mut Tensor<F>, &mut Tensor<F>) {
        (&mut self.weight, &mut self.bias)
    }

    pub fn cast<G: Scalar>(&self) -> AffineLayer<G> {
        AffineLayer {
            name: self.name.clone(),
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    fn check_input(&self, x: &[F], n: usize) -> Result<()> {
        if x.len() != n * self.d_in() {
            return Err(Error::shape(
                &self.name,
                format!("{n}x{} input", self.d_in()),
                format!("{} elements", x.len()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[F], n: usize) -> Result<Vec<F>> {
        self.check_input(x, n)?;
        let mut out = vec![F::zero(); n * self.d_out()];
        self.forward_into(x, n, &mut out);
        Ok(out)
    }

    /// Writes `x Wᵀ + b` into `out` (`n × d_out`). Shapes must already be valid.
    pub fn forward_into(&self, x: &[F], n: usize, out: &mut [F]) {
        let d_out = self.d_out();
        for row in out.chunks_exact_mut(d_out) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(
            Trans::No,
            Trans::Yes,
            n,
            d_out,
            self.d_in(),
            F::one(),
            x,
            self.weight.data(),
            F::one(),
            out,
        );
    }

    /// Accumulates parameter gradients into `grads` and writes the input
    /// gradient into `dx` (overwriting it) when requested.
    pub fn backward(&self, x: &[F], dy: &[F], n: usize, grads: Option<&mut LayerGrads<F>>, dx: Option<&mut [F]>) {
        let (d_out, d_in) = (self.d_out(), self.d_in());
        debug_assert_eq!(dy.len(), n * d_out);
        if let Some(g) = grads {
            gemm(Trans::Yes, Trans::No, d_out, d_in, n, F::one(), dy, x, F::one(), g.weight.data_mut());
            let db = g.bias.data_mut();
            for row in dy.chunks_exact(d_out) {
                for (b, &d) in db.iter_mut().zip(row) {
                    *b += d;
                }
            }
        }
        if let Some(dx) = dx {
            gemm(Trans::No, Trans::No, n, d_in, d_out, F::one(), dy, self.weight.data(), F::zero(), dx);
        }
    }
}

/// Smooth elementwise nonlinearities used between affine layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
}

pub fn silu<F: Scalar>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

/// Derivative of `silu` at `x`.
pub fn silu_grad<F: Scalar>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}

impl Activation {
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Silu => silu(x),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Silu => silu_grad(x),
            Activation::Tanh => {
                let t = x.tanh();
                F::one() - t * t
            }
        }
    }
}

/// A plain MLP: affine layers with an activation between consecutive layers
/// and none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack<F = f32> {
    layers: Vec<AffineLayer<F>>,
    activation: Activation,
}

/// Intermediate values kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct StackTrace<F> {
    pub n: usize,
    /// Input of every layer (`inputs[0]` is the network input).
    pub inputs: Vec<Vec<F>>,
    /// Pre-activation output of every layer; the last one is the network output.
    pub pre: Vec<Vec<F>>,
}

impl<F: Scalar> StackTrace<F> {
    pub fn output(&self) -> &[F] {
        self.pre.last().expect("non-empty stack")
    }
}

impl<F: Scalar> LayerStack<F> {
    pub fn new(layers: Vec<AffineLayer<F>>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("layer stack needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::shape(
                    pair[1].name(),
                    format!("d_in {}", pair[0].d_out()),
                    format!("d_in {}", pair[1].d_in()),
                ));
            }
        }
        Ok(LayerStack { layers, activation })
    }

    /// Builds `widths[0] → widths[1] → … → widths[last]` with names `fc0, fc1, …`.
    pub fn init(widths: &[usize], activation: Activation, rng: &mut KeyedRng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument("need input and output widths".into()));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| AffineLayer::init(format!("fc{i}"), w[1], w[0], rng))
            .collect();
        Self::new(layers, activation)
    }

    pub fn layers(&self) -> &[AffineLayer<F>] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("non-empty").d_out()
    }

    pub fn cast<G: Scalar>(&self) -> LayerStack<G> {
        LayerStack {
            layers: self.layers.iter().map(AffineLayer::cast).collect(),
            activation: self.activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight().len() + l.bias().len()).sum()
    }

    /// Parameters in declaration order `[W0, b0, W1, b1, …]`.
    pub fn params(&self) -> Vec<&Tensor<F>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
            .collect()
    }

    pub fn forward_trace(&self, x: &[F], n: usize) -> Result<StackTrace<F>> {
        self.layers[0].check_input(x, n)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![F::zero(); n * layer.d_out()];
            layer.forward_into(&cur, n, &mut out);
            let next = if i + 1 < self.layers.len() {
                out.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut cur, next));
            pre.push(out);
        }
        Ok(StackTrace { n, inputs, pre })
    }

    pub fn forward(&self, x: &[F], n: usize) -> Result<Vec<F>> {
        let mut trace = self.forward_trace(x, n)?;
        Ok(trace.pre.pop().expect("non-empty"))
    }

    /// Activations feeding the last layer (`n × d_in(last)`).
    pub fn features(&self, x: &[F], n: usize) -> Result<Vec<F>> {
        let mut trace = self.forward_trace(x, n)?;
        Ok(trace.inputs.pop().expect("non-empty"))
    }

    /// Backpropagates `d_out` (gradient w.r.t. the network output) and returns
    /// per-layer gradients plus the gradient w.r.t. the network input.
    pub fn backward(&self, trace: &StackTrace<F>, d_out: &[F]) -> (Vec<LayerGrads<F>>, Vec<F>) {
        let n = trace.n;
        let mut grads: Vec<LayerGrads<F>> = self.layers.iter().map(LayerGrads::zeros_like).collect();
        let mut delta = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let mut dx = vec![F::zero(); n * layer.d_in()];
            layer.backward(&trace.inputs[i], &delta, n, Some(&mut grads[i]), Some(&mut dx));
            if i > 0 {
                for (d, &a) in dx.iter_mut().zip(&trace.pre[i - 1]) {
                    *d *= self.activation.derivative(a);
                }
            }
            delta = dx;
        }
        (grads, delta)
    }
}

/// Mean squared error of `network(input)` against `target`, and its gradient
/// with respect to every parameter in `[W0, b0, W1, b1, …]` order.
///
/// `input` is `n × d_in` (or a rank-1 vector for a single example) and
/// `target` has the matching output shape.
pub fn forward_backward<F: Scalar>(
    network: &LayerStack<F>,
    input: &Tensor<F>,
    target: &Tensor<F>,
) -> Result<(F, Vec<Tensor<F>>)> {
    let n = match input.shape() {
        [d] if *d == network.d_in() => 1,
        [n, d] if *d == network.d_in() => *n,
        other => {
            return Err(Error::shape(
                network.layers[0].name(),
                format!("[n, {}] input", network.d_in()),
                format!("{other:?}"),
            ))
        }
    };
    if target.len() != n * network.d_out() {
        return Err(Error::shape(
            network.layers.last().expect("non-empty").name(),
            format!("{}x{} target", n, network.d_out()),
            format!("{:?}", target.shape()),
        ));
    }
    let trace = network.forward_trace(input.data(), n)?;
    let count = F::of(target.len() as f64);
    let mut loss = F::zero();
    let d_out: Vec<F> = trace
        .output()
        .iter()
        .zip(target.data())
        .map(|(&y, &t)| {
            let r = y - t;
            loss += r * r;
            (r + r) / count
        })
        .collect();
    let (grads, _) = network.backward(&trace, &d_out);
    let flat = grads.into_iter().flat_map(|g| [g.weight, g.bias]).collect();
    Ok((loss / count, flat))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer() -> LayerStack<f64> {
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let layer = AffineLayer::new("fc0", w, Tensor::zeros(vec![2])).unwrap();
        LayerStack::new(vec![layer], Activation::Silu).unwrap()
    }

    #[test]
    fn exact_fit_has_zero_loss_and_gradients() {
        let net = identity_layer();
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let (loss, grads) = forward_backward(&net, &x, &x).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn hand_differentiated_mse() {
        let net = identity_layer();
        let x = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let (loss, grads) = forward_backward(&net, &x, &t).unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(grads[0].data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(grads[1].data(), &[1.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let net = identity_layer();
        let x = Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap();
        let t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        match forward_backward(&net, &x, &t) {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, "fc0"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn stack_rejects_incompatible_layers() {
        let a = AffineLayer::<f32>::new("a", Tensor::zeros(vec![3, 2]), Tensor::zeros(vec![3])).unwrap();
        let b = AffineLayer::<f32>::new("b", Tensor::zeros(vec![2, 4]), Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(
            LayerStack::new(vec![a, b], Activation::Silu),
            Err(Error::ShapeMismatch { layer, .. }) if layer == "b"
        ));
    }

    #[test]
    fn silu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
