//! Minimal differentiable network: dense and convolutional layers, a
//! softmax output, reverse-mode gradients of mean cross-entropy, plain SGD
//! and the learning-rate schedules used to train ensemble members.

mod layers;
pub mod schedule;
pub mod train;

use std::ops::Range;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BmaError, Result};
use crate::rng::rng_from_seed;

pub use layers::{log_softmax_rows, softmax_rows};
pub use schedule::{lr_at, ScheduleMode, ScheduleState};
pub use train::{
    evaluate, run_epoch, sgd_step, train, EpochRecord, EpochStats, Examples, History, TrainConfig,
};

/// Floating-point element type a [`Network`] can be instantiated with.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + rand::distr::uniform::SampleUniform
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Per-example input layout. Inputs are stored flattened channel-major
/// (`channels × height × width`); plain feature vectors use `height = width = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn flat(dim: usize) -> Self {
        Self {
            channels: dim,
            height: 1,
            width: 1,
        }
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn size(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Square kernel, zero "same" padding of `kernel / 2`.
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    Flatten,
}

/// Hidden layer stack plus class count. The softmax output layer
/// (`dense(classes)` followed by softmax) is always appended after `layers`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

impl Architecture {
    /// `dense(h)-relu` for each hidden width, then the softmax output layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        let layers = hidden
            .iter()
            .flat_map(|&units| [LayerSpec::Dense { units }, LayerSpec::Relu])
            .collect();
        Self {
            input: InputShape::flat(input_dim),
            layers,
            classes,
        }
    }

    /// `conv-relu` blocks, flatten, `dense(head_width)-relu`, softmax output.
    pub fn small_cnn(
        input: InputShape,
        filters: &[usize],
        kernel: usize,
        stride: usize,
        head_width: usize,
        classes: usize,
    ) -> Self {
        let mut layers: Vec<LayerSpec> = filters
            .iter()
            .flat_map(|&filters| {
                [
                    LayerSpec::Conv2d {
                        filters,
                        kernel,
                        stride,
                    },
                    LayerSpec::Relu,
                ]
            })
            .collect();
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense { units: head_width });
        layers.push(LayerSpec::Relu);
        Self {
            input,
            layers,
            classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Layer {
    Conv(ConvGeom),
    Dense {
        inputs: usize,
        outputs: usize,
        w_off: usize,
        b_off: usize,
    },
    Relu,
    Flatten,
}

impl Layer {
    fn fan_in_and_span(&self) -> Option<(usize, Range<usize>, Range<usize>)> {
        match self {
            Layer::Conv(g) => Some((
                g.patch_len(),
                g.w_off..g.w_off + g.out_c * g.patch_len(),
                g.b_off..g.b_off + g.out_c,
            )),
            Layer::Dense {
                inputs,
                outputs,
                w_off,
                b_off,
            } => Some((
                *inputs,
                *w_off..*w_off + inputs * outputs,
                *b_off..*b_off + outputs,
            )),
            _ => None,
        }
    }

    /// Shape of each parameter tensor (weights then bias) owned by this layer.
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Layer::Conv(g) => vec![vec![g.out_c, g.in_c, g.kernel, g.kernel], vec![g.out_c]],
            Layer::Dense {
                inputs, outputs, ..
            } => vec![vec![*inputs, *outputs], vec![*outputs]],
            _ => vec![],
        }
    }
}

/// Resolves an architecture into concrete layers with parameter offsets.
/// Returns the layers, total parameter count and the feature dimension fed
/// into the output layer.
fn resolve(arch: &Architecture) -> Result<(Vec<Layer>, usize, usize)> {
    if arch.classes < 2 {
        return Err(BmaError::Validation(format!(
            "need at least 2 classes, got {}",
            arch.classes
        )));
    }
    if arch.input.size() == 0 {
        return Err(BmaError::Validation("empty input shape".into()));
    }
    let mut layers = Vec::with_capacity(arch.layers.len() + 1);
    let mut spatial = Some((arch.input.channels, arch.input.height, arch.input.width));
    let mut width = arch.input.size();
    let mut offset = 0usize;
    for spec in &arch.layers {
        match *spec {
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
            } => {
                let (c, h, w) = spatial.ok_or_else(|| {
                    BmaError::Validation("conv2d after a flattened layer".into())
                })?;
                if filters == 0 || kernel == 0 || stride == 0 || kernel % 2 == 0 {
                    return Err(BmaError::Validation(format!(
                        "conv2d needs positive filters/stride and an odd kernel, got {spec:?}"
                    )));
                }
                let pad = kernel / 2;
                let out_h = (h + 2 * pad - kernel) / stride + 1;
                let out_w = (w + 2 * pad - kernel) / stride + 1;
                let geom = ConvGeom {
                    in_c: c,
                    out_c: filters,
                    kernel,
                    stride,
                    pad,
                    in_h: h,
                    in_w: w,
                    out_h,
                    out_w,
                    w_off: offset,
                    b_off: offset + filters * c * kernel * kernel,
                };
                offset = geom.b_off + filters;
                spatial = Some((filters, out_h, out_w));
                width = filters * out_h * out_w;
                layers.push(Layer::Conv(geom));
            }
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err(BmaError::Validation("dense layer with 0 units".into()));
                }
                layers.push(Layer::Dense {
                    inputs: width,
                    outputs: units,
                    w_off: offset,
                    b_off: offset + width * units,
                });
                offset += width * units + units;
                spatial = None;
                width = units;
            }
            LayerSpec::Relu => layers.push(Layer::Relu),
            LayerSpec::Flatten => {
                spatial = None;
                layers.push(Layer::Flatten);
            }
        }
    }
    let feature_dim = width;
    layers.push(Layer::Dense {
        inputs: width,
        outputs: arch.classes,
        w_off: offset,
        b_off: offset + width * arch.classes,
    });
    offset += width * arch.classes + arch.classes;
    Ok((layers, offset, feature_dim))
}

/// A feed-forward softmax classifier with a flat parameter vector.
///
/// Parameters are laid out layer by layer, each layer's weights followed
/// by its bias. Dense weights are `inputs × outputs` row-major; conv
/// weights are `out_c × in_c × k × k`. The final dense layer (the softmax
/// output layer) occupies [`Network::last_layer_span`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    layers: Vec<Layer>,
    weights: Vec<T>,
    feature_dim: usize,
}

impl<T: Scalar> Network<T> {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let mut rng = rng_from_seed(seed);
        for layer in &net.layers {
            if let Some((fan_in, w, _)) = layer.fan_in_and_span() {
                let bound = T::from_f64_lossy(1.0 / (fan_in as f64).sqrt());
                for v in &mut net.weights[w] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(net)
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let (layers, n_params, feature_dim) = resolve(&arch)?;
        Ok(Self {
            arch,
            layers,
            weights: vec![T::zero(); n_params],
            feature_dim,
        })
    }

    pub fn with_weights(arch: Architecture, weights: Vec<T>) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        net.set_weights(weights)?;
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input.size()
    }

    /// Width of the penultimate activations consumed by the output layer.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<T>) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(BmaError::Dimension(format!(
                "expected {} weights, got {}",
                self.weights.len(),
                weights.len()
            )));
        }
        self.weights = weights;
        Ok(())
    }

    /// Index range of the output layer's weights (`feature_dim × classes`)
    /// followed by its bias (`classes`).
    pub fn last_layer_span(&self) -> Range<usize> {
        match self.layers.last() {
            Some(Layer::Dense { w_off, b_off, outputs, .. }) => *w_off..*b_off + *outputs,
            _ => unreachable!("resolve always appends the output layer"),
        }
    }

    pub fn last_layer(&self) -> &[T] {
        &self.weights[self.last_layer_span()]
    }

    pub fn set_last_layer(&mut self, theta: &[T]) -> Result<()> {
        let span = self.last_layer_span();
        if theta.len() != span.len() {
            return Err(BmaError::Dimension(format!(
                "last layer has {} parameters, got {}",
                span.len(),
                theta.len()
            )));
        }
        self.weights[span].copy_from_slice(theta);
        Ok(())
    }

    /// Shapes of all parameter tensors in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(Layer::param_shapes).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            weights: self
                .weights
                .iter()
                .map(|w| U::from_f64_lossy(w.as_f64()))
                .collect(),
            feature_dim: self.feature_dim,
        }
    }

    fn check_inputs(&self, inputs: &ArrayView2<T>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(BmaError::Dimension(format!(
                "network expects {} input features, batch has {}",
                self.input_dim(),
                inputs.ncols()
            )));
        }
        Ok(())
    }

    /// Activations entering each layer, plus the final logits.
    fn activations(&self, inputs: ArrayView2<T>, upto: usize) -> Vec<Array2<T>> {
        let mut acts = Vec::with_capacity(upto + 1);
        acts.push(inputs.to_owned());
        for layer in &self.layers[..upto] {
            let next = layers::forward(layer, acts.last().unwrap().view(), &self.weights);
            acts.push(next);
        }
        acts
    }

    pub fn logits(&self, inputs: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_inputs(&inputs)?;
        let mut x = inputs.to_owned();
        for layer in &self.layers {
            x = layers::forward(layer, x.view(), &self.weights);
        }
        Ok(x)
    }

    /// Class probabilities, one row per example.
    pub fn forward(&self, inputs: ArrayView2<T>) -> Result<Array2<T>> {
        let mut logits = self.logits(inputs)?;
        softmax_rows(&mut logits);
        Ok(logits)
    }

    /// Penultimate activations (the inputs of the softmax output layer).
    pub fn features(&self, inputs: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_inputs(&inputs)?;
        let mut x = inputs.to_owned();
        for layer in &self.layers[..self.layers.len() - 1] {
            x = layers::forward(layer, x.view(), &self.weights);
        }
        Ok(x)
    }

    fn check_labels(&self, n: usize, labels: &[usize]) -> Result<()> {
        if labels.len() != n {
            return Err(BmaError::Dimension(format!(
                "{} examples but {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.classes()) {
            return Err(BmaError::Validation(format!(
                "label {bad} outside [0, {})",
                self.classes()
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, inputs: ArrayView2<T>, labels: &[usize]) -> Result<T> {
        self.check_labels(inputs.nrows(), labels)?;
        if labels.is_empty() {
            return Err(BmaError::Validation("empty batch".into()));
        }
        let mut logits = self.logits(inputs)?;
        log_softmax_rows(&mut logits);
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -logits[[i, y]])
            .sum();
        Ok(total / T::from_usize(labels.len()).unwrap())
    }

    /// Mean cross-entropy and its gradient with respect to every weight.
    pub fn loss_and_grad(&self, inputs: ArrayView2<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
        self.check_inputs(&inputs)?;
        self.check_labels(inputs.nrows(), labels)?;
        if labels.is_empty() {
            return Err(BmaError::Validation("empty batch".into()));
        }
        let n = T::from_usize(labels.len()).unwrap();
        let acts = self.activations(inputs, self.layers.len());
        let mut delta = acts.last().unwrap().clone();
        log_softmax_rows(&mut delta);
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            loss = loss - delta[[i, y]];
        }
        // d(mean CE)/d logits = (softmax - onehot) / n
        delta.mapv_inplace(|v| v.exp());
        for (i, &y) in labels.iter().enumerate() {
            delta[[i, y]] = delta[[i, y]] - T::one();
        }
        delta.mapv_inplace(|v| v / n);

        let mut grad = vec![T::zero(); self.weights.len()];
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let need_input_grad = idx > 0;
            delta = layers::backward(
                layer,
                acts[idx].view(),
                delta.view(),
                &self.weights,
                &mut grad,
                need_input_grad,
            );
        }
        Ok((loss / n, grad))
    }

    /// Gradient of mean cross-entropy with respect to all weights.
    pub fn grad(&self, inputs: ArrayView2<T>, labels: &[usize]) -> Result<Vec<T>> {
        self.loss_and_grad(inputs, labels).map(|(_, g)| g)
    }

    /// Fraction of rows whose arg-max (lowest index on ties) matches the label.
    pub fn accuracy(&self, inputs: ArrayView2<T>, labels: &[usize]) -> Result<f64> {
        self.check_labels(inputs.nrows(), labels)?;
        let logits = self.logits(inputs)?;
        let correct = logits
            .axis_iter(Axis(0))
            .zip(labels)
            .filter(|(row, &y)| argmax(row.iter().copied()) == y)
            .count();
        Ok(correct as f64 / labels.len().max(1) as f64)
    }
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax<T: PartialOrd>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        let replace = match &best {
            Some((_, b)) => v > *b,
            None => true,
        };
        if replace {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::Rng;

    fn tiny_cnn() -> Architecture {
        Architecture::small_cnn(InputShape::image(2, 5, 5), &[3, 4], 3, 2, 6, 3)
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let net = Network::<f64>::zeros(Architecture::mlp(4, &[5], 3)).unwrap();
        let x = Array2::from_shape_fn((7, 4), |(i, j)| (i * 3 + j) as f64 - 4.0);
        let p = net.forward(x.view()).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_dense_layer_on_one_hot_is_softmax_of_input() {
        let arch = Architecture::mlp(3, &[], 3);
        let mut w = vec![0.0f64; 12];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let net = Network::with_weights(arch, w).unwrap();
        let p = net.forward(array![[0.0, 1.0, 0.0]].view()).unwrap();
        let e = std::f64::consts::E;
        let z = 2.0 + e;
        let expected = [1.0 / z, e / z, 1.0 / z];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_bit_identical_across_calls() {
        let net = Network::<f32>::new(tiny_cnn(), 3).unwrap();
        let x = Array2::from_shape_fn((4, 50), |(i, j)| ((i * 7 + j * 13) % 11) as f32 / 11.0);
        let a = net.forward(x.view()).unwrap();
        let b = net.forward(x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let net = Network::<f64>::zeros(Architecture::mlp(4, &[5], 3)).unwrap();
        let x = Array2::<f64>::zeros((2, 5));
        assert!(matches!(net.forward(x.view()), Err(BmaError::Dimension(_))));
    }

    #[test]
    fn out_of_range_label_is_validation_error() {
        let net = Network::<f64>::zeros(Architecture::mlp(2, &[], 2)).unwrap();
        let x = Array2::<f64>::zeros((1, 2));
        assert!(matches!(net.grad(x.view(), &[2]), Err(BmaError::Validation(_))));
    }

    #[test]
    fn last_layer_span_is_the_final_dense_layer() {
        let net = Network::<f64>::zeros(tiny_cnn()).unwrap();
        let span = net.last_layer_span();
        assert_eq!(span.end, net.n_params());
        assert_eq!(span.len(), (net.feature_dim() + 1) * 3);
        assert_eq!(net.feature_dim(), 6);
        let shapes = net.param_shapes();
        assert_eq!(shapes.last().unwrap(), &vec![3]);
        assert_eq!(shapes[shapes.len() - 2], vec![6, 3]);
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(total, net.n_params());
    }

    #[test]
    fn softmax_linear_gradient_matches_closed_form() {
        let arch = Architecture::mlp(3, &[], 4);
        let mut rng = rng_from_seed(11);
        let w: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let net = Network::with_weights(arch, w).unwrap();
        let x = array![[0.3, -1.2, 0.7]];
        let y = 2usize;
        let g = net.grad(x.view(), &[y]).unwrap();
        let p = net.forward(x.view()).unwrap();
        for f in 0..3 {
            for c in 0..4 {
                let onehot = if c == y { 1.0 } else { 0.0 };
                let expected = (p[[0, c]] - onehot) * x[[0, f]];
                assert!((g[f * 4 + c] - expected).abs() < 1e-14);
            }
        }
        for c in 0..4 {
            let onehot = if c == y { 1.0 } else { 0.0 };
            assert!((g[12 + c] - (p[[0, c]] - onehot)).abs() < 1e-14);
        }
    }

    fn central_difference_check(arch: Architecture, seed: u64, batch: usize) -> f64 {
        let mut rng = rng_from_seed(seed);
        let mut net = Network::<f64>::new(arch, seed).unwrap();
        // Non-zero biases exercise every parameter.
        for v in net.weights_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        let d = net.input_dim();
        let x = Array2::from_shape_fn((batch, d), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..net.classes())).collect();
        let g = net.grad(x.view(), &labels).unwrap();
        let h = 1e-5;
        let fd: Vec<f64> = (0..g.len())
            .map(|i| {
                let mut plus = net.clone();
                plus.weights_mut()[i] += h;
                let mut minus = net.clone();
                minus.weights_mut()[i] -= h;
                (plus.loss(x.view(), &labels).unwrap() - minus.loss(x.view(), &labels).unwrap()) / (2.0 * h)
            })
            .collect();
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        diff / norm
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        // 2 -> 8 -> 3 with biases: 2*8 + 8 + 8*3 + 3 = 51 parameters.
        let rel = central_difference_check(Architecture::mlp(2, &[8], 3), 5, 6);
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let rel = central_difference_check(tiny_cnn(), 9, 3);
        assert!(rel < 1e-4, "relative error {rel}");
        let stride_one = Architecture::small_cnn(InputShape::image(1, 4, 4), &[2], 3, 1, 4, 2);
        let rel = central_difference_check(stride_one, 10, 2);
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn saturated_correct_prediction_has_vanishing_gradient() {
        let arch = Architecture::mlp(2, &[], 2);
        let net = Network::with_weights(arch, vec![40.0, -40.0, -40.0, 40.0, 0.0, 0.0]).unwrap();
        let g = net.grad(array![[1.0, 0.0]].view(), &[0]).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-6);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax([0.5, 0.5]), 0);
        assert_eq!(argmax([0.1, 0.7, 0.7]), 1);
    }
}
