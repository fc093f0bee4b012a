//! Multilayer perceptron trained with plain mini-batch SGD.
//!
//! Parameters live in one flat [`ParameterVector`] so that federated
//! aggregation can treat a model as a point in `R^d`. Each dense layer is
//! stored as its weight matrix (row-major, `fan_in x fan_out`, so row `i`
//! holds the outgoing weights of input `i`) followed by its bias vector.
//! Hidden layers use the configured activation, the output layer softmax.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_from;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Rows per chunk when evaluating large datasets.
const EVAL_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a = f(z)`.
    fn derivative_from_output<T: Scalar>(self, a: T) -> T {
        match self {
            Activation::Relu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl NetworkSpec {
    pub const DEFAULT_HIDDEN: [usize; 2] = [50, 100];

    /// Two hidden ReLU layers of 50 and 100 units.
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        NetworkSpec {
            input_dim,
            hidden: Self::DEFAULT_HIDDEN.to_vec(),
            output_dim,
            activation: Activation::Relu,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.output_dim < 2 {
            return Err(Error::invalid("output_dim must be at least 2"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim);
        let layers = dims
            .windows(2)
            .map(|w| LayerShape {
                fan_in: w[0],
                fan_out: w[1],
            })
            .collect();
        Layout {
            layers,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerShape {
    pub fn weight_count(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.fan_out
    }
}

/// Maps each dense layer to its slice of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub layers: Vec<LayerShape>,
    pub activation: Activation,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.layers.iter().map(LayerShape::param_count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    /// Start offset of each layer's block.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.layers
            .iter()
            .map(|l| {
                let start = acc;
                acc += l.param_count();
                start
            })
            .collect()
    }

    pub fn weight_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.offsets()[layer];
        start..start + self.layers[layer].weight_count()
    }

    pub fn bias_range(&self, layer: usize) -> std::ops::Range<usize> {
        let w = self.weight_range(layer);
        w.end..w.end + self.layers[layer].fan_out
    }
}

/// Flattened weights and biases of every layer, tagged with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector<T> {
    values: Vec<T>,
    layout: Arc<Layout>,
}

impl<T: Scalar> ParameterVector<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParameterVector {
            values: vec![T::zero(); layout.len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<T>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "layout expects {} parameters, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(ParameterVector { values, layout })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    fn layer(&self, index: usize, offset: usize) -> (&[T], &[T]) {
        let shape = self.layout.layers[index];
        let w_end = offset + shape.weight_count();
        (
            &self.values[offset..w_end],
            &self.values[w_end..w_end + shape.fan_out],
        )
    }
}

/// Row-major feature matrix with one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    features: Vec<T>,
    n_features: usize,
    labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(features: Vec<T>, n_features: usize, labels: Vec<usize>) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::invalid("batch needs at least one feature column"));
        }
        if features.len() != n_features * labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature values for {} rows of width {}",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        Ok(Batch {
            features,
            n_features,
            labels,
        })
    }

    pub fn empty(n_features: usize) -> Self {
        Batch {
            features: Vec::new(),
            n_features,
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [T] {
        &mut self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Copies the listed rows, in order, into a new batch.
    pub fn gather(&self, rows: &[usize]) -> Batch<T> {
        let mut features = Vec::with_capacity(rows.len() * self.n_features);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Batch {
            features,
            n_features: self.n_features,
            labels,
        }
    }

    pub fn push_row(&mut self, row: &[T], label: usize) {
        debug_assert_eq!(row.len(), self.n_features);
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }
}

/// Softmax outputs, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities<T> {
    values: Vec<T>,
    n_classes: usize,
}

impl<T: Scalar> Probabilities<T> {
    pub fn new(values: Vec<T>, n_classes: usize) -> Result<Self> {
        if n_classes == 0 || values.len() % n_classes != 0 {
            return Err(Error::Dimension(format!(
                "{} probabilities do not form rows of {n_classes}",
                values.len()
            )));
        }
        Ok(Probabilities { values, n_classes })
    }

    pub fn n_rows(&self) -> usize {
        self.values.len() / self.n_classes
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.n_classes)
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Zero-mean normal weights with standard deviation `1/sqrt(fan_in)`, zero biases.
pub fn init_params<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<ParameterVector<T>> {
    spec.validate()?;
    let layout = Arc::new(spec.layout());
    let mut params = ParameterVector::zeros(Arc::clone(&layout));
    let mut rng = rng_from(seed);
    for (index, shape) in layout.layers.iter().enumerate() {
        let std = 1.0 / (shape.fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite positive std");
        for w in &mut params.values[layout.weight_range(index)] {
            *w = T::of(normal.sample(&mut rng));
        }
    }
    Ok(params)
}

fn check_batch<T: Scalar>(params: &ParameterVector<T>, batch: &Batch<T>) -> Result<()> {
    let layout = params.layout();
    if batch.n_features() != layout.input_dim() {
        return Err(Error::Dimension(format!(
            "model expects {} features, batch has {}",
            layout.input_dim(),
            batch.n_features()
        )));
    }
    let classes = layout.output_dim();
    if let Some(&bad) = batch.labels().iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// `out = input * W + b` for `rows` samples.
fn dense<T: Scalar>(input: &[T], rows: usize, shape: LayerShape, w: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * shape.fan_out);
    for r in 0..rows {
        out.extend_from_slice(b);
        let x = &input[r * shape.fan_in..(r + 1) * shape.fan_in];
        let o = &mut out[r * shape.fan_out..(r + 1) * shape.fan_out];
        for (k, &xk) in x.iter().enumerate() {
            if xk == T::zero() {
                continue;
            }
            let w_row = &w[k * shape.fan_out..(k + 1) * shape.fan_out];
            for (oj, &wj) in o.iter_mut().zip(w_row) {
                *oj = *oj + xk * wj;
            }
        }
    }
    out
}

fn softmax_in_place<T: Scalar>(logits: &mut [T], n_classes: usize) {
    for row in logits.chunks_exact_mut(n_classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Activations of every layer for `rows` samples; the last entry holds the
/// softmax output.
fn forward_trace<T: Scalar>(params: &ParameterVector<T>, input: &[T], rows: usize) -> Vec<Vec<T>> {
    let layout = params.layout();
    let n_layers = layout.layers.len();
    let mut trace: Vec<Vec<T>> = Vec::with_capacity(n_layers);
    let mut offset = 0;
    for (index, &shape) in layout.layers.iter().enumerate() {
        let (w, b) = params.layer(index, offset);
        offset += shape.param_count();
        let prev = trace.last().map_or(input, Vec::as_slice);
        let mut z = dense(prev, rows, shape, w, b);
        if index + 1 == n_layers {
            softmax_in_place(&mut z, shape.fan_out);
        } else {
            for v in z.iter_mut() {
                *v = layout.activation.apply(*v);
            }
        }
        trace.push(z);
    }
    trace
}

pub fn forward<T: Scalar>(params: &ParameterVector<T>, batch: &Batch<T>) -> Result<Probabilities<T>> {
    check_batch(params, batch)?;
    let mut trace = forward_trace(params, batch.features(), batch.len());
    let probs = trace.pop().unwrap_or_default();
    Probabilities::new(probs, params.layout().output_dim())
}

fn nll_sum<T: Scalar>(probs: &Probabilities<T>, labels: &[usize]) -> T {
    let floor = T::of(PROB_FLOOR);
    probs
        .rows()
        .zip(labels)
        .map(|(row, &y)| -row[y].max(floor).ln())
        .fold(T::zero(), |a, b| a + b)
}

/// Mean negative log-likelihood of the true classes.
///
/// Panics if a label is not a valid column of `probs`.
pub fn cross_entropy<T: Scalar>(probs: &Probabilities<T>, labels: &[usize]) -> T {
    assert_eq!(probs.n_rows(), labels.len(), "one label per probability row");
    if labels.is_empty() {
        return T::zero();
    }
    nll_sum(probs, labels) / T::of(labels.len() as f64)
}

/// Mean cross-entropy of `batch` and its gradient with respect to every parameter.
pub fn loss_and_gradient<T: Scalar>(
    params: &ParameterVector<T>,
    batch: &Batch<T>,
) -> Result<(T, ParameterVector<T>)> {
    check_batch(params, batch)?;
    if batch.is_empty() {
        return Err(Error::invalid("cannot differentiate over an empty batch"));
    }
    let layout = params.layout();
    let rows = batch.len();
    let trace = forward_trace(params, batch.features(), rows);
    let n_classes = layout.output_dim();
    let probs = Probabilities::new(trace.last().cloned().unwrap_or_default(), n_classes)?;
    let loss = cross_entropy(&probs, batch.labels());

    // Output pre-activation gradient: (softmax - one_hot) / rows.
    let inv_rows = T::one() / T::of(rows as f64);
    let mut delta = trace[trace.len() - 1].clone();
    for (r, &y) in batch.labels().iter().enumerate() {
        delta[r * n_classes + y] = delta[r * n_classes + y] - T::one();
    }
    for d in delta.iter_mut() {
        *d = *d * inv_rows;
    }

    let mut grad = ParameterVector::zeros(Arc::clone(layout));
    let offsets = layout.offsets();
    for index in (0..layout.layers.len()).rev() {
        let shape = layout.layers[index];
        let input = if index == 0 {
            batch.features()
        } else {
            trace[index - 1].as_slice()
        };
        let start = offsets[index];
        let w_end = start + shape.weight_count();
        {
            let (gw, gb) = grad.values[start..w_end + shape.fan_out].split_at_mut(shape.weight_count());
            for r in 0..rows {
                let x = &input[r * shape.fan_in..(r + 1) * shape.fan_in];
                let d = &delta[r * shape.fan_out..(r + 1) * shape.fan_out];
                for (k, &xk) in x.iter().enumerate() {
                    if xk == T::zero() {
                        continue;
                    }
                    let g_row = &mut gw[k * shape.fan_out..(k + 1) * shape.fan_out];
                    for (g, &dj) in g_row.iter_mut().zip(d) {
                        *g = *g + xk * dj;
                    }
                }
                for (g, &dj) in gb.iter_mut().zip(d) {
                    *g = *g + dj;
                }
            }
        }
        if index > 0 {
            let w = &params.values[start..w_end];
            let mut next = vec![T::zero(); rows * shape.fan_in];
            for r in 0..rows {
                let d = &delta[r * shape.fan_out..(r + 1) * shape.fan_out];
                let a = &input[r * shape.fan_in..(r + 1) * shape.fan_in];
                let out = &mut next[r * shape.fan_in..(r + 1) * shape.fan_in];
                for k in 0..shape.fan_in {
                    let slope = layout.activation.derivative_from_output(a[k]);
                    if slope == T::zero() {
                        continue;
                    }
                    let w_row = &w[k * shape.fan_out..(k + 1) * shape.fan_out];
                    let s = w_row
                        .iter()
                        .zip(d)
                        .fold(T::zero(), |acc, (&wj, &dj)| acc + wj * dj);
                    out[k] = s * slope;
                }
            }
            delta = next;
        }
    }
    Ok((loss, grad))
}

pub fn backward<T: Scalar>(params: &ParameterVector<T>, batch: &Batch<T>) -> Result<ParameterVector<T>> {
    loss_and_gradient(params, batch).map(|(_, g)| g)
}

/// `params - eta * grad`, coordinate-wise.
pub fn sgd_step<T: Scalar>(
    params: &ParameterVector<T>,
    grad: &ParameterVector<T>,
    eta: T,
) -> Result<ParameterVector<T>> {
    let mut next = params.clone();
    sgd_step_in_place(&mut next, grad, eta)?;
    Ok(next)
}

pub fn sgd_step_in_place<T: Scalar>(
    params: &mut ParameterVector<T>,
    grad: &ParameterVector<T>,
    eta: T,
) -> Result<()> {
    if !params.same_layout(grad) {
        return Err(Error::LayoutMismatch);
    }
    for (p, &g) in params.values.iter_mut().zip(&grad.values) {
        *p = *p - eta * g;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<T> {
    pub loss: T,
    pub predictions: Vec<usize>,
}

/// Cross-entropy over the whole dataset plus argmax predictions.
///
/// Large datasets are processed in fixed-size chunks (possibly in parallel);
/// partial sums are combined in chunk order so the result does not depend on
/// the thread count.
pub fn evaluate<T: Scalar>(params: &ParameterVector<T>, dataset: &Batch<T>) -> Result<Evaluation<T>> {
    check_batch(params, dataset)?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let width = dataset.n_features();
    let classes = params.layout().output_dim();
    let parts: Vec<(T, Vec<usize>)> = dataset
        .features()
        .par_chunks(EVAL_CHUNK * width)
        .zip(dataset.labels().par_chunks(EVAL_CHUNK))
        .map(|(x, y)| {
            let mut trace = forward_trace(params, x, y.len());
            let probs = Probabilities {
                values: trace.pop().unwrap_or_default(),
                n_classes: classes,
            };
            (nll_sum(&probs, y), probs.argmax())
        })
        .collect();
    let mut total = T::zero();
    let mut predictions = Vec::with_capacity(dataset.len());
    for (sum, preds) in parts {
        total = total + sum;
        predictions.extend(preds);
    }
    Ok(Evaluation {
        loss: total / T::of(dataset.len() as f64),
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::new(2, 2).with_hidden(vec![2])
    }

    #[test]
    fn default_layout_length() {
        let spec = NetworkSpec::new(75, 2);
        assert_eq!(spec.layout().len(), 75 * 50 + 50 + 50 * 100 + 100 + 100 * 2 + 2);
        assert_eq!(spec.layout().len(), 9102);
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let spec = NetworkSpec::new(10, 2);
        let a: ParameterVector<f64> = init_params(&spec, 7).unwrap();
        let b: ParameterVector<f64> = init_params(&spec, 7).unwrap();
        let c: ParameterVector<f64> = init_params(&spec, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let layout = a.layout().clone();
        for l in 0..layout.layers.len() {
            assert!(a.values()[layout.bias_range(l)].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_rejects_single_class() {
        let spec = NetworkSpec::new(3, 1);
        assert!(init_params::<f64>(&spec, 0).is_err());
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let layout = Arc::new(NetworkSpec::new(3, 2).layout());
        let params = ParameterVector::<f64>::zeros(layout);
        let batch = Batch::new(vec![1.0, -2.0, 3.5, 0.0, 0.0, 9.0], 3, vec![0, 1]).unwrap();
        let probs = forward(&params, &batch).unwrap();
        for row in probs.rows() {
            assert_eq!(row, &[0.5, 0.5]);
        }
        let eval = evaluate(&params, &batch).unwrap();
        assert!((eval.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(eval.predictions, vec![0, 0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let params: ParameterVector<f64> = init_params(&tiny_spec(), 1).unwrap();
        let batch = Batch::new(vec![1.0, 2.0, 3.0], 3, vec![0]).unwrap();
        assert!(matches!(forward(&params, &batch), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_zeroes_negative_preactivation() {
        // 1 input -> 1 hidden -> 2 outputs; hidden pre-activation is -1.
        let spec = NetworkSpec::new(1, 2).with_hidden(vec![1]);
        let layout = Arc::new(spec.layout());
        // [w_h, b_h, w_o0, w_o1, b_o0, b_o1]
        let params = ParameterVector::from_values(layout, vec![1.0, -2.0, 5.0, -5.0, 0.0, 0.0]).unwrap();
        let batch = Batch::new(vec![1.0], 1, vec![0]).unwrap();
        let probs = forward(&params, &batch).unwrap();
        assert_eq!(probs.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn hand_computed_two_by_two_forward() {
        // W1 = [[1, -1], [2, 0.5]] (row = input), b1 = [0, 0.5]
        // W2 = [[1, 0], [-1, 1]],                b2 = [0.1, -0.1]
        let layout = Arc::new(tiny_spec().layout());
        let params = ParameterVector::from_values(
            layout,
            vec![1.0, -1.0, 2.0, 0.5, 0.0, 0.5, 1.0, 0.0, -1.0, 1.0, 0.1, -0.1],
        )
        .unwrap();
        let x = [0.5, 1.0];
        // Manual arithmetic.
        let h0 = (x[0] * 1.0 + x[1] * 2.0 + 0.0_f64).max(0.0); // 2.5
        let h1 = (x[0] * -1.0 + x[1] * 0.5 + 0.5_f64).max(0.0); // 0.5
        let z0 = h0 * 1.0 + h1 * -1.0 + 0.1; // 2.1
        let z1 = h0 * 0.0 + h1 * 1.0 - 0.1; // 0.4
        let p1 = 1.0 / (1.0 + (z0 - z1).exp());
        let expected = [1.0 - p1, p1];
        let batch = Batch::new(x.to_vec(), 2, vec![0]).unwrap();
        let probs = forward(&params, &batch).unwrap();
        for (got, want) in probs.row(0).iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        let uniform = Probabilities::new(vec![0.5f64, 0.5, 0.5, 0.5], 2).unwrap();
        assert!((cross_entropy(&uniform, &[0, 1]) - std::f64::consts::LN_2).abs() < 1e-15);
        let perfect = Probabilities::new(vec![1.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(cross_entropy(&perfect, &[0, 1]), 0.0);
        let quarter = Probabilities::new(vec![0.25, 0.75], 2).unwrap();
        assert!((cross_entropy(&quarter, &[0]) - 4f64.ln()).abs() < 1e-15);
        let zero = Probabilities::new(vec![0.0, 1.0], 2).unwrap();
        assert!((cross_entropy(&zero, &[0]) - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn output_delta_is_softmax_minus_one_hot() {
        // With no hidden layer the bias gradient is exactly the mean of (p - y).
        let spec = NetworkSpec::new(2, 3).with_hidden(vec![]);
        let params: ParameterVector<f64> = init_params(&spec, 3).unwrap();
        let batch = Batch::new(vec![0.2, 0.4, -1.0, 0.3, 0.7, 0.1], 2, vec![2, 0, 1]).unwrap();
        let probs = forward(&params, &batch).unwrap();
        let grad = backward(&params, &batch).unwrap();
        let bias = &grad.values()[params.layout().bias_range(0)];
        for c in 0..3 {
            let expected: f64 = (0..3)
                .map(|r| probs.row(r)[c] - if batch.labels()[r] == c { 1.0 } else { 0.0 })
                .sum::<f64>()
                / 3.0;
            assert!((bias[c] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let params: ParameterVector<f64> = init_params(&NetworkSpec::new(3, 2), 11).unwrap();
        let batch = Batch::new(vec![0.1, 0.9, 0.3, 0.5, 0.2, 0.8], 3, vec![1, 0]).unwrap();
        let doubled = batch.gather(&[0, 1, 0, 1]);
        let g1 = backward(&params, &batch).unwrap();
        let g2 = backward(&params, &doubled).unwrap();
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let layout = Arc::new(NetworkSpec::new(1, 2).with_hidden(vec![]).layout());
        let params = ParameterVector::from_values(layout.clone(), vec![1.0f64; 4]).unwrap();
        let grad = ParameterVector::from_values(layout.clone(), vec![0.5; 4]).unwrap();
        assert_eq!(sgd_step(&params, &grad, 0.0).unwrap(), params);
        let stepped = sgd_step(&params, &grad, 0.1).unwrap();
        assert!(stepped.values().iter().all(|&v| (v - 0.95).abs() < 1e-15));
        let twice = sgd_step(&sgd_step(&params, &grad, 0.125).unwrap(), &grad, 0.125).unwrap();
        let once = sgd_step(&params, &grad, 0.25).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn sgd_rejects_layout_mismatch() {
        let a = ParameterVector::<f64>::zeros(Arc::new(NetworkSpec::new(1, 2).with_hidden(vec![]).layout()));
        let b = ParameterVector::<f64>::zeros(Arc::new(NetworkSpec::new(2, 2).with_hidden(vec![]).layout()));
        assert!(matches!(sgd_step(&a, &b, 0.1), Err(Error::LayoutMismatch)));
    }

    #[test]
    fn evaluate_rejects_empty() {
        let params: ParameterVector<f64> = init_params(&tiny_spec(), 1).unwrap();
        assert!(evaluate(&params, &Batch::empty(2)).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn works_in_single_precision() {
        let params: ParameterVector<f32> = init_params(&NetworkSpec::new(4, 2), 5).unwrap();
        let batch = Batch::new(vec![0.1f32, 0.2, 0.3, 0.4], 4, vec![1]).unwrap();
        let probs = forward(&params, &batch).unwrap();
        assert!((probs.row(0).iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
