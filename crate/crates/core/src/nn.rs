//! Dense feed-forward networks over flat parameter vectors.
//!
//! Parameters are laid out layer by layer: the `fan_out x fan_in` weight
//! matrix in row-major order followed by the `fan_out` biases. Hidden layers
//! apply the configured activation, the last layer emits raw logits.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if let Some(i) = layer_sizes.iter().position(|&n| n == 0) {
            return Err(Error::InvalidSpec(format!("layer {i} has size 0")));
        }
        Ok(Self { layer_sizes, activation })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let shape = LayerShape {
                    fan_in,
                    fan_out,
                    weight_offset: offset,
                    bias_offset: offset + fan_in * fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                shape
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn check_params(&self, w: &ParameterVector) -> Result<()> {
        let expected = self.param_count();
        if w.len() != expected {
            return Err(Error::ParamLength { expected, actual: w.len() });
        }
        Ok(())
    }
}

/// All trainable weights of one network, flattened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn l2_distance(&self, other: &ParameterVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A batch of inputs, optionally labeled.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub labels: Option<&'a [usize]>,
}

impl<'a> Batch<'a> {
    pub fn labeled(inputs: ArrayView2<'a, f64>, labels: &'a [usize]) -> Self {
        Self { inputs, labels: Some(labels) }
    }

    pub fn unlabeled(inputs: ArrayView2<'a, f64>) -> Self {
        Self { inputs, labels: None }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn weights_view<'w>(w: &'w [f64], layer: &LayerShape) -> ArrayView2<'w, f64> {
    ArrayView2::from_shape(
        (layer.fan_out, layer.fan_in),
        &w[layer.weight_offset..layer.bias_offset],
    )
    .expect("layer slice matches its shape")
}

struct Trace {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

fn check_inputs(spec: &NetworkSpec, w: &ParameterVector, inputs: &ArrayView2<f64>) -> Result<()> {
    spec.check_params(w)?;
    if inputs.ncols() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: spec.input_dim(),
            actual: inputs.ncols(),
        });
    }
    Ok(())
}

fn run_forward(spec: &NetworkSpec, w: &ParameterVector, inputs: ArrayView2<f64>, keep: bool) -> Trace {
    let layers = spec.layers();
    let act = spec.activation();
    let mut trace = Trace { inputs: Vec::new(), pre: Vec::new(), logits: Array2::zeros((0, 0)) };
    let mut h = inputs.to_owned();
    for (i, layer) in layers.iter().enumerate() {
        let weights = weights_view(w.as_slice(), layer);
        let bias = &w.as_slice()[layer.bias_offset..layer.bias_offset + layer.fan_out];
        let mut z = h.dot(&weights.t());
        for mut row in z.rows_mut() {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        if i + 1 == layers.len() {
            if keep {
                trace.inputs.push(h);
            }
            trace.logits = z;
            break;
        }
        let a = z.mapv(|x| act.apply(x));
        if keep {
            trace.inputs.push(std::mem::replace(&mut h, a));
            trace.pre.push(z);
        } else {
            h = a;
        }
    }
    trace
}

/// Logits `[batch x classes]`.
pub fn forward(spec: &NetworkSpec, w: &ParameterVector, batch: &Batch) -> Result<Array2<f64>> {
    check_inputs(spec, w, &batch.inputs)?;
    Ok(run_forward(spec, w, batch.inputs, false).logits)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidTemperature(tau));
    }
    Ok(())
}

/// Tempered softmax with max subtraction.
pub fn softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Row-wise tempered softmax.
pub fn softmax_rows(logits: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    check_tau(tau)?;
    if logits.ncols() == 0 {
        return Err(Error::EmptyLogits);
    }
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| ((z - max) / tau).exp());
        let total = row.sum();
        row.mapv_inplace(|e| e / total);
    }
    Ok(out)
}

/// Row-wise tempered log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    check_tau(tau)?;
    let mut out = logits.mapv(|z| z / tau);
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|z| z - lse);
    }
    Ok(out)
}

/// Backpropagates `dlogits` (already scaled by 1/batch) through the trace.
fn backward(spec: &NetworkSpec, w: &ParameterVector, trace: &Trace, dlogits: Array2<f64>) -> Vec<f64> {
    let layers = spec.layers();
    let act = spec.activation();
    let mut grad = vec![0.0; spec.param_count()];
    let mut delta = dlogits;
    for (i, layer) in layers.iter().enumerate().rev() {
        let input = &trace.inputs[i];
        let dw = delta.t().dot(input);
        {
            let mut slot = ArrayViewMut2::from_shape(
                (layer.fan_out, layer.fan_in),
                &mut grad[layer.weight_offset..layer.bias_offset],
            )
            .expect("layer slice matches its shape");
            slot.assign(&dw);
        }
        let db: Array1<f64> = delta.sum_axis(Axis(0));
        grad[layer.bias_offset..layer.bias_offset + layer.fan_out]
            .copy_from_slice(db.as_slice().expect("contiguous"));
        if i > 0 {
            let weights = weights_view(w.as_slice(), layer);
            let mut upstream = delta.dot(&weights);
            let pre = &trace.pre[i - 1];
            ndarray::Zip::from(&mut upstream)
                .and(pre)
                .and(input)
                .for_each(|g, &z, &a| *g *= act.derivative(z, a));
            delta = upstream;
        }
    }
    grad
}

/// Mean cross-entropy and its exact gradient.
pub fn ce_loss_grad(spec: &NetworkSpec, w: &ParameterVector, batch: &Batch) -> Result<LossGrad> {
    let labels = batch.labels.ok_or(Error::MissingLabels)?;
    check_inputs(spec, w, &batch.inputs)?;
    if labels.len() != batch.len() {
        return Err(Error::LengthMismatch { expected: batch.len(), actual: labels.len() });
    }
    let classes = spec.class_count();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelOutOfRange { index, label, classes });
    }
    let n = batch.len() as f64;
    let trace = run_forward(spec, w, batch.inputs, true);
    let log_p = log_softmax_rows(&trace.logits, 1.0)?;
    let loss = -labels.iter().enumerate().map(|(i, &y)| log_p[[i, y]]).sum::<f64>() / n;
    let mut dlogits = log_p.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        dlogits[[i, y]] -= 1.0;
    }
    dlogits.mapv_inplace(|g| g / n);
    let grad = backward(spec, w, &trace, dlogits);
    Ok(LossGrad { loss, grad })
}

const ROW_SUM_TOLERANCE: f64 = 1e-6;

fn check_teacher(teacher: &Array2<f64>, rows: usize, classes: usize) -> Result<()> {
    if teacher.dim() != (rows, classes) {
        return Err(Error::LengthMismatch { expected: rows * classes, actual: teacher.len() });
    }
    for (row, probs) in teacher.rows().into_iter().enumerate() {
        let sum = probs.sum();
        if !sum.is_finite() || (sum - 1.0).abs() > ROW_SUM_TOLERANCE || probs.iter().any(|&p| p < 0.0) {
            return Err(Error::TeacherNotNormalized { row, sum });
        }
    }
    Ok(())
}

/// Mean `KL(teacher || softmax(F(x|w)/tau))` over the batch and its exact
/// gradient with respect to the student weights.
pub fn kl_loss_grad(
    spec: &NetworkSpec,
    w_student: &ParameterVector,
    batch: &Batch,
    teacher_probs: &Array2<f64>,
    tau: f64,
) -> Result<LossGrad> {
    check_tau(tau)?;
    check_inputs(spec, w_student, &batch.inputs)?;
    check_teacher(teacher_probs, batch.len(), spec.class_count())?;
    let n = batch.len() as f64;
    let trace = run_forward(spec, w_student, batch.inputs, true);
    let log_q = log_softmax_rows(&trace.logits, tau)?;
    let loss = kl_from_log(teacher_probs, &log_q) / n;
    let mut dlogits = log_q.mapv(f64::exp);
    dlogits -= teacher_probs;
    dlogits.mapv_inplace(|g| g / (tau * n));
    let grad = backward(spec, w_student, &trace, dlogits);
    Ok(LossGrad { loss: loss.max(0.0), grad })
}

/// Summed KL over rows; `0 * ln 0` terms vanish.
fn kl_from_log(teacher: &Array2<f64>, log_q: &Array2<f64>) -> f64 {
    ndarray::Zip::from(teacher).and(log_q).fold(0.0, |acc, &t, &lq| {
        if t > 0.0 {
            acc + t * (t.ln() - lq)
        } else {
            acc
        }
    })
}

/// Mean KL(teacher || student) at temperature `tau`, no gradient.
pub fn mean_kl(
    spec: &NetworkSpec,
    w_student: &ParameterVector,
    inputs: ArrayView2<f64>,
    teacher_probs: &Array2<f64>,
    tau: f64,
) -> Result<f64> {
    let logits = forward(spec, w_student, &Batch::unlabeled(inputs))?;
    check_teacher(teacher_probs, logits.nrows(), spec.class_count())?;
    let log_q = log_softmax_rows(&logits, tau)?;
    Ok((kl_from_log(teacher_probs, &log_q) / logits.nrows() as f64).max(0.0))
}

/// `w - lr * grad`; rejects non-finite gradients.
pub fn sgd_step(w: &ParameterVector, grad: &[f64], lr: f64) -> Result<ParameterVector> {
    if grad.len() != w.len() {
        return Err(Error::LengthMismatch { expected: w.len(), actual: grad.len() });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let next: Vec<f64> = w.as_slice().iter().zip(grad).map(|(x, g)| x - lr * g).collect();
    ParameterVector::new(next)
}

/// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
pub fn init_weights(spec: &NetworkSpec, seed: u64) -> ParameterVector {
    let mut rng = rng_for(seed, "init-weights", &[]);
    let mut values = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let bound = 1.0 / (layer.fan_in as f64).sqrt();
        for v in &mut values[layer.weight_offset..layer.bias_offset] {
            *v = rng.random_range(-bound..=bound);
        }
    }
    ParameterVector(values)
}

/// Predicted class per row; ties go to the lowest index.
pub fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Gathers rows of `inputs` (and labels) into an owned batch.
pub(crate) fn gather_rows(inputs: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), inputs.ncols()));
    for (dst, &i) in idx.iter().enumerate() {
        out.slice_mut(s![dst, ..]).assign(&inputs.row(i));
    }
    out
}
