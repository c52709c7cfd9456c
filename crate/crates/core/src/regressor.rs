//! Small fully-connected ReLU regressor trained by minibatch SGD with momentum.
//!
//! The network sees standardized inputs and produces a raw output `u`; the
//! model output is `output_offset + output_scale · u`. Both affine maps are
//! fixed at training start from the data and are not trained. Losses are
//! defined on the model output; training divides the gradient by a fixed
//! normalizer so the optimizer works on unit-scale targets without moving the
//! minimizer.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OovError, Result};
use crate::scm::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    /// `mean (y − f(x))²`
    MeanSquared,
    /// `mean (z − k3 · h(x)³)²`
    CubedResidual { k3: f64 },
}

impl LossSpec {
    pub fn cubed(k3: f64) -> Result<Self> {
        if !k3.is_finite() || k3 == 0.0 {
            return Err(OovError::InvalidConfig(format!("cubed-residual multiplier must be finite and non-zero, got {k3}")));
        }
        Ok(LossSpec::CubedResidual { k3 })
    }

    /// Mean loss over `outputs` and `dL/df` per sample.
    pub fn value_and_grad(&self, outputs: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
        let b = outputs.len() as f64;
        let mut total = 0.0;
        let grad = match *self {
            LossSpec::MeanSquared => outputs
                .iter()
                .zip(targets)
                .map(|(&f, &y)| {
                    let r = f - y;
                    total += r * r;
                    2.0 * r / b
                })
                .collect(),
            LossSpec::CubedResidual { k3 } => outputs
                .iter()
                .zip(targets)
                .map(|(&f, &z)| {
                    let r = k3 * f * f * f - z;
                    total += r * r;
                    2.0 * r * 3.0 * k3 * f * f / b
                })
                .collect(),
        };
        (total / b, grad)
    }

    pub fn value(&self, outputs: &[f64], targets: &[f64]) -> f64 {
        self.value_and_grad(outputs, targets).0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplier on the Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
    pub init_scale: f64,
    pub seed: u64,
    /// Global gradient-norm clip, applied to the normalized gradient.
    pub clip: Option<f64>,
    pub momentum: f64,
    pub hidden: Vec<usize>,
    pub schedule: LearningRateSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningRateSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the epoch budget.
    #[default]
    Cosine,
}

impl LearningRateSchedule {
    pub fn factor(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            LearningRateSchedule::Constant => 1.0,
            LearningRateSchedule::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 256,
            init_scale: 1.0,
            seed: 0,
            clip: Some(10.0),
            momentum: 0.9,
            hidden: vec![64, 64],
            schedule: LearningRateSchedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(OovError::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(OovError::InvalidConfig("epochs and batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(OovError::InvalidConfig(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.hidden.contains(&0) {
            return Err(OovError::InvalidConfig("hidden widths must be positive".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(OovError::InvalidConfig(format!("clip threshold must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Dense {
    /// `fan_in × fan_out`
    weights: Array2<f64>,
    bias: Array1<f64>,
}

/// Per-layer parameter gradients, laid out like the model's layers.
#[derive(Clone, Debug)]
pub struct Gradients {
    layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| w.iter().map(|v| v * v).sum::<f64>() + b.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            *w *= factor;
            *b *= factor;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

/// Activations kept from a forward pass for backpropagation.
pub struct ForwardCache {
    /// `activations[0]` is the normalized input, the last entry the raw output.
    activations: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedforwardRegressor {
    widths: Vec<usize>,
    layers: Vec<Dense>,
    input_offset: Vec<f64>,
    input_scale: Vec<f64>,
    output_offset: f64,
    output_scale: f64,
}

impl FeedforwardRegressor {
    /// Glorot-uniform initialized network with identity input/output maps.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], init_scale: f64, rng: &mut R) -> Result<Self> {
        Self::check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = init_scale * (6.0 / (w[0] + w[1]) as f64).sqrt();
                Dense {
                    weights: Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..=bound)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self::assemble(widths, layers))
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| Dense { weights: Array2::zeros((w[0], w[1])), bias: Array1::zeros(w[1]) })
            .collect();
        Ok(Self::assemble(widths, layers))
    }

    fn assemble(widths: &[usize], layers: Vec<Dense>) -> Self {
        Self {
            widths: widths.to_vec(),
            layers,
            input_offset: vec![0.0; widths[0]],
            input_scale: vec![1.0; widths[0]],
            output_offset: 0.0,
            output_scale: 1.0,
        }
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(OovError::ShapeMismatch(format!("invalid layer widths {widths:?}")));
        }
        if *widths.last().unwrap() != 1 {
            return Err(OovError::ShapeMismatch("output width must be 1".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn set_input_normalization(&mut self, offset: Vec<f64>, scale: Vec<f64>) -> Result<()> {
        if offset.len() != self.input_width() || scale.len() != self.input_width() {
            return Err(OovError::ShapeMismatch("input normalization width".into()));
        }
        if scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(OovError::InvalidConfig("input scales must be positive".into()));
        }
        self.input_offset = offset;
        self.input_scale = scale;
        Ok(())
    }

    pub fn set_output_affine(&mut self, offset: f64, scale: f64) {
        self.output_offset = offset;
        self.output_scale = scale;
    }

    pub fn output_affine(&self) -> (f64, f64) {
        (self.output_offset, self.output_scale)
    }

    /// Zeroes the output layer so the initial model is the constant output bias.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.weights.fill(0.0);
        last.bias.fill(0.0);
    }

    pub fn output_bias_mut(&mut self) -> &mut f64 {
        &mut self.layers.last_mut().unwrap().bias[0]
    }

    /// Sets every weight of layer `layer` from a row-major `fan_in × fan_out` slice.
    pub fn set_layer(&mut self, layer: usize, weights: &[f64], bias: &[f64]) -> Result<()> {
        let l = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| OovError::ShapeMismatch(format!("no layer {layer}")))?;
        let (i, o) = l.weights.dim();
        if weights.len() != i * o || bias.len() != o {
            return Err(OovError::ShapeMismatch(format!("layer {layer} expects {i}x{o} weights")));
        }
        l.weights = Array2::from_shape_vec((i, o), weights.to_vec()).unwrap();
        l.bias = Array1::from(bias.to_vec());
        Ok(())
    }

    fn normalize(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        let mut x = inputs.to_owned();
        for (j, mut col) in x.axis_iter_mut(Axis(1)).enumerate() {
            let (o, s) = (self.input_offset[j], self.input_scale[j]);
            col.mapv_inplace(|v| (v - o) / s);
        }
        x
    }

    fn check_inputs(&self, inputs: ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_width() {
            return Err(OovError::ShapeMismatch(format!(
                "model expects {} input columns, got {}",
                self.input_width(),
                inputs.ncols()
            )));
        }
        Ok(())
    }

    /// Forward pass returning model outputs and the cache for `backward`.
    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_inputs(inputs)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(self.normalize(inputs));
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = activations[i].dot(&layer.weights);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(z);
        }
        let u = activations.last().unwrap();
        let out = u.iter().map(|&v| self.output_offset + self.output_scale * v).collect();
        Ok((out, ForwardCache { activations }))
    }

    /// Backpropagates `dL/df` (one entry per sample) to parameter gradients.
    pub fn backward(&self, cache: &ForwardCache, d_output: &[f64]) -> Gradients {
        let n = d_output.len();
        let mut delta = Array2::from_shape_fn((n, 1), |(i, _)| d_output[i] * self.output_scale);
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[i];
            let dw = input.t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            grads.push((dw, db));
            if i > 0 {
                let mut prev = delta.dot(&layer.weights.t());
                // ReLU mask from the stored post-activation.
                prev.zip_mut_with(input, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = prev;
            }
        }
        grads.reverse();
        Gradients { layers: grads }
    }

    pub fn predict(&self, inputs: &Array2<f64>) -> Result<Vec<f64>> {
        self.predict_view(inputs.view())
    }

    pub fn predict_view(&self, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_inputs(inputs)?;
        let mut out = Vec::with_capacity(inputs.nrows());
        for chunk in inputs.axis_chunks_iter(Axis(0), 4096) {
            out.extend(self.forward(chunk)?.0);
        }
        Ok(out)
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.forward(view).expect("input width").0[0]
    }

    fn apply_update(&mut self, velocity: &mut Gradients, grads: &Gradients, lr: f64, momentum: f64) {
        for ((layer, (vw, vb)), (gw, gb)) in self.layers.iter_mut().zip(&mut velocity.layers).zip(&grads.layers) {
            vw.zip_mut_with(gw, |v, &g| *v = momentum * *v - lr * g);
            vb.zip_mut_with(gb, |v, &g| *v = momentum * *v - lr * g);
            layer.weights += &*vw;
            layer.bias += &*vb;
        }
    }

    fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            if index < nw {
                return layer.weights.iter_mut().nth(index).unwrap();
            }
            index -= nw;
            let nb = layer.bias.len();
            if index < nb {
                return &mut layer.bias[index];
            }
            index -= nb;
        }
        panic!("parameter index out of range")
    }

    pub fn to_checkpoint(&self) -> RegressorCheckpoint {
        RegressorCheckpoint {
            widths: self.widths.clone(),
            weights: self.layers.iter().map(|l| l.weights.iter().copied().collect()).collect(),
            biases: self.layers.iter().map(|l| l.bias.to_vec()).collect(),
            input_offset: self.input_offset.clone(),
            input_scale: self.input_scale.clone(),
            output_offset: self.output_offset,
            output_scale: self.output_scale,
        }
    }

    pub fn from_checkpoint(ck: RegressorCheckpoint) -> Result<Self> {
        Self::check_widths(&ck.widths).map_err(|e| OovError::Checkpoint(e.to_string()))?;
        let n_layers = ck.widths.len() - 1;
        if ck.weights.len() != n_layers || ck.biases.len() != n_layers {
            return Err(OovError::Checkpoint(format!("expected {n_layers} layers")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (l, (w, b)) in ck.weights.into_iter().zip(ck.biases).enumerate() {
            let (fan_in, fan_out) = (ck.widths[l], ck.widths[l + 1]);
            if w.len() != fan_in * fan_out || b.len() != fan_out {
                return Err(OovError::Checkpoint(format!(
                    "layer {l}: expected {fan_in}x{fan_out} weights and {fan_out} biases"
                )));
            }
            layers.push(Dense {
                weights: Array2::from_shape_vec((fan_in, fan_out), w).unwrap(),
                bias: Array1::from(b),
            });
        }
        let width = ck.widths[0];
        if ck.input_offset.len() != width || ck.input_scale.len() != width {
            return Err(OovError::Checkpoint("input normalization width".into()));
        }
        let model = Self {
            widths: ck.widths,
            layers,
            input_offset: ck.input_offset,
            input_scale: ck.input_scale,
            output_offset: ck.output_offset,
            output_scale: ck.output_scale,
        };
        if !model.params_finite() {
            return Err(OovError::Checkpoint("non-finite parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

impl Serialize for FeedforwardRegressor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_checkpoint().serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeedforwardRegressor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let ck = RegressorCheckpoint::deserialize(d)?;
        FeedforwardRegressor::from_checkpoint(ck).map_err(serde::de::Error::custom)
    }
}

/// JSON checkpoint. `weights[l]` is row-major with shape `widths[l] × widths[l+1]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegressorCheckpoint {
    pub widths: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input_offset: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_offset: f64,
    pub output_scale: f64,
}

fn column_mean_std(inputs: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = inputs.nrows() as f64;
    inputs
        .axis_iter(Axis(1))
        .map(|c| {
            let m = c.sum() / n;
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            (m, if sd > 1e-12 { sd } else { 1.0 })
        })
        .unzip()
}

/// Momentum SGD state shared by every training loop in the crate.
pub struct Optimizer {
    velocity: Gradients,
    base_lr: f64,
    lr: f64,
    momentum: f64,
    clip: Option<f64>,
}

impl Optimizer {
    pub fn new(model: &FeedforwardRegressor, config: &TrainConfig) -> Self {
        Self {
            velocity: model.zero_gradients(),
            base_lr: config.learning_rate,
            lr: config.learning_rate,
            momentum: config.momentum,
            clip: config.clip,
        }
    }

    /// Applies the schedule for the epoch about to run.
    pub fn start_epoch(&mut self, schedule: LearningRateSchedule, epoch: usize, epochs: usize) {
        self.lr = self.base_lr * schedule.factor(epoch, epochs);
    }

    pub fn step(&mut self, model: &mut FeedforwardRegressor, mut grads: Gradients) {
        if let Some(c) = self.clip {
            let norm = grads.norm();
            if norm > c {
                grads.scale(c / norm);
            }
        }
        model.apply_update(&mut self.velocity, &grads, self.lr, self.momentum);
    }
}

/// Shuffled minibatch index sets for one epoch.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// A fresh network for `input_width` inputs with input normalization fit to `inputs`.
pub fn init_model(inputs: &Array2<f64>, config: &TrainConfig, rng: &mut impl Rng) -> Result<FeedforwardRegressor> {
    let mut widths = vec![inputs.ncols()];
    widths.extend(&config.hidden);
    widths.push(1);
    let mut model = FeedforwardRegressor::new(&widths, config.init_scale, rng)?;
    model.zero_output_layer();
    let (m, s) = column_mean_std(inputs);
    model.set_input_normalization(m, s)?;
    Ok(model)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch objective per epoch, on the loss's own scale.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

pub fn train(inputs: &Array2<f64>, targets: &[f64], loss: LossSpec, config: &TrainConfig) -> Result<FeedforwardRegressor> {
    train_with_report(inputs, targets, loss, config).map(|(m, _)| m)
}

pub fn train_with_report(
    inputs: &Array2<f64>,
    targets: &[f64],
    loss: LossSpec,
    config: &TrainConfig,
) -> Result<(FeedforwardRegressor, TrainReport)> {
    config.validate()?;
    if inputs.nrows() != targets.len() {
        return Err(OovError::LengthMismatch { left: inputs.nrows(), right: targets.len() });
    }
    if targets.is_empty() {
        return Err(OovError::InsufficientSamples { needed: 1, got: 0 });
    }
    if inputs.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(OovError::NonFinite("training data".into()));
    }
    if let LossSpec::CubedResidual { k3 } = loss {
        LossSpec::cubed(k3)?;
    }
    let mut rng = seeded_rng(config.seed);
    let mut model = init_model(inputs, config, &mut rng)?;
    let n = targets.len() as f64;
    let normalizer = match loss {
        LossSpec::MeanSquared => {
            let mean = targets.iter().sum::<f64>() / n;
            let sd = (targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
            let sd = if sd > 1e-12 { sd } else { 1.0 };
            model.set_output_affine(mean, sd);
            sd * sd
        }
        LossSpec::CubedResidual { k3 } => {
            let mean_abs = targets.iter().map(|z| z.abs()).sum::<f64>() / n;
            let s = (mean_abs / k3.abs()).cbrt();
            let s = if s > 1e-12 && s.is_finite() { s } else { 1.0 };
            model.set_output_affine(0.0, s);
            // Start at the cube root of the mean target: the cubic loss has a
            // vanishing gradient at zero output.
            let mean = targets.iter().sum::<f64>() / n;
            *model.output_bias_mut() = (mean / (k3 * s * s * s)).cbrt();
            (k3 * s * s * s).powi(2)
        }
    };
    let mut opt = Optimizer::new(&model, config);
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        opt.start_epoch(config.schedule, epoch, config.epochs);
        let mut total = 0.0;
        for batch in epoch_batches(targets.len(), config.batch_size, &mut rng) {
            let x = inputs.select(Axis(0), &batch);
            let y: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let (out, cache) = model.forward(x.view())?;
            let (value, d_out) = loss.value_and_grad(&out, &y);
            total += value * batch.len() as f64;
            let mut grads = model.backward(&cache, &d_out);
            grads.scale(1.0 / normalizer);
            opt.step(&mut model, grads);
        }
        let epoch_loss = total / n;
        if !epoch_loss.is_finite() || !model.params_finite() {
            return Err(OovError::Divergence { epoch });
        }
        report.epoch_losses.push(epoch_loss);
    }
    Ok((model, report))
}

pub fn predict(model: &FeedforwardRegressor, inputs: &Array2<f64>) -> Result<Vec<f64>> {
    model.predict(inputs)
}

/// Outcome of comparing analytic and central-difference parameter gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

/// Central-difference check of the parameter gradients of `loss` on a batch.
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(model: &FeedforwardRegressor, loss: LossSpec, inputs: &Array2<f64>, targets: &[f64]) -> Result<GradientCheck> {
    if targets.is_empty() {
        return Err(OovError::Empty("gradient-check batch"));
    }
    if inputs.nrows() != targets.len() {
        return Err(OovError::LengthMismatch { left: inputs.nrows(), right: targets.len() });
    }
    let (out, cache) = model.forward(inputs.view())?;
    let (_, d_out) = loss.value_and_grad(&out, targets);
    let analytic = model.backward(&cache, &d_out).flatten();
    let step = 1e-5;
    let mut probe = model.clone();
    let mut check = GradientCheck { max_relative_error: 0.0, max_abs_analytic: 0.0, max_abs_numeric: 0.0 };
    for (i, &a) in analytic.iter().enumerate() {
        let original = *probe.param_mut(i);
        *probe.param_mut(i) = original + step;
        let plus = loss.value(&probe.forward(inputs.view())?.0, targets);
        *probe.param_mut(i) = original - step;
        let minus = loss.value(&probe.forward(inputs.view())?.0, targets);
        *probe.param_mut(i) = original;
        let numeric = (plus - minus) / (2.0 * step);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        check.max_relative_error = check.max_relative_error.max(rel);
        check.max_abs_analytic = check.max_abs_analytic.max(a.abs());
        check.max_abs_numeric = check.max_abs_numeric.max(numeric.abs());
    }
    Ok(check)
}
