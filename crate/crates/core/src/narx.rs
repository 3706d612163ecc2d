//! NARX surrogate: a feedforward network over lagged inputs and outputs,
//! trained on one measured sequence and then run in closed loop as a stand-in
//! experiment source.
//!
//! The regressor at time `t` is
//! `[u(t), u(t-1), …, u(t-n_u+1), y(t-1), …, y(t-n_y)]`; samples before the
//! start of a segment read as zero.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recovery::IoSource;
use crate::system::DiscreteBilinearSystem;

/// Sample statistics used to normalize a record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendStats {
    pub u_mean: f64,
    pub u_std: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

impl TrendStats {
    pub fn identity() -> Self {
        TrendStats {
            u_mean: 0.0,
            u_std: 1.0,
            y_mean: 0.0,
            y_std: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.u_mean, self.u_std, self.y_mean, self.y_std]
            .iter()
            .all(|v| v.is_finite())
            && self.u_std > 0.0
            && self.y_std > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("degenerate trend statistics {self:?}")))
        }
    }

    pub fn normalize_input(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|v| (v - self.u_mean) / self.u_std).collect()
    }

    pub fn normalize_output(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_std).collect()
    }

    pub fn denormalize_input(&self, u_n: &[f64]) -> Vec<f64> {
        u_n.iter().map(|v| v * self.u_std + self.u_mean).collect()
    }

    pub fn denormalize_output(&self, y_n: &[f64]) -> Vec<f64> {
        y_n.iter().map(|v| v * self.y_std + self.y_mean).collect()
    }
}

fn mean_std(x: &[f64], name: &str) -> Result<(f64, f64)> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::DegenerateSignal(format!("{name} has zero variance")));
    }
    Ok((mean, std))
}

/// Zero-mean, unit-variance copies of `u` and `y`. The standard deviation
/// uses the `n - 1` divisor.
pub fn detrend(u: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>, TrendStats)> {
    if u.len() != y.len() {
        return Err(Error::Dimension(format!(
            "input has {} samples, output has {}",
            u.len(),
            y.len()
        )));
    }
    if u.len() < 2 {
        return Err(Error::Contract("need at least two samples to detrend".into()));
    }
    let (u_mean, u_std) = mean_std(u, "input")?;
    let (y_mean, y_std) = mean_std(y, "output")?;
    let trend = TrendStats {
        u_mean,
        u_std,
        y_mean,
        y_std,
    };
    Ok((trend.normalize_input(u), trend.normalize_output(y), trend))
}

/// One contiguous stretch of data; lag windows never cross segment borders.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

/// Training data as independent segments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSeries {
    pub segments: Vec<Segment>,
}

impl TrainingSeries {
    pub fn single(u: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::Dimension(format!(
                "input has {} samples, output has {}",
                u.len(),
                y.len()
            )));
        }
        Ok(TrainingSeries {
            segments: vec![Segment { u, y }],
        })
    }

    /// Total number of samples over all segments.
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.u.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples concatenated in segment order.
    pub fn concatenated(&self) -> (Vec<f64>, Vec<f64>) {
        let u = self.segments.iter().flat_map(|s| s.u.iter().copied()).collect();
        let y = self.segments.iter().flat_map(|s| s.y.iter().copied()).collect();
        (u, y)
    }

    /// `(segment, time)` of every sample, in order.
    pub fn window_positions(&self) -> Vec<(usize, usize)> {
        self.segments
            .iter()
            .enumerate()
            .flat_map(|(s, seg)| (0..seg.u.len()).map(move |t| (s, t)))
            .collect()
    }
}

/// Appends an all-zero segment of equal length, so the network learns that
/// zero input from rest produces zero output. With `enabled = false` the data
/// are returned as a single segment.
pub fn augment_zero_response(u_n: &[f64], y_n: &[f64], enabled: bool) -> Result<TrainingSeries> {
    let mut series = TrainingSeries::single(u_n.to_vec(), y_n.to_vec())?;
    if enabled {
        series.segments.push(Segment {
            u: vec![0.0; u_n.len()],
            y: vec![0.0; y_n.len()],
        });
    }
    Ok(series)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Linear,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation value.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Linear => 1.0,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weights * input;
        for mut col in z.column_iter_mut() {
            col += &self.biases;
        }
        z.apply(|v| *v = self.activation.apply(*v));
        z
    }
}

/// Hidden-layer layout of a NARX network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NarxSpec {
    /// Input taps, current sample included.
    pub input_lags: usize,
    /// Past-output taps.
    pub output_lags: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl NarxSpec {
    /// Twenty input and output lags, two hidden tanh layers of width 16.
    pub fn default_for_lags(lags: usize) -> Self {
        NarxSpec {
            input_lags: lags,
            output_lags: lags,
            hidden: vec![16, 16],
            activation: Activation::Tanh,
        }
    }

    fn regressor_width(&self) -> usize {
        self.input_lags + self.output_lags
    }

    fn max_lag(&self) -> usize {
        self.input_lags.saturating_sub(1).max(self.output_lags)
    }
}

impl Default for NarxSpec {
    fn default() -> Self {
        NarxSpec::default_for_lags(20)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NarxModel {
    input_lags: usize,
    output_lags: usize,
    layers: Vec<Layer>,
    trend: TrendStats,
}

/// Initial lag buffers, most recent sample first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    /// `u(-1), u(-2), …`, length `n_u - 1`.
    pub inputs: Vec<f64>,
    /// `y(-1), y(-2), …`, length `n_y`.
    pub outputs: Vec<f64>,
}

impl History {
    pub fn zeros(model: &NarxModel) -> Self {
        History {
            inputs: vec![0.0; model.input_lags.saturating_sub(1)],
            outputs: vec![0.0; model.output_lags],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SimMode<'a> {
    /// Series-parallel: lags read from the measured outputs.
    OneStep(&'a [f64]),
    /// Parallel: predictions are fed back into the output lags.
    ClosedLoop,
}

impl NarxModel {
    /// Builds a model from explicit layers, checking the layout invariants.
    pub fn from_layers(
        input_lags: usize,
        output_lags: usize,
        layers: Vec<Layer>,
        trend: TrendStats,
    ) -> Result<Self> {
        if input_lags == 0 {
            return Err(Error::Contract("NARX needs at least the current input tap".into()));
        }
        let mut width = input_lags + output_lags;
        for (i, layer) in layers.iter().enumerate() {
            if layer.weights.ncols() != width || layer.biases.len() != layer.weights.nrows() {
                return Err(Error::Dimension(format!(
                    "layer {i} expects {} inputs with {} biases; previous width is {width}",
                    layer.weights.ncols(),
                    layer.biases.len()
                )));
            }
            if layer.weights.iter().chain(layer.biases.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("weights of layer {i}")));
            }
            width = layer.weights.nrows();
        }
        match layers.last() {
            Some(last) if width == 1 && last.activation == Activation::Linear => {}
            _ => {
                return Err(Error::Contract(
                    "final layer must have width 1 and linear activation".into(),
                ))
            }
        }
        trend.validate()?;
        Ok(NarxModel {
            input_lags,
            output_lags,
            layers,
            trend,
        })
    }

    /// Glorot-uniform initialization from `seed`.
    pub fn initialize(spec: &NarxSpec, trend: TrendStats, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![spec.regressor_width()];
        widths.extend(&spec.hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let activation = if i + 2 == widths.len() {
                    Activation::Linear
                } else {
                    spec.activation
                };
                Layer {
                    weights: DMatrix::from_fn(fan_out, fan_in, |_, _| {
                        rng.random_range(-limit..limit)
                    }),
                    biases: DVector::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        NarxModel::from_layers(spec.input_lags, spec.output_lags, layers, trend)
    }

    pub fn input_lags(&self) -> usize {
        self.input_lags
    }

    pub fn output_lags(&self) -> usize {
        self.output_lags
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn trend(&self) -> &TrendStats {
        &self.trend
    }

    /// Widths of every layer, ending with the scalar output.
    pub fn layer_widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weights.nrows()).collect()
    }

    fn spec(&self) -> NarxSpec {
        NarxSpec {
            input_lags: self.input_lags,
            output_lags: self.output_lags,
            hidden: self.layer_widths()[..self.layers.len() - 1].to_vec(),
            activation: self
                .layers
                .first()
                .map_or(Activation::Linear, |l| l.activation),
        }
    }

    /// Network output for a batch of regressors, one per column.
    pub fn predict_batch(&self, regressors: &DMatrix<f64>) -> DVector<f64> {
        let mut a = regressors.clone();
        for layer in &self.layers {
            a = layer.forward(&a);
        }
        DVector::from_iterator(a.ncols(), a.row(0).iter().copied())
    }

    pub fn predict(&self, regressor: &[f64]) -> f64 {
        let mut a = DVector::from_column_slice(regressor);
        for layer in &self.layers {
            let mut z = &layer.weights * &a + &layer.biases;
            z.apply(|v| *v = layer.activation.apply(*v));
            a = z;
        }
        a[0]
    }

    /// Runs the network over `u_n`; see [`SimMode`].
    pub fn simulate(&self, u_n: &[f64], history: &History, mode: SimMode<'_>) -> Result<Vec<f64>> {
        if history.inputs.len() != self.input_lags - 1 || history.outputs.len() != self.output_lags
        {
            return Err(Error::Dimension(format!(
                "history holds {} inputs and {} outputs, model needs {} and {}",
                history.inputs.len(),
                history.outputs.len(),
                self.input_lags - 1,
                self.output_lags
            )));
        }
        if let SimMode::OneStep(y) = mode {
            if y.len() != u_n.len() {
                return Err(Error::Dimension(format!(
                    "{} measured outputs for {} inputs",
                    y.len(),
                    u_n.len()
                )));
            }
        }
        let mut regressor = vec![0.0; self.input_lags + self.output_lags];
        let mut out = Vec::with_capacity(u_n.len());
        for t in 0..u_n.len() {
            for i in 0..self.input_lags {
                regressor[i] = if i <= t {
                    u_n[t - i]
                } else {
                    history.inputs[i - t - 1]
                };
            }
            for i in 1..=self.output_lags {
                regressor[self.input_lags + i - 1] = if i <= t {
                    match mode {
                        SimMode::OneStep(y) => y[t - i],
                        SimMode::ClosedLoop => out[t - i],
                    }
                } else {
                    history.outputs[i - t - 1]
                };
            }
            let y = self.predict(&regressor);
            if !y.is_finite() {
                return Err(Error::Divergence { step: t });
            }
            out.push(y);
        }
        Ok(out)
    }

    /// Closed-loop response from zero history, in normalized units.
    pub fn closed_loop(&self, u_n: &[f64]) -> Result<Vec<f64>> {
        self.simulate(u_n, &History::zeros(self), SimMode::ClosedLoop)
    }
}

impl IoSource for NarxModel {
    fn respond(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.closed_loop(u)
    }
}

/// Regressor of `segment` at time `t` using measured outputs, zero before the start.
fn regressor_at(seg: &Segment, t: usize, input_lags: usize, output_lags: usize, out: &mut [f64]) {
    for i in 0..input_lags {
        out[i] = if i <= t { seg.u[t - i] } else { 0.0 };
    }
    for i in 1..=output_lags {
        out[input_lags + i - 1] = if i <= t { seg.y[t - i] } else { 0.0 };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after each epoch.
    pub lr_decay: f64,
    pub min_learning_rate: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub split: ValidationSplit,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// L2 penalty on weights (not biases), added to the gradient.
    pub weight_decay: f64,
}

/// Which windows are held out for validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationSplit {
    /// A random subset of all windows.
    #[default]
    Shuffled,
    /// The trailing part of every segment.
    Tail,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 32,
            learning_rate: 3e-3,
            lr_decay: 0.99,
            min_learning_rate: 1e-5,
            seed: 0,
            validation_fraction: 0.2,
            split: ValidationSplit::default(),
            patience: 100,
            weight_decay: 1e-4,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.learning_rate > 0.0
            && self.lr_decay > 0.0
            && self.min_learning_rate > 0.0
            && self.patience > 0
            && self.weight_decay >= 0.0
            && self.validation_fraction > 0.0
            && self.validation_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub initial_validation_mse: f64,
    pub train_mse: f64,
    pub validation_mse: f64,
    /// Per-epoch `(train, validation)` MSE.
    pub history: Vec<(f64, f64)>,
    /// RMS closed-loop error over the first (measured) training segment.
    pub closed_loop_rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNarx {
    pub model: NarxModel,
    pub report: TrainReport,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    fn update<'a>(&mut self, params: impl Iterator<Item = (&'a mut f64, f64)>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (k, (p, g)) in params.enumerate() {
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * g;
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

fn parameter_count(model: &NarxModel) -> usize {
    model
        .layers
        .iter()
        .map(|l| l.weights.len() + l.biases.len())
        .sum()
}

/// Mean squared one-step error and gradients for one minibatch.
fn loss_and_gradients(model: &NarxModel, x: &DMatrix<f64>, target: &[f64]) -> (f64, Vec<(DMatrix<f64>, DVector<f64>)>) {
    let batch = x.ncols() as f64;
    let mut activations = vec![x.clone()];
    for layer in &model.layers {
        let next = layer.forward(activations.last().expect("input present"));
        activations.push(next);
    }
    let output = activations.last().expect("output present");
    let mut delta = DMatrix::from_fn(1, x.ncols(), |_, c| output[(0, c)] - target[c]);
    let loss = delta.iter().map(|e| e * e).sum::<f64>() / batch;
    delta *= 2.0 / batch;

    let mut grads = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate().rev() {
        let input = &activations[l];
        let gw = &delta * input.transpose();
        let gb = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
        if l > 0 {
            let mut back = layer.weights.transpose() * &delta;
            let prev_act = model.layers[l - 1].activation;
            back.zip_apply(input, |d, a| *d *= prev_act.derivative_from_output(a));
            delta = back;
        }
        grads.push((gw, gb));
    }
    grads.reverse();
    (loss, grads)
}

fn dataset_mse(model: &NarxModel, x: &DMatrix<f64>, target: &[f64]) -> f64 {
    if target.is_empty() {
        return 0.0;
    }
    let pred = model.predict_batch(x);
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / target.len() as f64
}

fn gather(
    series: &TrainingSeries,
    positions: &[(usize, usize)],
    spec: &NarxSpec,
) -> (DMatrix<f64>, Vec<f64>) {
    let width = spec.regressor_width();
    let mut x = DMatrix::zeros(width, positions.len());
    let mut target = Vec::with_capacity(positions.len());
    let mut buf = vec![0.0; width];
    for (c, &(s, t)) in positions.iter().enumerate() {
        let seg = &series.segments[s];
        regressor_at(seg, t, spec.input_lags, spec.output_lags, &mut buf);
        x.column_mut(c).copy_from_slice(&buf);
        target.push(seg.y[t]);
    }
    (x, target)
}

type Positions = Vec<(usize, usize)>;

fn split_windows(series: &TrainingSeries, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> (Positions, Positions) {
    let held = |len: usize| ((len as f64 * cfg.validation_fraction).round() as usize).clamp(1, len - 1);
    match cfg.split {
        ValidationSplit::Shuffled => {
            let mut positions = series.window_positions();
            positions.shuffle(rng);
            let train = positions.split_off(held(positions.len()));
            (positions, train)
        }
        ValidationSplit::Tail => {
            let (mut val, mut train) = (Vec::new(), Vec::new());
            for (s, seg) in series.segments.iter().enumerate() {
                let len = seg.u.len();
                if len < 2 {
                    train.extend((0..len).map(|t| (s, t)));
                    continue;
                }
                let cut = len - held(len);
                train.extend((0..cut).map(|t| (s, t)));
                val.extend((cut..len).map(|t| (s, t)));
            }
            (val, train)
        }
    }
}

/// Fits the network to one-step-ahead predictions (teacher forcing) with Adam
/// on shuffled minibatches, optionally with L2 weight decay. The weights with
/// the lowest validation MSE are returned; training stops after `patience`
/// epochs without improvement.
pub fn train_narx(
    series: &TrainingSeries,
    spec: &NarxSpec,
    trend: TrendStats,
    cfg: &TrainConfig,
) -> Result<TrainedNarx> {
    cfg.validate()?;
    if spec.input_lags == 0 {
        return Err(Error::Contract("NARX needs at least the current input tap".into()));
    }
    let longest = series.segments.iter().map(|s| s.u.len()).max().unwrap_or(0);
    if longest <= spec.max_lag() + 1 {
        return Err(Error::Contract(format!(
            "sequence of length {longest} is too short for {} input and {} output lags",
            spec.input_lags, spec.output_lags
        )));
    }
    for seg in &series.segments {
        if seg.u.len() != seg.y.len() {
            return Err(Error::Dimension("segment input/output lengths differ".into()));
        }
        if seg.u.iter().chain(&seg.y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training data".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (val_pos, train_pos) = split_windows(series, cfg, &mut rng);
    let (x_val, t_val) = gather(series, &val_pos, spec);
    let (x_train, t_train) = gather(series, &train_pos, spec);

    let mut model = NarxModel::initialize(spec, trend, rng.random())?;
    let initial_validation_mse = dataset_mse(&model, &x_val, &t_val);
    let mut best = model.clone();
    let mut best_val = initial_validation_mse;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut adam = Adam::new(parameter_count(&model));
    let mut lr = cfg.learning_rate;
    let mut order: Vec<usize> = (0..train_pos.len()).collect();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = DMatrix::from_fn(x_train.nrows(), chunk.len(), |r, c| x_train[(r, chunk[c])]);
            let tb: Vec<f64> = chunk.iter().map(|&i| t_train[i]).collect();
            let (loss, mut grads) = loss_and_gradients(&model, &xb, &tb);
            if !loss.is_finite() {
                return Err(Error::TrainingFailed { epoch });
            }
            if cfg.weight_decay > 0.0 {
                for (layer, (gw, _)) in model.layers.iter().zip(grads.iter_mut()) {
                    *gw += &layer.weights * (2.0 * cfg.weight_decay);
                }
            }
            let params = model.layers.iter_mut().zip(&grads).flat_map(|(layer, (gw, gb))| {
                layer
                    .weights
                    .iter_mut()
                    .zip(gw.iter().copied())
                    .chain(layer.biases.iter_mut().zip(gb.iter().copied()))
            });
            adam.update(params, lr);
        }
        lr = (lr * cfg.lr_decay).max(cfg.min_learning_rate);
        epochs_run = epoch;

        let train_mse = dataset_mse(&model, &x_train, &t_train);
        let val_mse = dataset_mse(&model, &x_val, &t_val);
        if !train_mse.is_finite() || !val_mse.is_finite() {
            return Err(Error::TrainingFailed { epoch });
        }
        history.push((train_mse, val_mse));
        if val_mse < best_val {
            best_val = val_mse;
            best = model.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= cfg.patience {
            log::debug!("early stop at epoch {epoch}, best {best_epoch}");
            break;
        }
    }

    let train_mse = dataset_mse(&best, &x_train, &t_train);
    let closed_loop_rmse = match series.segments.first() {
        Some(seg) => {
            let sim = best.closed_loop(&seg.u)?;
            (sim.iter()
                .zip(&seg.y)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / seg.y.len() as f64)
                .sqrt()
        }
        None => 0.0,
    };
    log::debug!(
        "NARX {:?}: {epochs_run} epochs, train MSE {train_mse:.3e}, validation MSE {best_val:.3e}, closed-loop RMSE {closed_loop_rmse:.3e}",
        best.spec().hidden
    );
    Ok(TrainedNarx {
        model: best,
        report: TrainReport {
            epochs_run,
            best_epoch,
            initial_validation_mse,
            train_mse,
            validation_mse: best_val,
            history,
            closed_loop_rmse,
        },
    })
}

/// Rewrites a model identified on normalized data in physical units:
/// `A' = A - (ū/σ_u) N`, `N' = N/σ_u`, `B' = B/σ_u`, `drift = -(ū/σ_u) B`,
/// `C' = σ_y C`, `y_offset = ȳ`.
pub fn denormalize_model(
    sys: &DiscreteBilinearSystem,
    trend: &TrendStats,
) -> Result<DiscreteBilinearSystem> {
    trend.validate()?;
    if !sys.is_homogeneous() {
        return Err(Error::Contract(
            "model already carries a drift or output offset".into(),
        ));
    }
    let shift = trend.u_mean / trend.u_std;
    let a = sys.a() - sys.n() * shift;
    let n = sys.n() / trend.u_std;
    let b = sys.b() / trend.u_std;
    let drift = (shift != 0.0).then(|| sys.b() * -shift);
    DiscreteBilinearSystem::new(a, n, b, sys.c() * trend.y_std)?
        .with_d(sys.d() * trend.y_std / trend.u_std)?
        .with_drift(drift)?
        .with_y_offset(trend.y_mean - sys.d() * trend.y_std * shift)?
        .with_x0(sys.x0().clone())
}

/// Mean absolute error as a percentage of the reference range:
/// `100 · mean|y_ref - y_model| / (max y_ref - min y_ref)`.
pub fn mpe(y_ref: &[f64], y_model: &[f64]) -> Result<f64> {
    if y_ref.len() != y_model.len() {
        return Err(Error::Dimension(format!(
            "reference has {} samples, model has {}",
            y_ref.len(),
            y_model.len()
        )));
    }
    if y_ref.is_empty() {
        return Err(Error::Contract("cannot score an empty trace".into()));
    }
    let max = y_ref.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = y_ref.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if !(range > 0.0) {
        return Err(Error::DegenerateSignal("reference trace has zero range".into()));
    }
    let mae = y_ref
        .iter()
        .zip(y_model)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / y_ref.len() as f64;
    Ok(100.0 * mae / range)
}

/// Version-tagged on-disk form of a [`NarxModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NarxFile {
    pub format: String,
    pub version: u32,
    pub input_lags: usize,
    pub output_lags: usize,
    pub layer_widths: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Row-major weights per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub trend: TrendStats,
}

pub const NARX_FORMAT: &str = "bilinid-narx";

impl From<&NarxModel> for NarxFile {
    fn from(model: &NarxModel) -> Self {
        NarxFile {
            format: NARX_FORMAT.into(),
            version: 1,
            input_lags: model.input_lags,
            output_lags: model.output_lags,
            layer_widths: model.layer_widths(),
            activations: model.layers.iter().map(|l| l.activation).collect(),
            weights: model
                .layers
                .iter()
                .map(|l| l.weights.transpose().iter().copied().collect())
                .collect(),
            biases: model
                .layers
                .iter()
                .map(|l| l.biases.iter().copied().collect())
                .collect(),
            trend: model.trend,
        }
    }
}

impl TryFrom<NarxFile> for NarxModel {
    type Error = Error;

    fn try_from(file: NarxFile) -> Result<Self> {
        if file.format != NARX_FORMAT || file.version != 1 {
            return Err(Error::Format(format!(
                "expected {NARX_FORMAT} version 1, found {} version {}",
                file.format, file.version
            )));
        }
        let depth = file.layer_widths.len();
        if file.activations.len() != depth || file.weights.len() != depth || file.biases.len() != depth
        {
            return Err(Error::Format("layer arrays have inconsistent lengths".into()));
        }
        let mut fan_in = file.input_lags + file.output_lags;
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let fan_out = file.layer_widths[i];
            if file.weights[i].len() != fan_in * fan_out || file.biases[i].len() != fan_out {
                return Err(Error::Format(format!("layer {i} has the wrong number of weights")));
            }
            layers.push(Layer {
                weights: DMatrix::from_row_slice(fan_out, fan_in, &file.weights[i]),
                biases: DVector::from_column_slice(&file.biases[i]),
                activation: file.activations[i],
            });
            fan_in = fan_out;
        }
        NarxModel::from_layers(file.input_lags, file.output_lags, layers, file.trend)
    }
}
