//! The base classifier: softmax regression or a one-hidden-layer ReLU network.
//!
//! Inputs are flattened, channel-major pixel vectors and may contain negative
//! values (flow noise can push mass below zero). They are multiplied by a
//! fixed `input_scale`, by default the pixel count, so that a uniform image has
//! unit-sized entries.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::flow::ImageShape;
use crate::noise::{perturb, NoiseSpec};
use crate::rng::{phase, SeedStream};
use crate::{Error, Result};

/// Anything that maps an input vector to class scores.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    fn input_len(&self) -> usize;

    /// Probability vector over classes.
    fn scores(&self, input: &[f64]) -> Vec<f64>;

    /// Hard decision; ties go to the lowest class index.
    fn predict(&self, input: &[f64]) -> usize {
        argmax(&self.scores(input))
    }
}

/// A classifier whose scores can be differentiated with respect to the input.
pub trait DifferentiableClassifier: Classifier {
    /// Scores and the gradient of `scores[class]` with respect to the input.
    fn score_gradient(&self, input: &[f64], class: usize) -> (Vec<f64>, Vec<f64>);
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Always answers the same class with probability 1.
#[derive(Clone, Debug)]
pub struct ConstantClassifier {
    pub class: usize,
    pub num_classes: usize,
    pub input_len: usize,
}

impl Classifier for ConstantClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_len(&self) -> usize {
        self.input_len
    }

    fn scores(&self, _input: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.num_classes];
        s[self.class] = 1.0;
        s
    }
}

impl DifferentiableClassifier for ConstantClassifier {
    fn score_gradient(&self, input: &[f64], _class: usize) -> (Vec<f64>, Vec<f64>) {
        (self.scores(input), vec![0.0; input.len()])
    }
}

/// An affine layer, `out = weights * in + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(outputs: usize, inputs: usize) -> Self {
        Dense {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }
}

/// Parameter-shaped gradient, one entry per layer.
pub type Gradient = Vec<Dense>;

/// Parameters of the base classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub input_shape: ImageShape,
    pub input_scale: f64,
    pub layers: Vec<Dense>,
}

struct Cache {
    /// Inputs to each layer (scaled input first).
    inputs: Vec<Array1<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Array1<f64>>,
    logits: Array1<f64>,
}

impl Network {
    /// All-zero parameters. `hidden = 0` gives softmax regression.
    pub fn zeros(input_shape: ImageShape, hidden: usize, num_classes: usize) -> Self {
        let d = input_shape.input_len();
        let layers = if hidden == 0 {
            vec![Dense::zeros(num_classes, d)]
        } else {
            vec![Dense::zeros(hidden, d), Dense::zeros(num_classes, hidden)]
        };
        Network {
            input_shape,
            input_scale: input_shape.pixels() as f64,
            layers,
        }
    }

    /// He-initialized hidden layers; the output layer starts at zero.
    pub fn init(input_shape: ImageShape, hidden: usize, num_classes: usize, seed: SeedStream) -> Self {
        let mut net = Self::zeros(input_shape, hidden, num_classes);
        if hidden > 0 {
            let mut rng = seed.child(phase::INIT).rng();
            let fan_in = input_shape.input_len() as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            net.layers[0].weights.mapv_inplace(|_| normal.sample(&mut rng));
            let out_normal = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("valid std");
            net.layers[1].weights.mapv_inplace(|_| out_normal.sample(&mut rng));
        }
        net
    }

    pub fn hidden_width(&self) -> usize {
        if self.layers.len() > 1 {
            self.layers[0].bias.len()
        } else {
            0
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_shape.input_len() {
            return Err(Error::dims(self.input_shape.input_len(), input.len()));
        }
        if !input.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    fn run(&self, input: &[f64]) -> Cache {
        let mut a = Array1::from_iter(input.iter().map(|v| v * self.input_scale));
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.weights.dot(&a) + &layer.bias;
            inputs.push(a);
            if k == last {
                return Cache {
                    inputs,
                    pre,
                    logits: z,
                };
            }
            a = z.mapv(|v| v.max(0.0));
            pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Backpropagates `dlogits`, returning parameter and input gradients.
    fn backward(&self, cache: &Cache, dlogits: Array1<f64>) -> (Gradient, Vec<f64>) {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut dz = dlogits;
        for k in (0..self.layers.len()).rev() {
            let a = &cache.inputs[k];
            let dw = Array2::from_shape_fn((dz.len(), a.len()), |(r, c)| dz[r] * a[c]);
            grads.push(Dense {
                weights: dw,
                bias: dz.clone(),
            });
            let da = self.layers[k].weights.t().dot(&dz);
            dz = if k > 0 {
                let z = &cache.pre[k - 1];
                Array1::from_iter(da.iter().zip(z.iter()).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }))
            } else {
                da
            };
        }
        grads.reverse();
        let dinput = dz.iter().map(|g| g * self.input_scale).collect();
        (grads, dinput)
    }

    /// Class probabilities for one input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        Ok(softmax(self.run(input).logits.as_slice().expect("contiguous")))
    }

    /// Cross-entropy loss `-ln score[label]`.
    pub fn loss(&self, input: &[f64], label: usize) -> Result<f64> {
        self.check_label(label)?;
        let logits = self.run(input).logits;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(lse - logits[label])
    }

    fn check_label(&self, label: usize) -> Result<()> {
        let k = self.num_classes();
        if label >= k {
            return Err(Error::InvalidArgument(format!("label {label} outside 0..{k}")));
        }
        Ok(())
    }

    /// Gradient of the cross-entropy loss with respect to every parameter.
    pub fn gradient(&self, input: &[f64], label: usize) -> Result<Gradient> {
        self.check_input(input)?;
        self.check_label(label)?;
        let cache = self.run(input);
        let mut dlogits = Array1::from(softmax(cache.logits.as_slice().expect("contiguous")));
        dlogits[label] -= 1.0;
        Ok(self.backward(&cache, dlogits).0)
    }

    /// Mean gradient over several samples.
    pub fn batch_gradient(&self, inputs: &[Vec<f64>], labels: &[usize]) -> Result<(Gradient, f64)> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::dims(inputs.len(), labels.len()));
        }
        let mut acc: Gradient = self
            .layers
            .iter()
            .map(|l| Dense::zeros(l.weights.nrows(), l.weights.ncols()))
            .collect();
        let mut loss = 0.0;
        for (x, &y) in inputs.iter().zip(labels) {
            loss += self.loss(x, y)?;
            for (a, g) in acc.iter_mut().zip(self.gradient(x, y)?) {
                a.weights += &g.weights;
                a.bias += &g.bias;
            }
        }
        let scale = 1.0 / inputs.len() as f64;
        for a in &mut acc {
            a.weights *= scale;
            a.bias *= scale;
        }
        Ok((acc, loss * scale))
    }

    /// Flattened parameters, layer by layer: weights row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dims(self.num_params(), flat.len()));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().expect("length checked"));
            l.bias.iter_mut().for_each(|b| *b = it.next().expect("length checked"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, config: Option<&TrainConfig>) -> Result<()> {
        let ckpt = Checkpoint::from_network(self, config.cloned());
        fs::write(path, serde_json::to_string_pretty(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<TrainConfig>)> {
        let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        ckpt.into_network()
    }
}

impl Classifier for Network {
    fn num_classes(&self) -> usize {
        self.layers.last().expect("output layer").bias.len()
    }

    fn input_len(&self) -> usize {
        self.input_shape.input_len()
    }

    fn scores(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_len());
        softmax(self.run(input).logits.as_slice().expect("contiguous"))
    }
}

impl DifferentiableClassifier for Network {
    fn score_gradient(&self, input: &[f64], class: usize) -> (Vec<f64>, Vec<f64>) {
        let cache = self.run(input);
        let p = softmax(cache.logits.as_slice().expect("contiguous"));
        // d p_c / d logit_j = p_c (1[j = c] - p_j)
        let dlogits = Array1::from_iter(
            p.iter()
                .enumerate()
                .map(|(j, pj)| p[class] * (if j == class { 1.0 } else { 0.0 } - pj)),
        );
        let (_, dinput) = self.backward(&cache, dlogits);
        (p, dinput)
    }
}

pub const CHECKPOINT_FORMAT: &str = "wsmooth-network";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    outputs: usize,
    inputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// On-disk checkpoint: a JSON object with the format tag, version, input
/// shape, input scale, row-major layer parameters and the training config.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    input_shape: ImageShape,
    input_scale: f64,
    layers: Vec<LayerRecord>,
    train_config: Option<TrainConfig>,
}

impl Checkpoint {
    fn from_network(net: &Network, train_config: Option<TrainConfig>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            input_shape: net.input_shape,
            input_scale: net.input_scale,
            layers: net
                .layers
                .iter()
                .map(|l| LayerRecord {
                    outputs: l.weights.nrows(),
                    inputs: l.weights.ncols(),
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            train_config,
        }
    }

    fn into_network(self) -> Result<(Network, Option<TrainConfig>)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut expected_in = self.input_shape.input_len();
        let mut layers = Vec::new();
        for rec in self.layers {
            if rec.inputs != expected_in || rec.bias.len() != rec.outputs {
                return Err(Error::Checkpoint("inconsistent layer shapes".into()));
            }
            let weights = Array2::from_shape_vec((rec.outputs, rec.inputs), rec.weights)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            expected_in = rec.outputs;
            layers.push(Dense {
                weights,
                bias: Array1::from(rec.bias),
            });
        }
        if layers.is_empty() || layers.len() > 2 {
            return Err(Error::Checkpoint(format!("expected 1 or 2 layers, got {}", layers.len())));
        }
        let net = Network {
            input_shape: self.input_shape,
            input_scale: self.input_scale,
            layers,
        };
        if !net.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok((net, self.train_config))
    }
}

/// Which noise the base classifier sees during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Flow,
    Pixel,
    None,
}

/// Piecewise-constant learning rate: `rate` applies from `from_epoch` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub from_epoch: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: Vec<LrStep>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Standard deviation of the training noise.
    pub sigma: f64,
    /// Hidden width; 0 trains softmax regression.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            lr_schedule: vec![LrStep {
                from_epoch: 0,
                rate: 0.001,
            }],
            momentum: 0.9,
            weight_decay: 0.0005,
            sigma: 0.0,
            hidden: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|s| s.from_epoch <= epoch)
            .max_by_key(|s| s.from_epoch)
            .or(self.lr_schedule.first())
            .map_or(0.001, |s| s.rate)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.epochs > 0
            && self.batch_size > 0
            && self.momentum >= 0.0
            && self.weight_decay >= 0.0
            && self.sigma >= 0.0
            && !self.lr_schedule.is_empty()
            && self.lr_schedule.iter().all(|s| s.rate > 0.0);
        if positive {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training config {self:?}")))
        }
    }
}

/// Mean training loss of every epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Trains with minibatch SGD with momentum and L2 weight penalty.
///
/// Every image is seen once per epoch. With a noise mode other than `None`,
/// one noise draw is shared by all images of a batch.
pub fn train(dataset: &LabeledDataset, config: &TrainConfig, mode: NoiseMode) -> Result<(Network, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let shape = dataset.shape();
    let seed = SeedStream::new(config.seed);
    let mut net = Network::init(shape, config.hidden, dataset.num_classes(), seed);
    let noise = match mode {
        NoiseMode::Flow => Some(NoiseSpec::flow(config.sigma)?),
        NoiseMode::Pixel => Some(NoiseSpec::pixel(config.sigma)?),
        NoiseMode::None => None,
    };

    let mut velocity: Vec<Dense> = net
        .layers
        .iter()
        .map(|l| Dense::zeros(l.weights.nrows(), l.weights.ncols()))
        .collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = seed.child(phase::TRAIN_SHUFFLE).rng();
    let noise_seed = seed.child(phase::TRAIN_NOISE);
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = config.learning_rate(epoch);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let draw = noise.map(|spec| {
                let mut rng = noise_seed.child(epoch as u64).rng_at(b as u64);
                spec.sample(shape, &mut rng)
            });
            let inputs = batch
                .iter()
                .map(|&i| match &draw {
                    Some(d) => perturb(&dataset.images()[i], d),
                    None => Ok(dataset.images()[i].flatten()),
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.labels()[i]).collect();
            let (grad, loss) = net.batch_gradient(&inputs, &labels)?;
            epoch_loss += loss * batch.len() as f64;

            for ((layer, v), g) in net.layers.iter_mut().zip(&mut velocity).zip(&grad) {
                v.weights *= config.momentum;
                v.weights += &g.weights;
                v.weights.scaled_add(config.weight_decay, &layer.weights);
                v.bias *= config.momentum;
                v.bias += &g.bias;
                v.bias.scaled_add(config.weight_decay, &layer.bias);
                layer.weights.scaled_add(-lr, &v.weights);
                layer.bias.scaled_add(-lr, &v.bias);
            }
        }
        report.epoch_losses.push(epoch_loss / dataset.len() as f64);
    }
    if !net.is_finite() {
        return Err(Error::InvalidArgument("training diverged to non-finite parameters".into()));
    }
    Ok((net, report))
}

/// Fraction of images whose clean input is classified correctly.
pub fn accuracy<C: Classifier + ?Sized>(classifier: &C, dataset: &LabeledDataset) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    let correct = dataset
        .images()
        .iter()
        .zip(dataset.labels())
        .filter(|(x, &y)| classifier.predict(&x.flatten()) == y)
        .count();
    correct as f64 / dataset.len() as f64
}

/// Fills every parameter with draws from `N(0, scale^2)`.
pub fn randomize<R: Rng + ?Sized>(net: &mut Network, scale: f64, rng: &mut R) {
    let normal = Normal::new(0.0, scale).expect("valid std");
    for l in &mut net.layers {
        l.weights.mapv_inplace(|_| normal.sample(rng));
        l.bias.mapv_inplace(|_| normal.sample(rng));
    }
}
