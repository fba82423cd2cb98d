//! Domain tag generator: a small convolutional classifier over the three
//! tamper domains.

use std::path::Path;

use image::RgbImage;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::domain::{DomainCategory, DomainTag};
use crate::imaging::image_tensor;
use crate::loss::token_cross_entropy;
use crate::nn::{Adam, Conv2d, GradAccumulator, Graph, Init, Linear, ParamRole, ParamStore};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "tamperscope.dtg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DtgConfig {
    pub input_size: u32,
    /// Output channels of the stride-2 conv blocks.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for DtgConfig {
    fn default() -> Self {
        Self { input_size: 224, channels: vec![8, 16, 32, 32], seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DtgTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DtgTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, learning_rate: 3e-3, batch_size: 8, seed: 11 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DtgError {
    #[error("no labeled images to train on")]
    Empty,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Anything that maps an image to three domain logits.
pub trait DomainClassifier {
    fn domain_logits(&self, image: &RgbImage) -> [f64; 3];
}

/// Classifier with fixed logits, for wiring tests.
#[derive(Clone, Copy, Debug)]
pub struct FixedLogits(pub [f64; 3]);

impl DomainClassifier for FixedLogits {
    fn domain_logits(&self, _image: &RgbImage) -> [f64; 3] {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPrediction {
    pub category: DomainCategory,
    pub probs: [f64; 3],
}

impl DomainPrediction {
    pub fn tag(&self) -> DomainTag {
        DomainTag::new(self.category)
    }
}

/// Numerically stable softmax of three logits.
pub fn softmax3(logits: [f64; 3]) -> [f64; 3] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.map(|l| (l - max).exp());
    let sum: f64 = exp.iter().sum();
    exp.map(|e| e / sum)
}

/// Argmax with ties going to the lowest domain code.
pub fn argmax_domain(probs: [f64; 3]) -> DomainCategory {
    let mut best = 0;
    for i in 1..3 {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    DomainCategory::from_code(best).expect("three domains")
}

pub fn classify_domain<C: DomainClassifier + ?Sized>(model: &C, image: &RgbImage) -> DomainPrediction {
    let probs = softmax3(model.domain_logits(image));
    DomainPrediction { category: argmax_domain(probs), probs }
}

/// One labeled training image.
#[derive(Clone, Debug)]
pub struct DomainSample {
    pub image: RgbImage,
    pub domain: DomainCategory,
}

/// Conv blocks (3x3, stride 2, ReLU), global average pool, linear head.
#[derive(Clone, Debug)]
pub struct DtgModel<F: Scalar> {
    pub config: DtgConfig,
    pub weights_version: String,
    pub store: ParamStore<F>,
    blocks: Vec<Conv2d>,
    head: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DtgTrainReport {
    pub initial_loss: f64,
    /// Mean mini-batch cross-entropy of each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub single_class: bool,
}

impl<F: Scalar> DtgModel<F> {
    pub fn new(config: DtgConfig) -> Self {
        let mut store = ParamStore::new(config.seed);
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut inputs = 3;
        for (i, &out) in config.channels.iter().enumerate() {
            blocks.push(Conv2d::new(&mut store, &format!("conv.{i}"), inputs, out, 3, 2, Init::TRAINABLE_BASE));
            inputs = out;
        }
        let head = Linear::new(&mut store, "head", inputs, DomainCategory::COUNT, true, Init::TRAINABLE_BASE);
        Self { config, weights_version: "untrained".into(), store, blocks, head }
    }

    pub fn input_tensor(&self, image: &RgbImage) -> Array2<F> {
        image_tensor(image, self.config.input_size)
    }

    fn forward(&self, g: &mut Graph<'_, F>, input: Array2<F>) -> crate::autograd::Var {
        let size = self.config.input_size as usize;
        let mut x = g.constant(input);
        let (mut h, mut w) = (size, size);
        for block in &self.blocks {
            let (y, nh, nw) = block.forward(g, x, h, w);
            x = g.tape.relu(y);
            h = nh;
            w = nw;
        }
        let pooled = g.tape.mean_rows(x);
        self.head.forward(g, pooled)
    }

    fn logits_from_tensor(&self, input: Array2<F>) -> [f64; 3] {
        let mut g = Graph::inference(&self.store);
        let logits = self.forward(&mut g, input);
        let v = g.value(logits);
        [v[[0, 0]].as_f64(), v[[0, 1]].as_f64(), v[[0, 2]].as_f64()]
    }

    /// Records the weighted cross-entropy of one image on a training graph
    /// and returns its gradients and value.
    pub fn loss_and_grads(&self, input: Array2<F>, label: DomainCategory, weight: f64) -> (f64, Vec<(crate::nn::ParamId, Array2<F>)>) {
        let mut g = Graph::training(&self.store);
        let logits = self.forward(&mut g, input);
        let ce = token_cross_entropy(&mut g.tape, logits, &[Some(label.code())]).expect("label in range");
        let value = g.tape.scalar(ce).as_f64();
        let scaled = g.tape.scale(ce, F::of(weight));
        (value, g.param_grads(scaled))
    }

    fn mean_loss(&self, inputs: &[(Array2<F>, DomainCategory)]) -> (f64, f64) {
        let mut loss = 0.0;
        let mut correct = 0;
        for (input, label) in inputs {
            let logits = self.logits_from_tensor(input.clone());
            let probs = softmax3(logits);
            loss -= probs[label.code()].max(f64::MIN_POSITIVE).ln();
            correct += usize::from(argmax_domain(probs) == *label);
        }
        let n = inputs.len() as f64;
        (loss / n, correct as f64 / n)
    }

    pub fn checkpoint(&self) -> Checkpoint<DtgConfig> {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: crate::checkpoint::CHECKPOINT_VERSION,
            weights_version: self.weights_version.clone(),
            config: self.config.clone(),
            base_checksum: None,
            tensors: self.store.snapshot(&[ParamRole::Base, ParamRole::Head]),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<DtgConfig>) -> Result<Self, DtgError> {
        let mut model = Self::new(ckpt.config.clone());
        model.store.restore(&[ParamRole::Base, ParamRole::Head], &ckpt.tensors).map_err(CheckpointError::from)?;
        model.weights_version = ckpt.weights_version.clone();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), DtgError> {
        Ok(self.checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, DtgError> {
        Self::from_checkpoint(&Checkpoint::load(path, CHECKPOINT_FORMAT)?)
    }
}

impl<F: Scalar> DomainClassifier for DtgModel<F> {
    fn domain_logits(&self, image: &RgbImage) -> [f64; 3] {
        self.logits_from_tensor(self.input_tensor(image))
    }
}

/// Trains every weight with cross-entropy on the domain labels.
pub fn train_dtg<F: Scalar>(model: &mut DtgModel<F>, samples: &[DomainSample], config: &DtgTrainConfig) -> Result<DtgTrainReport, DtgError> {
    if samples.is_empty() {
        return Err(DtgError::Empty);
    }
    let single_class = samples.iter().all(|s| s.domain == samples[0].domain);
    if single_class {
        tracing::warn!(domain = %samples[0].domain, "domain classifier training set holds a single class");
    }
    let inputs: Vec<(Array2<F>, DomainCategory)> = samples.iter().map(|s| (model.input_tensor(&s.image), s.domain)).collect();
    let (initial_loss, _) = model.mean_loss(&inputs);
    let mut optimizer = Adam::new(F::of(config.learning_rate)).with_clip(Some(F::of(5.0)));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let batch = config.batch_size.max(1);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut acc = GradAccumulator::new();
            for &i in chunk {
                let (loss, grads) = model.loss_and_grads(inputs[i].0.clone(), inputs[i].1, 1.0);
                total += loss;
                acc.add(grads);
            }
            optimizer.step(&mut model.store, acc.drain_mean());
        }
        let mean = total / inputs.len() as f64;
        tracing::info!(epoch, loss = mean, "domain classifier epoch");
        epoch_losses.push(mean);
    }
    let (final_loss, final_accuracy) = model.mean_loss(&inputs);
    model.weights_version = format!("dtg-{}", &model.store.checksum(ParamRole::Base)[..12]);
    Ok(DtgTrainReport { initial_loss, epoch_losses, final_loss, final_accuracy, single_class })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_logits_pick_photoshop() {
        let img = RgbImage::new(4, 4);
        let p = classify_domain(&FixedLogits([10.0, 0.0, 0.0]), &img);
        assert_eq!(p.category, DomainCategory::Photoshop);
        assert!((p.probs[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn uniform_logits_tie_break_to_lowest_code() {
        let img = RgbImage::new(4, 4);
        let p = classify_domain(&FixedLogits([0.0, 0.0, 0.0]), &img);
        assert_eq!(p.category, DomainCategory::Photoshop);
        for v in p.probs {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = classify_domain(&FixedLogits([0.0, 2.0, 2.0]), &img);
        assert_eq!(p.category, DomainCategory::Deepfake);
    }

    #[test]
    fn model_emits_three_logits() {
        let model = DtgModel::<f32>::new(DtgConfig { input_size: 32, ..DtgConfig::default() });
        let logits = model.domain_logits(&RgbImage::from_pixel(40, 30, image::Rgb([10, 200, 30])));
        assert!(logits.iter().all(|l| l.is_finite()));
    }
}
