//! Tag-conditioned explainable detector: image tokens, domain tag and
//! instruction go into a decoder-only language model that writes the
//! three-section description.

use std::path::Path;

use image::RgbImage;
use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{fingerprint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
use crate::description::{fallback_verdict, parse_description, OutputFlag, StructuredDescription};
use crate::domain::{DomainCategory, DomainTag};
use crate::dtg::DtgModel;
use crate::generate::{generate, GenerationConfig, NextTokenModel};
use crate::loss::{detection_loss_on, DetectionLoss, LossError};
use crate::nn::{Adam, AdapterConfig, GradAccumulator, Graph, Init, LanguageModel, LmConfig, LrSchedule, ParamId, ParamRole, ParamStore};
use crate::prompt::{embed_sequence, CachedDecoder, PromptError, PromptLayout, Turn};
use crate::scalar::Scalar;
use crate::tokenizer::{ByteTokenizer, TokenId};
use crate::vision::{Projector, VisionConfig, VisionEncoder};

pub const CHECKPOINT_FORMAT: &str = "tamperscope.detector";

/// Instruction used when none is given.
pub const DEFAULT_INSTRUCTION: &str = "Can you identify manipulated areas in the photograph?";

pub fn default_instructions() -> Vec<String> {
    [
        DEFAULT_INSTRUCTION,
        "Is this picture edited? Explain where and why.",
        "Examine this image for signs of tampering.",
        "Has any region of this photo been manipulated?",
        "Check whether this image is authentic and justify the answer.",
        "Point out any forged content in this image.",
        "Does this photograph show traces of editing?",
        "Analyze this image for forgery and describe the evidence.",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the domain-tag cross-entropy when a tag classifier trains
    /// jointly.
    pub lambda: f64,
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self { epochs: 50, learning_rate: 1e-2, batch_size: 2, lambda: 1.0, grad_clip: Some(5.0), schedule: LrSchedule::Cosine, seed: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Seed of the frozen base weights.
    pub seed: u64,
    pub vision: VisionConfig,
    pub lm: LmConfig,
    pub adapter: AdapterConfig,
    pub use_domain_tag: bool,
    pub train_projector: bool,
    pub instructions: Vec<String>,
    pub generation: GenerationConfig,
    pub train: DetectorTrainConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            vision: VisionConfig::default(),
            lm: LmConfig { vocab: ByteTokenizer::VOCAB_SIZE, d_model: 64, layers: 4, heads: 4, d_ff: 256, max_len: 512, position_std: 0.1 },
            adapter: AdapterConfig {
                rank: 8,
                alpha: 16.0,
                target_layers: ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down", "head"].map(String::from).to_vec(),
            },
            use_domain_tag: true,
            train_projector: true,
            instructions: default_instructions(),
            generation: GenerationConfig::default(),
            train: DetectorTrainConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("no training samples")]
    Empty,
    #[error("training sample {0} has no description")]
    MissingDescription(usize),
    #[error("instruction pool is empty")]
    NoInstructions,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Generated description with its raw text and any fallback flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutput {
    pub raw_text: String,
    pub description: StructuredDescription,
    pub flags: Vec<OutputFlag>,
}

impl DetectionOutput {
    /// Parses `raw_text`; an unparseable answer keeps its text and gets a
    /// stem-based verdict flagged low-confidence.
    pub fn from_text(raw_text: String, finished: bool) -> Self {
        let mut flags = Vec::new();
        if !finished {
            flags.push(OutputFlag::Truncated);
        }
        let description = match parse_description(&raw_text) {
            Ok(d) => d,
            Err(_) => {
                flags.push(OutputFlag::LowConfidence);
                StructuredDescription { verdict: fallback_verdict(&raw_text), location_text: String::new(), basis_text: String::new() }
            }
        };
        Self { raw_text, description, flags }
    }
}

/// One supervised example.
#[derive(Clone, Debug)]
pub struct DetectionSample {
    pub image: RgbImage,
    pub domain: DomainCategory,
    pub description: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub text: f64,
    pub tag: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorTrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<EpochLoss>,
    pub final_loss: f64,
    pub base_checksum_before: String,
    pub base_checksum_after: String,
}

#[derive(Clone, Debug)]
pub struct Detector<F: Scalar> {
    pub config: DetectorConfig,
    pub store: ParamStore<F>,
    pub weights_version: String,
    vision: VisionEncoder,
    projector: Projector,
    pub lm: LanguageModel,
}

struct Prepared<F> {
    features: Array2<F>,
    tag: DomainTag,
    answer: Vec<TokenId>,
    domain: DomainCategory,
    image: RgbImage,
}

impl<F: Scalar> Detector<F> {
    pub fn new(config: DetectorConfig) -> Self {
        let mut store = ParamStore::new(config.seed);
        let vision = VisionEncoder::new(&mut store, "", config.vision.clone());
        let lm = LanguageModel::new(&mut store, "lm.", config.lm.clone(), Init::FROZEN_BASE, &config.adapter);
        let projector = Projector::new(
            &mut store,
            "",
            config.vision.width,
            config.lm.d_model,
            Init { role: ParamRole::Head, trainable: config.train_projector },
        );
        Self { config, store, weights_version: "untrained".into(), vision, projector, lm }
    }

    pub fn image_features(&self, image: &RgbImage) -> Array2<F> {
        self.vision.features(&self.store, image)
    }

    /// Projected image tokens, `n_image_tokens x d_model`.
    pub fn encode_image(&self, image: &RgbImage) -> Array2<F> {
        let mut g = Graph::inference(&self.store);
        let t = self.projector.forward(&mut g, self.image_features(image));
        g.value(t).clone()
    }

    /// `[BOS][IMG..][tag][history][question][ANSWER]`; the tag is dropped
    /// when the model was configured without domain tags.
    pub fn layout(&self, tag: Option<&DomainTag>, history: &[Turn], question: &str) -> Result<PromptLayout, PromptError> {
        let tok = ByteTokenizer;
        let tag_ids = tag.filter(|_| self.config.use_domain_tag).map(|t| tok.encode(&t.sentence));
        let segments: Vec<&[TokenId]> = tag_ids.iter().map(Vec::as_slice).collect();
        PromptLayout::build(self.config.vision.tokens(), &segments, history, &tok.encode(question))
    }

    pub fn decoder<'a>(&'a self, image_tokens: &'a Array2<F>, layout: &'a PromptLayout, adapters: bool) -> PromptedDecoder<'a, F> {
        let cached = CachedDecoder::new(&self.lm, &self.store, layout, Some(image_tokens.clone()), adapters);
        PromptedDecoder { model: self, image_tokens, layout, adapters, cached }
    }

    pub fn generate_detection(&self, image_tokens: &Array2<F>, layout: &PromptLayout, config: &GenerationConfig, adapters: bool) -> DetectionOutput {
        let out = generate(&self.decoder(image_tokens, layout, adapters), config);
        DetectionOutput::from_text(ByteTokenizer.decode(&out.tokens), out.finished)
    }

    /// Full detection for one image with its (predicted) domain tag.
    pub fn detect(&self, image: &RgbImage, tag: &DomainTag, instruction: &str) -> Result<DetectionOutput, DetectorError> {
        let tokens = self.encode_image(image);
        let layout = self.layout(Some(tag), &[], instruction)?;
        Ok(self.generate_detection(&tokens, &layout, &self.config.generation, true))
    }

    /// Answers `question` given the finished turns of a conversation.
    pub fn answer(&self, image_tokens: &Array2<F>, tag: &DomainTag, history: &[Turn], question: &str) -> Result<String, DetectorError> {
        let mut history = history.to_vec();
        let mut layout = self.layout(Some(tag), &history, question)?;
        let budget = self.config.generation.max_new_tokens;
        while layout.len() + budget > self.config.lm.max_len && history.len() > 1 {
            // keep the first turn, which holds the original description
            history.remove(1);
            layout = self.layout(Some(tag), &history, question)?;
        }
        let out = generate(&self.decoder(image_tokens, &layout, true), &self.config.generation);
        Ok(ByteTokenizer.decode(&out.tokens))
    }

    fn prepare(&self, samples: &[DetectionSample]) -> Result<Vec<Prepared<F>>, DetectorError> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if s.description.trim().is_empty() {
                    return Err(DetectorError::MissingDescription(i));
                }
                Ok(Prepared {
                    features: self.image_features(&s.image),
                    tag: DomainTag::new(s.domain),
                    answer: ByteTokenizer.encode(&s.description),
                    domain: s.domain,
                    image: s.image.clone(),
                })
            })
            .collect()
    }

    /// Text loss of one sample; gradients only with `track`.
    fn text_loss(&self, p: &Prepared<F>, instruction: &str, track: bool) -> Result<(f64, Vec<(ParamId, Array2<F>)>), DetectorError> {
        let layout = self.layout(Some(&p.tag), &[], instruction)?;
        let (ids, targets) = layout.training_pair(&p.answer);
        let mut g = if track { Graph::training(&self.store) } else { Graph::inference(&self.store) };
        let img = self.projector.forward(&mut g, p.features.clone());
        let emb = embed_sequence(&mut g, &self.lm, &ids, &layout.image_span, Some(img))?;
        let out = self.lm.forward_with_prefix(&mut g, emb, layout.image_span.end);
        let (loss, breakdown): (_, DetectionLoss<F>) = detection_loss_on(&mut g.tape, out.logits, &targets, None, self.config.train.lambda)?;
        let grads = if track { g.param_grads(loss) } else { Vec::new() };
        Ok((breakdown.text.as_f64(), grads))
    }

    fn mean_text_loss(&self, prepared: &[Prepared<F>]) -> Result<f64, DetectorError> {
        let pool = &self.config.instructions;
        let mut total = 0.0;
        for (i, p) in prepared.iter().enumerate() {
            total += self.text_loss(p, &pool[i % pool.len()], false)?.0;
        }
        Ok(total / prepared.len() as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint<DetectorConfig> {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            weights_version: self.weights_version.clone(),
            config: self.config.clone(),
            base_checksum: Some(self.store.checksum(ParamRole::Base)),
            tensors: self.store.snapshot(&[ParamRole::Adapter, ParamRole::Head]),
        }
    }

    /// Regenerates the frozen base from the stored seed and loads the deltas.
    pub fn from_checkpoint(ckpt: &Checkpoint<DetectorConfig>) -> Result<Self, DetectorError> {
        let mut model = Self::new(ckpt.config.clone());
        if let Some(expected) = &ckpt.base_checksum {
            if *expected != model.store.checksum(ParamRole::Base) {
                return Err(CheckpointError::BaseMismatch.into());
            }
        }
        model.store.restore(&[ParamRole::Adapter, ParamRole::Head], &ckpt.tensors).map_err(CheckpointError::from)?;
        model.weights_version = ckpt.weights_version.clone();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        Ok(self.checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        Self::from_checkpoint(&Checkpoint::load(path, CHECKPOINT_FORMAT)?)
    }
}

/// A detector bound to one prompt, usable by [`generate`].
pub struct PromptedDecoder<'a, F: Scalar> {
    model: &'a Detector<F>,
    image_tokens: &'a Array2<F>,
    layout: &'a PromptLayout,
    adapters: bool,
    cached: CachedDecoder<'a, F>,
}

impl<F: Scalar> PromptedDecoder<'_, F> {
    /// Logits of every position for `prompt ++ generated`, recomputed from
    /// scratch; generation uses the incremental path instead.
    pub fn logits(&self, generated: &[TokenId]) -> Option<Array2<F>> {
        let mut ids = self.layout.ids.clone();
        ids.extend_from_slice(generated);
        let mut g = Graph::inference(&self.model.store);
        if !self.adapters {
            g = g.without_adapters();
        }
        let img = g.constant(self.image_tokens.clone());
        let emb = embed_sequence(&mut g, &self.model.lm, &ids, &self.layout.image_span, Some(img)).ok()?;
        let out = self.model.lm.forward_with_prefix(&mut g, emb, self.layout.image_span.end);
        Some(g.value(out.logits).clone())
    }
}

impl<F: Scalar> NextTokenModel for PromptedDecoder<'_, F> {
    fn next_logits(&self, generated: &[TokenId]) -> Vec<f64> {
        self.cached.next_logits(generated)
    }
}

/// Adapter fine-tuning with the projector trained in full. With `dtg`, the
/// tag classifier trains jointly on `lambda`-weighted cross-entropy of the
/// ground-truth domain; the prompt always carries the ground-truth tag.
pub fn train_detector<F: Scalar>(
    model: &mut Detector<F>,
    samples: &[DetectionSample],
    mut dtg: Option<&mut DtgModel<F>>,
) -> Result<DetectorTrainReport, DetectorError> {
    if samples.is_empty() {
        return Err(DetectorError::Empty);
    }
    if model.config.instructions.is_empty() {
        return Err(DetectorError::NoInstructions);
    }
    let cfg = model.config.train.clone();
    if !(cfg.lambda.is_finite() && cfg.lambda >= 0.0) {
        return Err(LossError::BadWeight("lambda").into());
    }
    let prepared = model.prepare(samples)?;
    let dtg_inputs: Vec<Array2<F>> = match dtg.as_deref() {
        Some(d) => prepared.iter().map(|p| d.input_tensor(&p.image)).collect(),
        None => Vec::new(),
    };
    let base_checksum_before = model.store.checksum(ParamRole::Base);
    let initial_loss = model.mean_text_loss(&prepared)?;
    let clip = cfg.grad_clip.map(F::of);
    let mut optimizer = Adam::new(F::of(cfg.learning_rate)).with_clip(clip);
    let mut dtg_optimizer = Adam::new(F::of(cfg.learning_rate)).with_clip(clip);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let lr = F::of(cfg.schedule.rate(cfg.learning_rate, epoch, cfg.epochs));
        optimizer.lr = lr;
        dtg_optimizer.lr = lr;
        let mut sums = EpochLoss::default();
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut acc = GradAccumulator::new();
            let mut tag_acc = GradAccumulator::new();
            for &i in chunk {
                let instruction = model.config.instructions.choose(&mut rng).expect("non-empty pool").clone();
                let (text, grads) = model.text_loss(&prepared[i], &instruction, true)?;
                acc.add(grads);
                sums.text += text;
                if let Some(d) = dtg.as_deref() {
                    let (ce, grads) = d.loss_and_grads(dtg_inputs[i].clone(), prepared[i].domain, cfg.lambda);
                    sums.tag += cfg.lambda * ce;
                    tag_acc.add(grads);
                }
            }
            optimizer.step(&mut model.store, acc.drain_mean());
            if let Some(d) = dtg.as_deref_mut() {
                dtg_optimizer.step(&mut d.store, tag_acc.drain_mean());
            }
        }
        let n = prepared.len() as f64;
        sums.text /= n;
        sums.tag /= n;
        sums.total = sums.text + sums.tag;
        tracing::info!(epoch, total = sums.total, text = sums.text, tag = sums.tag, "detector epoch");
        epoch_losses.push(sums);
    }
    let final_loss = model.mean_text_loss(&prepared)?;
    model.weights_version = format!("detector-{}", fingerprint(&model.store.snapshot(&[ParamRole::Adapter, ParamRole::Head])));
    Ok(DetectorTrainReport {
        initial_loss,
        epoch_losses,
        final_loss,
        base_checksum_before,
        base_checksum_after: model.store.checksum(ParamRole::Base),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::description::Verdict;

    #[test]
    fn unparseable_text_falls_back_on_stem() {
        let out = DetectionOutput::from_text("this image was tampered with".into(), true);
        assert_eq!(out.description.verdict, Verdict::Tampered);
        assert_eq!(out.flags, vec![OutputFlag::LowConfidence]);
        let out = DetectionOutput::from_text("clean".into(), false);
        assert_eq!(out.description.verdict, Verdict::Authentic);
        assert!(out.flags.contains(&OutputFlag::Truncated));
    }

    #[test]
    fn default_pool_has_eight_paraphrases() {
        let pool = default_instructions();
        assert_eq!(pool.len(), 8);
        assert_eq!(pool[0], DEFAULT_INSTRUCTION);
    }
}
