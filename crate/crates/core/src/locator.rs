//! Text-prompted tamper localization.
//!
//! A comprehension language model reads the image tokens and the detector's
//! description and answers with a `<SEG>` token. The last-layer state at that
//! token, passed through a small MLP, is the only prompt a convolutional mask
//! decoder receives.

use std::path::Path;

use image::RgbImage;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::checkpoint::{fingerprint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
use crate::description::OutputFlag;
use crate::detector::DEFAULT_INSTRUCTION;
use crate::domain::{DomainCategory, DomainTag};
use crate::generate::{generate, GenerationConfig};
use crate::imaging::{bilinear_matrix, image_tensor, mask_to_float, resize_bilinear, resize_mask_nearest, BinaryMask};
use crate::loss::{localization_loss_on, LocalizationLoss, LossError, MaskLossWeights};
use crate::nn::{
    Adam, AdapterConfig, Conv2d, GradAccumulator, Graph, Init, LanguageModel, Linear, LmConfig, LrSchedule, Mlp, ParamId, ParamRole,
    ParamStore,
};
use crate::prompt::{embed_sequence, CachedDecoder, PromptError, PromptLayout};
use crate::scalar::Scalar;
use crate::tokenizer::{ByteTokenizer, Special, TokenId};
use crate::vision::{Projector, VisionConfig, VisionEncoder};

pub const CHECKPOINT_FORMAT: &str = "tamperscope.locator";

/// Ground-truth answer of the comprehension model.
pub const SEG_PROMPT: &str = "It is <SEG>";

/// Appended to the query when a first answer lacks `<SEG>`.
pub const FORCE_SEG_SUFFIX: &str = "Answer with the segmentation token.";

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// What the comprehension model reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocatorInputs {
    /// Detector description and image tokens.
    #[default]
    DescriptionImage,
    InstructionImage,
    InstructionTag,
    InstructionTagImage,
}

impl LocatorInputs {
    pub const ALL: [LocatorInputs; 4] =
        [LocatorInputs::DescriptionImage, LocatorInputs::InstructionImage, LocatorInputs::InstructionTag, LocatorInputs::InstructionTagImage];

    pub fn uses_image(self) -> bool {
        !matches!(self, LocatorInputs::InstructionTag)
    }

    pub fn uses_tag(self) -> bool {
        matches!(self, LocatorInputs::InstructionTag | LocatorInputs::InstructionTagImage)
    }

    pub fn uses_description(self) -> bool {
        matches!(self, LocatorInputs::DescriptionImage)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LocatorInputs::DescriptionImage => "description+image",
            LocatorInputs::InstructionImage => "instruction+image",
            LocatorInputs::InstructionTag => "instruction+tag",
            LocatorInputs::InstructionTagImage => "instruction+tag+image",
        }
    }
}

impl std::str::FromStr for LocatorInputs {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| format!("unknown locator inputs `{s}`"))
    }
}

/// Where the descriptions fed to the locator during training come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionSource {
    /// Dataset descriptions, verbatim.
    #[default]
    Dataset,
    /// Generations of a trained detector.
    Detector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    /// Side of the square encoder input.
    pub input_size: u32,
    /// Widths of the three encoder levels; the first two halve resolution.
    pub encoder_channels: [usize; 3],
    pub decoder_channels: usize,
    /// Side of the decoder's output logit map.
    pub mask_size: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self { input_size: 128, encoder_channels: [16, 32, 32], decoder_channels: 32, mask_size: 128 }
    }
}

impl SegConfig {
    fn grid(&self) -> usize {
        self.input_size as usize / 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocatorTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub weights: MaskLossWeights,
    /// Supervise the comprehension model with the reference description
    /// before [`SEG_PROMPT`], asking it to restate a corrected input.
    #[serde(default)]
    pub correct_description_target: bool,
    #[serde(default)]
    pub description_source: DescriptionSource,
    pub seed: u64,
}

impl Default for LocatorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 3e-3,
            batch_size: 2,
            grad_clip: Some(5.0),
            schedule: LrSchedule::Cosine,
            weights: MaskLossWeights::default(),
            correct_description_target: false,
            description_source: DescriptionSource::Dataset,
            seed: 13,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocatorConfig {
    pub seed: u64,
    pub vision: VisionConfig,
    pub lm: LmConfig,
    pub lm_adapter: AdapterConfig,
    pub seg: SegConfig,
    pub seg_adapter: AdapterConfig,
    /// Width of the segmentation prompt vector.
    pub prompt_width: usize,
    pub inputs: LocatorInputs,
    /// Instruction used by the instruction-based input variants.
    pub instruction: String,
    pub threshold: f64,
    pub generation: GenerationConfig,
    pub train: LocatorTrainConfig,
}

impl Default for LocatorConfig {
    fn default() -> Self {
        let lm_targets = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down", "head"];
        Self {
            seed: 2,
            vision: VisionConfig::default(),
            lm: LmConfig { vocab: ByteTokenizer::VOCAB_SIZE, d_model: 64, layers: 4, heads: 4, d_ff: 256, max_len: 512, position_std: 0.1 },
            lm_adapter: AdapterConfig { rank: 4, alpha: 8.0, target_layers: lm_targets.map(String::from).to_vec() },
            seg: SegConfig::default(),
            seg_adapter: AdapterConfig { rank: 4, alpha: 8.0, target_layers: ["enc.0", "enc.1", "enc.2"].map(String::from).to_vec() },
            prompt_width: 32,
            inputs: LocatorInputs::DescriptionImage,
            instruction: DEFAULT_INSTRUCTION.into(),
            threshold: DEFAULT_THRESHOLD,
            generation: GenerationConfig { max_new_tokens: 24, ..GenerationConfig::default() },
            train: LocatorTrainConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LocatorError {
    #[error("no training samples")]
    Empty,
    #[error("tampered training sample {0} has no mask")]
    MissingMask(usize),
    #[error("sequence has no segmentation token")]
    NoSegToken,
    #[error("prompt vector is {found} wide, the decoder expects {expected}")]
    PromptWidth { expected: usize, found: usize },
    #[error("mask is {found:?}, image is {expected:?}")]
    MaskShape { expected: (usize, usize), found: (usize, usize) },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Position of the first `<SEG>` in `ids`.
pub fn seg_position(ids: &[TokenId]) -> Option<usize> {
    ids.iter().position(|&t| t == Special::Seg.id())
}

/// Projects the state row at the first `<SEG>` of `ids`.
pub fn extract_seg_embedding<F: Scalar>(
    states: &Array2<F>,
    ids: &[TokenId],
    project: impl FnOnce(Array2<F>) -> Array2<F>,
) -> Result<Array2<F>, LocatorError> {
    let pos = seg_position(ids).ok_or(LocatorError::NoSegToken)?;
    let row = states.row(pos).to_owned().insert_axis(ndarray::Axis(0));
    Ok(project(row))
}

/// Probability map with its binarization.
#[derive(Clone, Debug, PartialEq)]
pub struct TamperMask {
    pub probs: Array2<f64>,
    pub binary: BinaryMask,
    pub threshold: f64,
}

impl TamperMask {
    pub fn from_probs(probs: Array2<f64>, threshold: f64) -> Self {
        let binary = probs.mapv(|p| p >= threshold);
        Self { probs, binary, threshold }
    }

    pub fn from_logits(logits: &Array2<f64>, threshold: f64) -> Self {
        Self::from_probs(logits.mapv(|x| 1.0 / (1.0 + (-x).exp())), threshold)
    }

    pub fn empty(height: usize, width: usize, threshold: f64) -> Self {
        Self::from_probs(Array2::zeros((height, width)), threshold)
    }

    pub fn rethreshold(&self, threshold: f64) -> Self {
        Self::from_probs(self.probs.clone(), threshold)
    }

    pub fn tampered_pixels(&self) -> usize {
        self.binary.iter().filter(|&&b| b).count()
    }
}

/// Everything the locator may read about one image.
#[derive(Clone, Copy, Debug)]
pub struct LocatorQuery<'a> {
    pub image: &'a RgbImage,
    pub description: &'a str,
    pub domain: DomainCategory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocatorOutput {
    /// The comprehension model's answer.
    pub answer: String,
    pub mask: TamperMask,
    pub flags: Vec<OutputFlag>,
}

/// One supervised example. Authentic images carry no mask and train towards
/// an empty one.
#[derive(Clone, Debug)]
pub struct LocatorSample {
    pub image: RgbImage,
    pub domain: DomainCategory,
    pub mask: Option<BinaryMask>,
    pub authentic: bool,
    /// Text the comprehension model reads.
    pub description: String,
    /// Reference description, the target under `correct_description_target`.
    pub reference: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LocatorEpochLoss {
    pub total: f64,
    pub text: f64,
    pub bce: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocatorTrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<LocatorEpochLoss>,
    pub final_loss: f64,
    pub base_checksum_before: String,
    pub base_checksum_after: String,
}

/// Frozen convolutional encoder with adapters and a prompt-modulated decoder.
#[derive(Clone, Debug)]
struct SegNet {
    encoder: [Conv2d; 3],
    film: [(Linear, Linear); 2],
    decoder: [Conv2d; 2],
    out: Linear,
    /// Prompt-generated per-pixel weights added to `out`.
    hyper: Linear,
}

impl SegNet {
    fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &SegConfig, adapter: &AdapterConfig, prompt_width: usize) -> Self {
        let [c0, c1, c2] = cfg.encoder_channels;
        let d = cfg.decoder_channels;
        let enc = |store: &mut ParamStore<F>, i: usize, cin, cout, stride| {
            Conv2d::new(store, &format!("seg.enc.{i}"), cin, cout, 3, stride, Init::FROZEN_BASE).adapt(store, adapter)
        };
        let encoder = [enc(store, 0, 3, c0, 2), enc(store, 1, c0, c1, 2), enc(store, 2, c1, c2, 1)];
        let film = |store: &mut ParamStore<F>, i: usize| {
            (
                Linear::new(store, &format!("seg.film.{i}.scale"), prompt_width, d, true, Init::HEAD),
                Linear::new(store, &format!("seg.film.{i}.shift"), prompt_width, d, true, Init::HEAD),
            )
        };
        let film = [film(store, 0), film(store, 1)];
        let decoder = [
            Conv2d::new(store, "seg.dec.0", c2 + 2, d, 3, 1, Init::HEAD),
            Conv2d::new(store, "seg.dec.1", d, d, 3, 1, Init::HEAD),
        ];
        let out = Linear::new(store, "seg.out", d + 2, 1, true, Init::HEAD);
        let hyper = Linear::new(store, "seg.hyper", prompt_width, d + 2, true, Init::HEAD);
        Self { encoder, film, decoder, out, hyper }
    }

    /// Mid-level features, `grid^2 x channels`.
    fn encode<F: Scalar>(&self, g: &mut Graph<'_, F>, cfg: &SegConfig, image: &RgbImage) -> Var {
        let mut x = g.constant(image_tensor::<F>(image, cfg.input_size));
        let (mut h, mut w) = (cfg.input_size as usize, cfg.input_size as usize);
        for conv in &self.encoder {
            let (y, nh, nw) = conv.forward(g, x, h, w);
            x = g.tape.relu(y);
            (h, w) = (nh, nw);
        }
        x
    }

    /// `mask_size x mask_size` logits.
    fn decode<F: Scalar>(&self, g: &mut Graph<'_, F>, cfg: &SegConfig, features: Var, prompt: Var) -> Var {
        let n = cfg.grid();
        let coords = Array2::from_shape_fn((n * n, 2), |(i, c)| {
            let v = if c == 0 { i % n } else { i / n };
            F::of(2.0 * (v as f64 + 0.5) / n as f64 - 1.0)
        });
        let coords = g.constant(coords);
        let mut x = g.tape.concat_cols(&[features, coords]);
        for (conv, (scale, shift)) in self.decoder.iter().zip(&self.film) {
            let (y, _, _) = conv.forward(g, x, n, n);
            let gamma = scale.forward(g, prompt);
            let beta = shift.forward(g, prompt);
            let modulated = g.tape.mul_row(y, gamma);
            let y = g.tape.add(y, modulated);
            let y = g.tape.add_row(y, beta);
            x = g.tape.relu(y);
        }
        let x = g.tape.concat_cols(&[x, coords]);
        let fixed = self.out.forward(g, x);
        let weights = self.hyper.forward(g, prompt);
        let weights = g.tape.transpose(weights);
        let dynamic = g.tape.matmul(x, weights);
        let logits = g.tape.add(fixed, dynamic);
        let grid = g.tape.reshape(logits, n, n);
        let up = g.constant(bilinear_matrix::<F>(cfg.mask_size, n));
        let up_t = g.constant(bilinear_matrix::<F>(cfg.mask_size, n).reversed_axes());
        let rows = g.tape.matmul(up, grid);
        g.tape.matmul(rows, up_t)
    }
}

#[derive(Clone, Debug)]
pub struct Locator<F: Scalar> {
    pub config: LocatorConfig,
    pub store: ParamStore<F>,
    pub weights_version: String,
    vision: VisionEncoder,
    projector: Projector,
    lm: LanguageModel,
    seg_head: Mlp,
    seg: SegNet,
}

struct Prepared<F> {
    features: Array2<F>,
    image: RgbImage,
    layout: PromptLayout,
    answer: Vec<TokenId>,
    gt: Array2<F>,
}

impl<F: Scalar> Locator<F> {
    pub fn new(config: LocatorConfig) -> Self {
        let mut store = ParamStore::new(config.seed);
        let vision = VisionEncoder::new(&mut store, "tcm.", config.vision.clone());
        let lm = LanguageModel::new(&mut store, "tcm.lm.", config.lm.clone(), Init::FROZEN_BASE, &config.lm_adapter);
        let projector = Projector::new(&mut store, "tcm.", config.vision.width, config.lm.d_model, Init::HEAD);
        let d = config.lm.d_model;
        let seg_head = Mlp::new(&mut store, "seg_prompt", d, d, config.prompt_width, Init::HEAD);
        let seg = SegNet::new(&mut store, &config.seg, &config.seg_adapter, config.prompt_width);
        Self { config, store, weights_version: "untrained".into(), vision, projector, lm, seg_head, seg }
    }

    /// Comprehension prompt for `query` under the configured inputs.
    pub fn layout(&self, description: &str, domain: DomainCategory, suffix: Option<&str>) -> Result<PromptLayout, PromptError> {
        let tok = ByteTokenizer;
        let inputs = self.config.inputs;
        let image_tokens = if inputs.uses_image() { self.config.vision.tokens() } else { 0 };
        let tag = inputs.uses_tag().then(|| tok.encode(&DomainTag::new(domain).sentence));
        let segments: Vec<&[TokenId]> = tag.iter().map(Vec::as_slice).collect();
        let mut question = if inputs.uses_description() { description.to_string() } else { self.config.instruction.clone() };
        if let Some(suffix) = suffix {
            question.push(' ');
            question.push_str(suffix);
        }
        PromptLayout::build(image_tokens, &segments, &[], &tok.encode(&question))
    }

    /// Answer tokens the comprehension model is trained to produce.
    pub fn target_answer(&self, reference: &str) -> Vec<TokenId> {
        let text = if self.config.train.correct_description_target { format!("{reference}\n{SEG_PROMPT}") } else { SEG_PROMPT.to_string() };
        ByteTokenizer.encode(&text)
    }

    pub fn image_features(&self, image: &RgbImage) -> Array2<F> {
        self.vision.features(&self.store, image)
    }

    /// Runs the comprehension model over `ids`; returns the image-token-aware
    /// embedding pass output.
    fn comprehend(&self, g: &mut Graph<'_, F>, features: &Array2<F>, layout: &PromptLayout, ids: &[TokenId]) -> Result<crate::nn::LmOutput, PromptError> {
        let image = if layout.image_span.is_empty() { None } else { Some(self.projector.forward(g, features.clone())) };
        let emb = embed_sequence(g, &self.lm, ids, &layout.image_span, image)?;
        Ok(self.lm.forward_with_prefix(g, emb, layout.image_span.end))
    }

    /// Segmentation prompt from the comprehension states of `prompt ++ answer`.
    pub fn prompt_embedding(&self, image: &RgbImage, layout: &PromptLayout, answer: &[TokenId], adapters: bool) -> Result<Array2<F>, LocatorError> {
        let mut ids = layout.ids.clone();
        ids.extend_from_slice(answer);
        let pos = seg_position(&ids).ok_or(LocatorError::NoSegToken)?;
        let mut g = self.graph(false, adapters);
        let out = self.comprehend(&mut g, &self.image_features(image), layout, &ids)?;
        let state = g.tape.row(out.hidden, pos);
        let prompt = self.seg_head.forward(&mut g, state);
        Ok(g.value(prompt).clone())
    }

    fn graph(&self, training: bool, adapters: bool) -> Graph<'_, F> {
        let g = if training { Graph::training(&self.store) } else { Graph::inference(&self.store) };
        if adapters {
            g
        } else {
            g.without_adapters()
        }
    }

    /// Mask for `image` prompted by `prompt`, resized to the image.
    pub fn localize(&self, image: &RgbImage, prompt: &Array2<F>, adapters: bool) -> Result<TamperMask, LocatorError> {
        if prompt.dim() != (1, self.config.prompt_width) {
            return Err(LocatorError::PromptWidth { expected: self.config.prompt_width, found: prompt.ncols() });
        }
        let mut g = self.graph(false, adapters);
        let features = self.seg.encode(&mut g, &self.config.seg, image);
        let prompt = g.constant(prompt.clone());
        let logits = self.seg.decode(&mut g, &self.config.seg, features, prompt);
        let probs = g.value(logits).mapv(|x| 1.0 / (1.0 + (-x.as_f64()).exp()));
        let probs = resize_bilinear(&probs, image.height() as usize, image.width() as usize);
        Ok(TamperMask::from_probs(probs.mapv(|p| p.clamp(0.0, 1.0)), self.config.threshold))
    }

    /// Answer, then mask. A first answer without `<SEG>` is retried once
    /// with [`FORCE_SEG_SUFFIX`]; a second miss yields an empty mask flagged
    /// [`OutputFlag::NoSeg`].
    pub fn locate(&self, query: LocatorQuery<'_>, adapters: bool) -> Result<LocatorOutput, LocatorError> {
        let features = self.image_features(query.image);
        let mut flags = Vec::new();
        for suffix in [None, Some(FORCE_SEG_SUFFIX)] {
            let layout = self.layout(query.description, query.domain, suffix)?;
            let image = if layout.image_span.is_empty() {
                None
            } else {
                let mut g = self.graph(false, adapters);
                let t = self.projector.forward(&mut g, features.clone());
                Some(g.value(t).clone())
            };
            let decoder = CachedDecoder::new(&self.lm, &self.store, &layout, image, adapters);
            let out = generate(&decoder, &self.config.generation);
            let answer = ByteTokenizer.decode(&out.tokens);
            if seg_position(&out.tokens).is_some() {
                let prompt = self.prompt_embedding(query.image, &layout, &out.tokens, adapters)?;
                let mask = self.localize(query.image, &prompt, adapters)?;
                return Ok(LocatorOutput { answer, mask, flags });
            }
            if !out.finished {
                flags.push(OutputFlag::Truncated);
            }
        }
        flags.push(OutputFlag::NoSeg);
        let mask = TamperMask::empty(query.image.height() as usize, query.image.width() as usize, self.config.threshold);
        Ok(LocatorOutput { answer: String::new(), mask, flags })
    }

    fn prepare(&self, samples: &[LocatorSample]) -> Result<Vec<Prepared<F>>, LocatorError> {
        let size = self.config.seg.mask_size;
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let gt = match (&s.mask, s.authentic) {
                    (Some(m), _) => mask_to_float(&resize_mask_nearest(m, size, size)),
                    (None, true) => Array2::zeros((size, size)),
                    (None, false) => return Err(LocatorError::MissingMask(i)),
                };
                if let Some(m) = &s.mask {
                    let expected = (s.image.height() as usize, s.image.width() as usize);
                    if m.dim() != expected {
                        return Err(LocatorError::MaskShape { expected, found: m.dim() });
                    }
                }
                Ok(Prepared {
                    features: self.image_features(&s.image),
                    image: s.image.clone(),
                    layout: self.layout(&s.description, s.domain, None)?,
                    answer: self.target_answer(&s.reference),
                    gt,
                })
            })
            .collect()
    }

    fn sample_loss(&self, p: &Prepared<F>, track: bool) -> Result<(LocalizationLoss<F>, Vec<(ParamId, Array2<F>)>), LocatorError> {
        let (ids, targets) = p.layout.training_pair(&p.answer);
        let pos = seg_position(&ids[p.layout.len()..]).ok_or(LossError::MissingSegToken)? + p.layout.len();
        let mut g = self.graph(track, true);
        let out = self.comprehend(&mut g, &p.features, &p.layout, &ids)?;
        let state = g.tape.row(out.hidden, pos);
        let prompt = self.seg_head.forward(&mut g, state);
        let features = self.seg.encode(&mut g, &self.config.seg, &p.image);
        let mask_logits = self.seg.decode(&mut g, &self.config.seg, features, prompt);
        let (loss, parts) =
            localization_loss_on(&mut g.tape, out.logits, &targets, Special::Seg.id() as usize, mask_logits, &p.gt, self.config.train.weights)?;
        let grads = if track { g.param_grads(loss) } else { Vec::new() };
        Ok((parts, grads))
    }

    fn mean_loss(&self, prepared: &[Prepared<F>]) -> Result<f64, LocatorError> {
        let mut total = 0.0;
        for p in prepared {
            total += self.sample_loss(p, false)?.0.total.as_f64();
        }
        Ok(total / prepared.len() as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint<LocatorConfig> {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            weights_version: self.weights_version.clone(),
            config: self.config.clone(),
            base_checksum: Some(self.store.checksum(ParamRole::Base)),
            tensors: self.store.snapshot(&[ParamRole::Adapter, ParamRole::Head]),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<LocatorConfig>) -> Result<Self, LocatorError> {
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

    pub fn save(&self, path: &Path) -> Result<(), LocatorError> {
        Ok(self.checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, LocatorError> {
        Self::from_checkpoint(&Checkpoint::load(path, CHECKPOINT_FORMAT)?)
    }
}

/// Adapter fine-tuning of both frozen backbones; the prompt MLP, the
/// projector and the decoder train in full.
pub fn train_locator<F: Scalar>(model: &mut Locator<F>, samples: &[LocatorSample]) -> Result<LocatorTrainReport, LocatorError> {
    if samples.is_empty() {
        return Err(LocatorError::Empty);
    }
    let cfg = model.config.train.clone();
    let prepared = model.prepare(samples)?;
    let base_checksum_before = model.store.checksum(ParamRole::Base);
    let initial_loss = model.mean_loss(&prepared)?;
    let mut optimizer = Adam::new(F::of(cfg.learning_rate)).with_clip(cfg.grad_clip.map(F::of));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        optimizer.lr = F::of(cfg.schedule.rate(cfg.learning_rate, epoch, cfg.epochs));
        let mut sums = LocatorEpochLoss::default();
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut acc = GradAccumulator::new();
            for &i in chunk {
                let (parts, grads) = model.sample_loss(&prepared[i], true)?;
                sums.total += parts.total.as_f64();
                sums.text += parts.text.as_f64();
                sums.bce += parts.bce.as_f64();
                sums.dice += parts.dice.as_f64();
                acc.add(grads);
            }
            optimizer.step(&mut model.store, acc.drain_mean());
        }
        let n = prepared.len() as f64;
        for v in [&mut sums.total, &mut sums.text, &mut sums.bce, &mut sums.dice] {
            *v /= n;
        }
        tracing::info!(epoch, total = sums.total, text = sums.text, bce = sums.bce, dice = sums.dice, "locator epoch");
        epoch_losses.push(sums);
    }
    let final_loss = model.mean_loss(&prepared)?;
    model.weights_version = format!("locator-{}", fingerprint(&model.store.snapshot(&[ParamRole::Adapter, ParamRole::Head])));
    Ok(LocatorTrainReport {
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

    #[test]
    fn input_variants_round_trip_through_names() {
        for v in LocatorInputs::ALL {
            assert_eq!(v.as_str().parse::<LocatorInputs>(), Ok(v));
        }
        assert!("image".parse::<LocatorInputs>().is_err());
    }

    #[test]
    fn saturated_logits_give_full_mask() {
        let m = TamperMask::from_logits(&Array2::from_elem((4, 4), f64::INFINITY), 0.5);
        assert_eq!(m.tampered_pixels(), 16);
    }
}
