//! Token layout of model prompts and teacher-forced training sequences.
//!
//! ```text
//! [BOS] [IMAGE x n] seg_0 .. seg_k  q_0 [ANSWER] a_0 [TURN] .. q_m [ANSWER]
//! ```
//!
//! The image placeholders are replaced by image-token rows at embedding time.
//! Segments are the conditioning texts (domain tag, description); each dialogue
//! turn is a question followed by `[ANSWER]` and, for past turns, its answer.

use std::cell::RefCell;
use std::ops::Range;

use ndarray::Array2;

use crate::autograd::Var;
use crate::generate::NextTokenModel;
use crate::nn::{Graph, KvCache, LanguageModel, ParamStore};
use crate::scalar::Scalar;
use crate::tokenizer::{Special, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("the question or instruction is empty")]
    EmptyInstruction,
    #[error("image tokens are {found} wide but text embeddings are {expected} wide")]
    WidthMismatch { expected: usize, found: usize },
    #[error("image token count {found} differs from the {expected} placeholders")]
    ImageCount { expected: usize, found: usize },
    #[error("sequence of {len} tokens exceeds the model limit of {limit}")]
    TooLong { len: usize, limit: usize },
}

/// A finished past turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

/// Prompt token ids with the spans of each part.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub ids: Vec<TokenId>,
    pub image_span: Range<usize>,
    pub segment_spans: Vec<Range<usize>>,
    /// Span of the final question, which ends right before the last `[ANSWER]`.
    pub question_span: Range<usize>,
}

impl PromptLayout {
    pub fn build(image_tokens: usize, segments: &[&[TokenId]], history: &[Turn], question: &[TokenId]) -> Result<Self, PromptError> {
        if question.is_empty() {
            return Err(PromptError::EmptyInstruction);
        }
        let mut ids = vec![Special::Bos.id()];
        ids.extend(std::iter::repeat_n(Special::Image.id(), image_tokens));
        let image_span = 1..1 + image_tokens;
        let mut segment_spans = Vec::with_capacity(segments.len());
        for seg in segments {
            let start = ids.len();
            ids.extend_from_slice(seg);
            segment_spans.push(start..ids.len());
        }
        for turn in history {
            ids.extend_from_slice(&turn.question);
            ids.push(Special::Answer.id());
            ids.extend_from_slice(&turn.answer);
            ids.push(Special::Turn.id());
        }
        let start = ids.len();
        ids.extend_from_slice(question);
        let question_span = start..ids.len();
        ids.push(Special::Answer.id());
        Ok(Self { ids, image_span, segment_spans, question_span })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Teacher-forced input ids and next-token targets for `answer` followed
    /// by `[EOS]`. Prompt positions are unsupervised.
    pub fn training_pair(&self, answer: &[TokenId]) -> (Vec<TokenId>, Vec<Option<usize>>) {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(answer);
        ids.push(Special::Eos.id());
        let prompt = self.ids.len();
        let targets = (0..ids.len())
            .map(|t| (t + 1 >= prompt && t + 1 < ids.len()).then(|| ids[t + 1] as usize))
            .collect();
        (ids, targets)
    }
}

/// Embeds `ids`, splicing `image` rows over the placeholder span.
pub fn embed_sequence<F: Scalar>(
    g: &mut Graph<'_, F>,
    lm: &LanguageModel,
    ids: &[TokenId],
    image_span: &Range<usize>,
    image: Option<Var>,
) -> Result<Var, PromptError> {
    if ids.len() > lm.config.max_len {
        return Err(PromptError::TooLong { len: ids.len(), limit: lm.config.max_len });
    }
    let Some(image) = image.filter(|_| !image_span.is_empty()) else {
        return Ok(lm.embed_tokens(g, ids));
    };
    let (rows, width) = g.tape.shape(image);
    if width != lm.config.d_model {
        return Err(PromptError::WidthMismatch { expected: lm.config.d_model, found: width });
    }
    if rows != image_span.len() {
        return Err(PromptError::ImageCount { expected: image_span.len(), found: rows });
    }
    let mut parts = Vec::with_capacity(3);
    if image_span.start > 0 {
        parts.push(lm.embed_tokens(g, &ids[..image_span.start]));
    }
    parts.push(image);
    if image_span.end < ids.len() {
        parts.push(lm.embed_tokens(g, &ids[image_span.end..]));
    }
    Ok(g.tape.concat_rows(&parts))
}

/// Incremental decoding of a fixed prompt. Each call feeds only the tokens
/// generated since the previous call; a call whose tokens do not extend the
/// previous ones starts over from the prompt.
pub struct CachedDecoder<'a, F: Scalar> {
    lm: &'a LanguageModel,
    store: &'a ParamStore<F>,
    adapters: bool,
    layout: &'a PromptLayout,
    /// Projected image rows for the placeholder span.
    image: Option<Array2<F>>,
    state: RefCell<Option<(Vec<TokenId>, KvCache<F>)>>,
}

impl<'a, F: Scalar> CachedDecoder<'a, F> {
    pub fn new(lm: &'a LanguageModel, store: &'a ParamStore<F>, layout: &'a PromptLayout, image: Option<Array2<F>>, adapters: bool) -> Self {
        Self { lm, store, adapters, layout, image, state: RefCell::new(None) }
    }

    fn graph(&self) -> Graph<'a, F> {
        let g = Graph::inference(self.store);
        if self.adapters {
            g
        } else {
            g.without_adapters()
        }
    }

    /// Last-position logits, or `None` past the context window.
    fn try_next(&self, generated: &[TokenId]) -> Option<Vec<f64>> {
        if self.layout.len() + generated.len() > self.lm.config.max_len {
            return None;
        }
        let mut state = self.state.borrow_mut();
        let mut g = self.graph();
        let emb = match &*state {
            Some((seen, _)) if generated.len() > seen.len() && generated.starts_with(seen) => self.lm.embed_tokens(&mut g, &generated[seen.len()..]),
            _ => {
                let mut ids = self.layout.ids.clone();
                ids.extend_from_slice(generated);
                let image = self.image.clone().map(|m| g.constant(m));
                *state = Some((Vec::new(), KvCache::new(self.layout.image_span.end)));
                embed_sequence(&mut g, self.lm, &ids, &self.layout.image_span, image).ok()?
            }
        };
        let (seen, cache) = state.as_mut().expect("state was just set");
        let out = self.lm.forward_cached(&mut g, emb, cache);
        seen.clear();
        seen.extend_from_slice(generated);
        let logits = g.value(out.logits);
        Some(logits.row(logits.nrows() - 1).iter().map(|v| v.as_f64()).collect())
    }
}

impl<F: Scalar> NextTokenModel for CachedDecoder<'_, F> {
    /// Past the context window only `[EOS]` remains.
    fn next_logits(&self, generated: &[TokenId]) -> Vec<f64> {
        self.try_next(generated).unwrap_or_else(|| {
            let mut l = vec![0.0; self.lm.config.vocab];
            l[Special::Eos.id() as usize] = 1.0;
            l
        })
    }
}
