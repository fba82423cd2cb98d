//! Autoregressive decoding over any next-token model.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tokenizer::{Special, TokenId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    /// `[EOS]` is suppressed before this many tokens.
    pub min_new_tokens: usize,
    pub greedy: bool,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { max_new_tokens: 160, min_new_tokens: 0, greedy: true, temperature: 1.0, seed: 0 }
    }
}

/// Produces logits for the token following `generated` (the prompt is the
/// model's own state).
pub trait NextTokenModel {
    fn next_logits(&self, generated: &[TokenId]) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Generated ids, without the final `[EOS]`.
    pub tokens: Vec<TokenId>,
    /// Whether generation ended on `[EOS]` rather than the token budget.
    pub finished: bool,
}

/// Control tokens a model may never emit.
fn forbidden(id: usize) -> bool {
    [Special::Bos, Special::Image, Special::Answer, Special::Turn].iter().any(|s| s.id() as usize == id)
}

/// Greedy picks the first maximal logit; sampling draws from the tempered
/// softmax with a seeded stream.
pub fn generate<M: NextTokenModel + ?Sized>(model: &M, config: &GenerationConfig) -> Generation {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eos = Special::Eos.id() as usize;
    let mut tokens = Vec::new();
    while tokens.len() < config.max_new_tokens {
        let mut logits = model.next_logits(&tokens);
        for (id, l) in logits.iter_mut().enumerate() {
            if forbidden(id) || (id == eos && tokens.len() < config.min_new_tokens) || l.is_nan() {
                *l = f64::NEG_INFINITY;
            }
        }
        let next = if config.greedy || config.temperature <= 0.0 {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best
        } else {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / config.temperature).exp()).collect();
            WeightedIndex::new(&weights).expect("at least one finite logit").sample(&mut rng)
        };
        if next == eos {
            return Generation { tokens, finished: true };
        }
        tokens.push(next as TokenId);
    }
    Generation { tokens, finished: false }
}

/// Emits a fixed token script, then `[EOS]`.
#[derive(Clone, Debug)]
pub struct ScriptedModel {
    pub script: Vec<TokenId>,
    pub vocab: usize,
}

impl NextTokenModel for ScriptedModel {
    fn next_logits(&self, generated: &[TokenId]) -> Vec<f64> {
        let mut logits = vec![0.0; self.vocab];
        let next = self.script.get(generated.len()).copied().unwrap_or(Special::Eos.id());
        logits[next as usize] = 10.0;
        logits
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::ByteTokenizer;

    #[test]
    fn script_is_reproduced_and_stops_on_eos() {
        let model = ScriptedModel { script: ByteTokenizer.encode("abc"), vocab: ByteTokenizer::VOCAB_SIZE };
        let out = generate(&model, &GenerationConfig::default());
        assert_eq!(ByteTokenizer.decode(&out.tokens), "abc");
        assert!(out.finished);
    }

    #[test]
    fn budget_truncates() {
        let model = ScriptedModel { script: ByteTokenizer.encode("abcdef"), vocab: ByteTokenizer::VOCAB_SIZE };
        let out = generate(&model, &GenerationConfig { max_new_tokens: 3, ..Default::default() });
        assert_eq!(out.tokens.len(), 3);
        assert!(!out.finished);
    }

    #[test]
    fn min_tokens_suppresses_early_eos() {
        let model = ScriptedModel { script: vec![], vocab: ByteTokenizer::VOCAB_SIZE };
        let out = generate(&model, &GenerationConfig { min_new_tokens: 2, max_new_tokens: 5, ..Default::default() });
        assert_eq!(out.tokens.len(), 2);
        assert!(out.finished);
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let model = ScriptedModel { script: ByteTokenizer.encode("hello"), vocab: ByteTokenizer::VOCAB_SIZE };
        let cfg = GenerationConfig { greedy: false, temperature: 5.0, seed: 3, max_new_tokens: 12, ..Default::default() };
        assert_eq!(generate(&model, &cfg), generate(&model, &cfg));
    }
}
