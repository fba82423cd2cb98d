//! Word-frequency profile of explanation texts by part of speech.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartOfSpeech {
    Noun,
    Adjective,
    Verb,
}

pub trait PosTagger {
    /// Tag of a lowercase word; `None` for words outside the tagger's scope.
    fn tag(&self, word: &str) -> Option<PartOfSpeech>;
}

const NOUNS: &[&str] = &[
    "area", "artifact", "artifacts", "background", "blur", "boundary", "boundaries", "color", "colour", "contour", "corner", "detail",
    "details", "edge", "edges", "expression", "eye", "eyes", "face", "hair", "image", "lighting", "light", "noise", "object",
    "perspective", "pixel", "pixels", "reflection", "reflections", "region", "resolution", "scene", "seam", "shadow", "shadows",
    "sharpness", "skin", "square", "structure", "surface", "teeth", "texture", "textures", "law", "physics", "position", "copy",
];

const ADJECTIVES: &[&str] = &[
    "abrupt", "blurred", "blurry", "consistent", "distorted", "duplicated", "inconsistent", "irregular", "natural", "physical",
    "plausible", "sharp", "smooth", "unnatural", "uniform", "unrealistic", "realistic", "coherent", "visible", "abnormal", "clean",
];

const VERBS: &[&str] = &[
    "appear", "appears", "blend", "blends", "break", "breaks", "contain", "contains", "differ", "differs", "duplicate", "match",
    "matches", "paste", "pasted", "show", "shows", "suggest", "suggests", "indicate", "indicates",
];

/// Fixed-lexicon lookup.
#[derive(Clone, Debug)]
pub struct LexiconTagger {
    words: HashMap<String, PartOfSpeech>,
}

impl Default for LexiconTagger {
    fn default() -> Self {
        let mut words = HashMap::new();
        for (list, pos) in [(VERBS, PartOfSpeech::Verb), (ADJECTIVES, PartOfSpeech::Adjective), (NOUNS, PartOfSpeech::Noun)] {
            for w in list {
                words.insert((*w).to_string(), pos);
            }
        }
        Self { words }
    }
}

impl LexiconTagger {
    pub fn new(words: HashMap<String, PartOfSpeech>) -> Self {
        Self { words }
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, word: &str) -> Option<PartOfSpeech> {
        self.words.get(word).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub word: String,
    pub pos: PartOfSpeech,
    pub count: usize,
}

/// Counts words tagged with one of `keep`, by descending count then word.
pub fn answer_lexicon_profile<S: AsRef<str>>(texts: &[S], tagger: &dyn PosTagger, keep: &BTreeSet<PartOfSpeech>) -> Vec<LexiconEntry> {
    let mut counts: BTreeMap<(String, PartOfSpeech), usize> = BTreeMap::new();
    for text in texts {
        for word in text.as_ref().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let word = word.to_lowercase();
            if let Some(pos) = tagger.tag(&word).filter(|p| keep.contains(p)) {
                *counts.entry((word, pos)).or_default() += 1;
            }
        }
    }
    let mut out: Vec<LexiconEntry> = counts.into_iter().map(|((word, pos), count)| LexiconEntry { word, pos, count }).collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.word.cmp(&b.word)));
    out
}

pub fn nouns_and_adjectives() -> BTreeSet<PartOfSpeech> {
    BTreeSet::from([PartOfSpeech::Noun, PartOfSpeech::Adjective])
}
