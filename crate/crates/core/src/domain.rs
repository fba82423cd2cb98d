//! Tamper domains and the tag sentence that conditions the detector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The three tamper domains, with stable integer codes 0/1/2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainCategory {
    Photoshop = 0,
    Deepfake = 1,
    Aigc = 2,
}

impl DomainCategory {
    pub const ALL: [DomainCategory; 3] = [DomainCategory::Photoshop, DomainCategory::Deepfake, DomainCategory::Aigc];
    pub const COUNT: usize = 3;

    pub const fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    /// Lower-case identifier used in manifests, file names and records.
    pub const fn as_str(self) -> &'static str {
        match self {
            DomainCategory::Photoshop => "photoshop",
            DomainCategory::Deepfake => "deepfake",
            DomainCategory::Aigc => "aigc",
        }
    }

    /// Spelling substituted into the tag sentence.
    pub const fn display_name(self) -> &'static str {
        match self {
            DomainCategory::Photoshop => "PhotoShop",
            DomainCategory::Deepfake => "DeepFake",
            DomainCategory::Aigc => "AIGC-Editing",
        }
    }
}

impl fmt::Display for DomainCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown tamper domain `{0}` (expected photoshop, deepfake or aigc)")]
pub struct UnknownDomain(pub String);

impl FromStr for DomainCategory {
    type Err = UnknownDomain;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "photoshop" => Ok(DomainCategory::Photoshop),
            "deepfake" => Ok(DomainCategory::Deepfake),
            "aigc" | "aigc-editing" => Ok(DomainCategory::Aigc),
            _ => Err(UnknownDomain(s.to_string())),
        }
    }
}

/// A domain together with its rendered tag sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainTag {
    pub category: DomainCategory,
    pub sentence: String,
}

impl DomainTag {
    pub fn new(category: DomainCategory) -> Self {
        Self { category, sentence: render_domain_tag(category) }
    }
}

/// `"This is a suspected {domain}-tampered picture."`
pub fn render_domain_tag(category: DomainCategory) -> String {
    format!("This is a suspected {}-tampered picture.", category.display_name())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_sentences_are_exact() {
        assert_eq!(render_domain_tag(DomainCategory::Photoshop), "This is a suspected PhotoShop-tampered picture.");
        assert_eq!(render_domain_tag(DomainCategory::Deepfake), "This is a suspected DeepFake-tampered picture.");
        assert_eq!(render_domain_tag(DomainCategory::Aigc), "This is a suspected AIGC-Editing-tampered picture.");
    }

    #[test]
    fn tags_are_a_bijection() {
        let sentences: std::collections::BTreeSet<_> = DomainCategory::ALL.iter().map(|&d| render_domain_tag(d)).collect();
        assert_eq!(sentences.len(), 3);
        for d in DomainCategory::ALL {
            assert_eq!(DomainCategory::from_code(d.code()), Some(d));
            assert_eq!(d.as_str().parse::<DomainCategory>().unwrap(), d);
            assert_eq!(DomainTag::new(d).sentence, render_domain_tag(d));
        }
        assert!(DomainCategory::from_code(3).is_none());
    }

    #[test]
    fn serde_uses_lowercase_names() {
        assert_eq!(serde_json::to_string(&DomainCategory::Aigc).unwrap(), "\"aigc\"");
        let d: DomainCategory = serde_json::from_str("\"deepfake\"").unwrap();
        assert_eq!(d, DomainCategory::Deepfake);
    }
}
