//! The three-section forensic description: verdict, location, judgment basis.
//!
//! Text form, one header per section, in this order:
//!
//! ```text
//! VERDICT: tampered
//! LOCATION: upper left corner, above the table
//! BASIS: blurred edges around the pasted object
//! ```
//!
//! A section runs from its header to the next header (or the end of text) and
//! is trimmed. The verdict token is case-insensitive.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Tampered,
    Authentic,
}

impl Verdict {
    pub fn is_tampered(self) -> bool {
        self == Verdict::Tampered
    }

    pub fn from_authentic(authentic: bool) -> Self {
        if authentic {
            Verdict::Authentic
        } else {
            Verdict::Tampered
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            Verdict::Tampered => "tampered",
            Verdict::Authentic => "authentic",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Verdict {
    type Err = DescriptionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let token = s.trim().trim_end_matches('.');
        if token.eq_ignore_ascii_case("tampered") {
            Ok(Verdict::Tampered)
        } else if token.eq_ignore_ascii_case("authentic") {
            Ok(Verdict::Authentic)
        } else {
            Err(DescriptionError::InvalidVerdict(s.trim().to_string()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Verdict,
    Location,
    Basis,
}

impl Section {
    pub const ORDER: [Section; 3] = [Section::Verdict, Section::Location, Section::Basis];

    pub const fn header(self) -> &'static str {
        match self {
            Section::Verdict => "VERDICT:",
            Section::Location => "LOCATION:",
            Section::Basis => "BASIS:",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.header().trim_end_matches(':'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DescriptionError {
    #[error("missing {0} section")]
    MissingSection(Section),
    #[error("verdict `{0}` is neither `tampered` nor `authentic`")]
    InvalidVerdict(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredDescription {
    pub verdict: Verdict,
    pub location_text: String,
    pub basis_text: String,
}

impl StructuredDescription {
    /// Renders the header contract; the inverse of [`parse_description`].
    pub fn to_text(&self) -> String {
        format!(
            "{} {}\n{} {}\n{} {}",
            Section::Verdict.header(),
            self.verdict,
            Section::Location.header(),
            self.location_text,
            Section::Basis.header(),
            self.basis_text
        )
    }
}

impl fmt::Display for StructuredDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Splits `raw` into its three sections.
pub fn parse_description(raw: &str) -> Result<StructuredDescription, DescriptionError> {
    let lines: Vec<&str> = raw.lines().collect();
    let mut starts = [0usize; 3];
    let mut from = 0;
    for (slot, section) in Section::ORDER.iter().enumerate() {
        let found = lines[from..]
            .iter()
            .position(|line| line.trim_start().starts_with(section.header()))
            .ok_or(DescriptionError::MissingSection(*section))?;
        starts[slot] = from + found;
        from = starts[slot] + 1;
    }
    let body = |slot: usize| -> String {
        let section = Section::ORDER[slot];
        let end = if slot + 1 < starts.len() { starts[slot + 1] } else { lines.len() };
        let first = lines[starts[slot]].trim_start()[section.header().len()..].to_string();
        let mut text = first;
        for line in &lines[starts[slot] + 1..end] {
            text.push('\n');
            text.push_str(line);
        }
        text.trim().to_string()
    };
    let verdict = body(0).parse()?;
    Ok(StructuredDescription { verdict, location_text: body(1), basis_text: body(2) })
}

/// Marks on a model output that downstream consumers must see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFlag {
    /// The answer did not parse; the verdict comes from the `tamper` stem.
    LowConfidence,
    /// Generation hit its token budget before finishing.
    Truncated,
    /// The locator never produced a segmentation token; the mask is empty.
    NoSeg,
}

/// Verdict fallback for unparseable text: tampered iff the text contains the
/// stem `tamper` in any case.
pub fn fallback_verdict(raw: &str) -> Verdict {
    Verdict::from_authentic(!raw.to_lowercase().contains("tamper"))
}

/// Absolute position vocabulary for location descriptions.
pub const ABSOLUTE_POSITION_TERMS: [&str; 6] = ["top", "bottom", "left", "right", "center", "corner"];

/// Relative position phrases for location descriptions.
pub const RELATIVE_POSITION_PHRASES: [&str; 14] = [
    "above", "below", "under", "beneath", "behind", "beside", "next to", "in front of", "on the", "near",
    "around", "between", "inside", "over the",
];

/// Whether `text` names a position, absolutely (top, left, ...) or relative to
/// something else (above, next to, ...).
pub fn mentions_position(text: &str) -> bool {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
    let absolute = words.iter().any(|w| {
        ABSOLUTE_POSITION_TERMS.iter().any(|t| w == t || (w.starts_with(t) && matches!(&w[t.len()..], "s" | "most")))
            || matches!(*w, "upper" | "lower" | "centre" | "middle")
    });
    if absolute {
        return true;
    }
    let joined = format!(" {} ", words.join(" "));
    RELATIVE_POSITION_PHRASES.iter().any(|p| joined.contains(&format!(" {p} ")))
}
