use serde::{Deserialize, Serialize};
use tamperscope_core::description::{OutputFlag, Verdict};
use tamperscope_core::domain::DomainTag;
use tamperscope_core::pipeline::{Analysis, ModelVersions, TextTurn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Pending,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub verdict: Verdict,
    pub location: String,
    pub basis: String,
    /// Detector output before parsing.
    pub raw_text: String,
    pub flags: Vec<OutputFlag>,
}

/// Everything the pipeline produced for the session's image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub domain_tag: DomainTag,
    pub domain_probs: [f64; 3],
    pub instruction: String,
    pub detection: Detection,
    /// Present iff the verdict is tampered; empty under the `no_seg` flag.
    pub mask_ref: Option<String>,
    pub locator_answer: Option<String>,
    /// Detection flags followed by locator flags.
    pub flags: Vec<OutputFlag>,
}

impl AnalysisResult {
    pub fn new(analysis: &Analysis, mask_ref: Option<String>) -> Self {
        let d = &analysis.detection;
        Self {
            domain_tag: analysis.tag.clone(),
            domain_probs: analysis.domain.probs,
            instruction: analysis.instruction.clone(),
            detection: Detection {
                verdict: d.description.verdict,
                location: d.description.location_text.clone(),
                basis: d.description.basis_text.clone(),
                raw_text: d.raw_text.clone(),
                flags: d.flags.clone(),
            },
            mask_ref,
            locator_answer: analysis.locator_answer.clone(),
            flags: analysis.flags.clone(),
        }
    }

    pub fn opening_turn(&self) -> TextTurn {
        TextTurn { question: self.instruction.clone(), answer: self.detection.raw_text.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub question: String,
    pub answer: String,
    /// Unix seconds.
    pub timestamp: u64,
}

/// Persisted session. Turns only grow and model versions never change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub status: SessionStatus,
    /// Unix seconds.
    pub created_at: u64,
    pub image_ref: String,
    pub model_versions: ModelVersions,
    pub result: Option<AnalysisResult>,
    pub error: Option<String>,
    pub turns: Vec<TurnRecord>,
}

impl SessionRecord {
    pub fn blob_refs(&self) -> impl Iterator<Item = String> + '_ {
        std::iter::once(self.image_ref.clone()).chain(self.result.as_ref().and_then(|r| r.mask_ref.clone()))
    }

    pub fn text_turns(&self) -> Vec<TextTurn> {
        self.turns.iter().map(|t| TextTurn { question: t.question.clone(), answer: t.answer.clone() }).collect()
    }
}

/// `GET /sessions/{id}` body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub record: SessionRecord,
    pub expires_at: u64,
}

/// `POST /analyze` body once the analysis finished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeResponse {
    pub session_id: String,
    pub status: SessionStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub verdict: Option<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub location: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub basis: Option<String>,
    #[serde(default)]
    pub flags: Vec<OutputFlag>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub domain_tag: Option<String>,
    /// Path of the mask PNG when one exists.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_url: Option<String>,
}

impl AnalyzeResponse {
    pub fn pending(session_id: String) -> Self {
        Self { session_id, status: SessionStatus::Pending, verdict: None, location: None, basis: None, flags: Vec::new(), domain_tag: None, mask_url: None }
    }

    pub fn from_record(record: &SessionRecord) -> Self {
        let Some(r) = &record.result else { return Self { status: record.status, ..Self::pending(record.session_id.clone()) } };
        Self {
            session_id: record.session_id.clone(),
            status: record.status,
            verdict: Some(r.detection.verdict),
            location: Some(r.detection.location.clone()),
            basis: Some(r.detection.basis.clone()),
            flags: r.flags.clone(),
            domain_tag: Some(r.domain_tag.sentence.clone()),
            mask_url: r.mask_ref.as_ref().map(|_| format!("/sessions/{}/mask", record.session_id)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowUpRequest {
    pub question: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowUpResponse {
    pub session_id: String,
    pub answer: String,
    pub turns: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}
