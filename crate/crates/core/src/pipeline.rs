//! Tag classifier, detector and locator chained for one image.

use std::path::Path;

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::description::OutputFlag;
use crate::detector::{DetectionOutput, Detector, DetectorError};
use crate::domain::DomainTag;
use crate::dtg::{classify_domain, DomainPrediction, DtgError, DtgModel};
use crate::locator::{Locator, LocatorError, LocatorQuery, TamperMask};
use crate::prompt::Turn;
use crate::scalar::Scalar;
use crate::tokenizer::ByteTokenizer;

pub const DTG_FILE: &str = "dtg.json";
pub const DETECTOR_FILE: &str = "detector.json";
pub const LOCATOR_FILE: &str = "locator.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dtg(#[from] DtgError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Locator(#[from] LocatorError),
}

/// Weights versions of the three models, fixed for a session's lifetime.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVersions {
    pub dtg: String,
    pub detector: String,
    pub locator: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub domain: DomainPrediction,
    pub tag: DomainTag,
    pub instruction: String,
    pub detection: DetectionOutput,
    /// Present iff the verdict is tampered.
    pub mask: Option<TamperMask>,
    pub locator_answer: Option<String>,
    /// Detection flags followed by locator flags.
    pub flags: Vec<OutputFlag>,
}

impl Analysis {
    pub fn opening_turn(&self) -> TextTurn {
        TextTurn { question: self.instruction.clone(), answer: self.detection.raw_text.clone() }
    }
}

/// One finished exchange of a conversation, as text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextTurn {
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug)]
pub struct Pipeline<F: Scalar> {
    pub dtg: DtgModel<F>,
    pub detector: Detector<F>,
    pub locator: Locator<F>,
    /// Instruction given to the detector for a fresh analysis.
    pub instruction: String,
}

impl<F: Scalar> Pipeline<F> {
    pub fn new(dtg: DtgModel<F>, detector: Detector<F>, locator: Locator<F>) -> Self {
        let instruction = detector.config.instructions.first().cloned().unwrap_or_else(|| crate::detector::DEFAULT_INSTRUCTION.into());
        Self { dtg, detector, locator, instruction }
    }

    /// Loads `dtg.json`, `detector.json` and `locator.json` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        Ok(Self::new(DtgModel::load(&dir.join(DTG_FILE))?, Detector::load(&dir.join(DETECTOR_FILE))?, Locator::load(&dir.join(LOCATOR_FILE))?))
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        self.dtg.save(&dir.join(DTG_FILE))?;
        self.detector.save(&dir.join(DETECTOR_FILE))?;
        self.locator.save(&dir.join(LOCATOR_FILE))?;
        Ok(())
    }

    pub fn versions(&self) -> ModelVersions {
        ModelVersions {
            dtg: self.dtg.weights_version.clone(),
            detector: self.detector.weights_version.clone(),
            locator: self.locator.weights_version.clone(),
        }
    }

    /// Classify the domain, detect with the predicted tag, and localize only
    /// when the verdict is tampered.
    pub fn analyze(&self, image: &RgbImage) -> Result<Analysis, PipelineError> {
        let domain = classify_domain(&self.dtg, image);
        let tag = domain.tag();
        let detection = self.detector.detect(image, &tag, &self.instruction)?;
        let mut flags = detection.flags.clone();
        let (mask, locator_answer) = if detection.description.verdict.is_tampered() {
            let out = self.locator.locate(LocatorQuery { image, description: &detection.raw_text, domain: domain.category }, true)?;
            flags.extend(out.flags);
            (Some(out.mask), Some(out.answer))
        } else {
            (None, None)
        };
        Ok(Analysis { domain, tag, instruction: self.instruction.clone(), detection, mask, locator_answer, flags })
    }

    pub fn image_tokens(&self, image: &RgbImage) -> Array2<F> {
        self.detector.encode_image(image)
    }

    /// Answers a follow-up. `opening` is the analysis exchange, the
    /// instruction and the detector's description; `turns` follow it.
    pub fn follow_up(&self, image_tokens: &Array2<F>, tag: &DomainTag, opening: &TextTurn, turns: &[TextTurn], question: &str) -> Result<String, PipelineError> {
        let tok = ByteTokenizer;
        let history: Vec<Turn> = std::iter::once(opening)
            .chain(turns)
            .map(|t| Turn { question: tok.encode(&t.question), answer: tok.encode(&t.answer) })
            .collect();
        Ok(self.detector.answer(image_tokens, tag, &history, question)?)
    }
}
