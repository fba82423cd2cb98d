//! Externally produced predictions.
//!
//! ```text
//! verdicts.csv          id,verdict[,text]
//! masks/{id}.png        8- or 16-bit gray, full scale is probability 1
//! {jpeg-70,...}/        the same layout per degradation, optional
//! ```
//!
//! A record without a mask file has an empty predicted mask.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{DegradationSpec, EvalError, Prediction, PredictionProvider};
use crate::dataset::AnalysisRecord;
use crate::description::Verdict;
use crate::imaging::decode_probability_png;

pub const VERDICTS_FILE: &str = "verdicts.csv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub text: Option<String>,
}

#[derive(Clone, Debug)]
struct PredictionSet {
    dir: PathBuf,
    rows: HashMap<String, PredictionRow>,
}

impl PredictionSet {
    fn load(dir: &Path) -> Result<Self, EvalError> {
        let path = dir.join(VERDICTS_FILE);
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(&path)
            .map_err(|e| EvalError::Predictions(format!("{}: {e}", path.display())))?;
        let mut rows = HashMap::new();
        for row in reader.deserialize::<PredictionRow>() {
            let row = row.map_err(|e| EvalError::Predictions(format!("{}: {e}", path.display())))?;
            if rows.contains_key(&row.id) {
                return Err(EvalError::Predictions(format!("duplicate id {} in {}", row.id, path.display())));
            }
            rows.insert(row.id.clone(), row);
        }
        Ok(Self { dir: dir.to_path_buf(), rows })
    }

    fn predict(&self, id: &str) -> Result<Prediction, EvalError> {
        let row = self.rows.get(id).ok_or_else(|| EvalError::MissingPrediction(id.to_string()))?;
        let mask_path = self.dir.join("masks").join(format!("{id}.png"));
        let mask = match std::fs::read(&mask_path) {
            Ok(bytes) => Some(decode_probability_png(&bytes).map_err(|e| EvalError::Predictions(format!("{}: {e}", mask_path.display())))?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(EvalError::Predictions(format!("{}: {e}", mask_path.display()))),
        };
        Ok(Prediction { verdict: row.verdict, text: row.text.clone().unwrap_or_default(), mask, flags: Vec::new() })
    }
}

/// Predictions of a baseline, read from a directory.
#[derive(Clone, Debug)]
pub struct ExternalPredictions {
    name: String,
    clean: PredictionSet,
    degraded: HashMap<String, PredictionSet>,
}

impl ExternalPredictions {
    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let clean = PredictionSet::load(dir)?;
        let mut degraded = HashMap::new();
        for spec in DegradationSpec::SUITE {
            let sub = dir.join(spec.slug());
            if sub.join(VERDICTS_FILE).exists() {
                degraded.insert(spec.slug(), PredictionSet::load(&sub)?);
            }
        }
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        Ok(Self { name, clean, degraded })
    }

    /// Writes `rows` and masks in the layout [`load`](Self::load) reads.
    pub fn write(dir: &Path, rows: &[PredictionRow], masks: &[(String, Vec<u8>)]) -> Result<(), EvalError> {
        let io = |e: std::io::Error| EvalError::Io { path: dir.display().to_string(), message: e.to_string() };
        std::fs::create_dir_all(dir.join("masks")).map_err(io)?;
        let mut w = csv::Writer::from_path(dir.join(VERDICTS_FILE)).map_err(|e| EvalError::Predictions(e.to_string()))?;
        for row in rows {
            w.serialize(row).map_err(|e| EvalError::Predictions(e.to_string()))?;
        }
        w.flush().map_err(io)?;
        for (id, png) in masks {
            std::fs::write(dir.join("masks").join(format!("{id}.png")), png).map_err(io)?;
        }
        Ok(())
    }
}

impl PredictionProvider for ExternalPredictions {
    fn id(&self) -> String {
        format!("external:{}", self.name)
    }

    fn predict(&self, record: &AnalysisRecord, _image: &RgbImage, degradation: Option<DegradationSpec>) -> Result<Option<Prediction>, EvalError> {
        let set = match degradation {
            None => &self.clean,
            Some(spec) => match self.degraded.get(&spec.slug()) {
                Some(s) => s,
                None => return Ok(None),
            },
        };
        set.predict(&record.id).map(Some)
    }
}
