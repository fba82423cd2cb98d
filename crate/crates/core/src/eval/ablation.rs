//! Variant training for the domain-tag, corrected-description and
//! locator-input ablations.
//!
//! Flags:
//!
//! ```text
//! disable_dtg                  detector trained and run without the tag
//! mflm_inputs=<inputs>         locator inputs, e.g. instruction+tag
//! train_on_correct_o_det       locator target is the reference description
//!                              followed by the segmentation prompt
//! ```
//!
//! A suite's `ablations` list holds table names (`domain_tag`,
//! `corrected_description`, `locator_inputs`) or comma-separated flag sets,
//! each of which adds a row to a custom table.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{fmt4, score_prediction, Confusion, EvalError, LocalizationEval, Prediction, Table};
use crate::dataset::{AnalysisRecord, Dataset, DatasetError};
use crate::detector::{train_detector, Detector, DetectorConfig};
use crate::domain::DomainTag;
use crate::dtg::{classify_domain, DtgModel};
use crate::imaging::BinaryMask;
use crate::locator::{train_locator, DescriptionSource, Locator, LocatorConfig, LocatorInputs, LocatorQuery};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationFlag {
    DisableDtg,
    MflmInputs(LocatorInputs),
    TrainOnCorrectDescription,
}

impl FromStr for AblationFlag {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "disable_dtg" => Ok(AblationFlag::DisableDtg),
            "train_on_correct_o_det" => Ok(AblationFlag::TrainOnCorrectDescription),
            _ => match s.strip_prefix("mflm_inputs=") {
                Some(v) => v.parse().map(AblationFlag::MflmInputs).map_err(|_| EvalError::UnknownAblation(s.to_string())),
                None => Err(EvalError::UnknownAblation(s.to_string())),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationSettings {
    pub disable_dtg: bool,
    pub mflm_inputs: LocatorInputs,
    pub train_on_correct_description: bool,
}

impl AblationSettings {
    pub fn from_flags<S: AsRef<str>>(flags: &[S]) -> Result<Self, EvalError> {
        let mut s = Self::default();
        for f in flags {
            match f.as_ref().parse()? {
                AblationFlag::DisableDtg => s.disable_dtg = true,
                AblationFlag::MflmInputs(v) => s.mflm_inputs = v,
                AblationFlag::TrainOnCorrectDescription => s.train_on_correct_description = true,
            }
        }
        Ok(s)
    }

    /// Canonical flag list; empty for the full system.
    pub fn flags(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.disable_dtg {
            out.push("disable_dtg".to_string());
        }
        if self.mflm_inputs != LocatorInputs::default() {
            out.push(format!("mflm_inputs={}", self.mflm_inputs.as_str()));
        }
        if self.train_on_correct_description {
            out.push("train_on_correct_o_det".to_string());
        }
        out
    }
}

/// Which outputs a table scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Need {
    Detection,
    Localization,
    Both,
}

impl Need {
    fn detection(self) -> bool {
        matches!(self, Need::Detection | Need::Both)
    }

    fn localization(self) -> bool {
        matches!(self, Need::Localization | Need::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AblationTable {
    /// Detector with and without the domain tag.
    DomainTag,
    /// Locator trained toward the segmentation prompt or toward the
    /// reference description plus the prompt.
    CorrectedDescription,
    /// The four locator input combinations.
    LocatorInputs,
    /// Rows given as flag sets.
    Custom(Vec<AblationSettings>),
}

impl AblationTable {
    pub fn name(&self) -> &'static str {
        match self {
            AblationTable::DomainTag => "ablation_domain_tag",
            AblationTable::CorrectedDescription => "ablation_corrected_description",
            AblationTable::LocatorInputs => "ablation_locator_inputs",
            AblationTable::Custom(_) => "ablation_custom",
        }
    }

    fn title(&self) -> &'static str {
        match self {
            AblationTable::DomainTag => "Detection with and without the domain tag",
            AblationTable::CorrectedDescription => "Localization with a corrected-description target",
            AblationTable::LocatorInputs => "Localization by locator inputs",
            AblationTable::Custom(_) => "Custom ablations",
        }
    }

    pub fn need(&self) -> Need {
        match self {
            AblationTable::DomainTag => Need::Detection,
            AblationTable::CorrectedDescription | AblationTable::LocatorInputs => Need::Localization,
            AblationTable::Custom(_) => Need::Both,
        }
    }

    /// Labeled rows in table order; the full system comes last, as in the
    /// reference tables.
    pub fn variants(&self) -> Vec<(String, AblationSettings)> {
        let full = AblationSettings::default();
        match self {
            AblationTable::DomainTag => {
                vec![("without tag".into(), AblationSettings { disable_dtg: true, ..full }), ("with tag".into(), full)]
            }
            AblationTable::CorrectedDescription => vec![
                ("corrected description target".into(), AblationSettings { train_on_correct_description: true, ..full }),
                ("segmentation prompt target".into(), full),
            ],
            AblationTable::LocatorInputs => [
                LocatorInputs::InstructionImage,
                LocatorInputs::InstructionTag,
                LocatorInputs::InstructionTagImage,
                LocatorInputs::DescriptionImage,
            ]
            .into_iter()
            .map(|v| (v.as_str().to_string(), AblationSettings { mflm_inputs: v, ..full }))
            .collect(),
            AblationTable::Custom(rows) => {
                rows.iter().map(|s| (if s.flags().is_empty() { "full".into() } else { s.flags().join(",") }, *s)).collect()
            }
        }
    }
}

/// Parses a suite's ablation list: table names and flag sets.
pub fn parse_ablations<S: AsRef<str>>(entries: &[S]) -> Result<Vec<AblationTable>, EvalError> {
    let mut tables = Vec::new();
    let mut custom = Vec::new();
    for e in entries {
        match e.as_ref().trim() {
            "domain_tag" => tables.push(AblationTable::DomainTag),
            "corrected_description" => tables.push(AblationTable::CorrectedDescription),
            "locator_inputs" => tables.push(AblationTable::LocatorInputs),
            flags => custom.push(AblationSettings::from_flags(&flags.split(',').collect::<Vec<_>>())?),
        }
    }
    if !custom.is_empty() {
        tables.push(AblationTable::Custom(custom));
    }
    Ok(tables)
}

/// Trains (or reuses) the models of a variant and predicts `records`.
pub trait VariantRunner {
    fn run(&mut self, settings: &AblationSettings, need: Need, records: &[AnalysisRecord]) -> Result<Vec<Prediction>, EvalError>;
}

fn column_groups(records: &[AnalysisRecord]) -> Vec<(String, Vec<usize>)> {
    let mut by_domain: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_domain.entry(r.domain).or_default().push(i);
    }
    let mut out = vec![("all".to_string(), (0..records.len()).collect())];
    out.extend(by_domain.into_iter().map(|(d, v)| (d.as_str().to_string(), v)));
    out
}

/// One table per entry of `tables`, each row a variant scored on `records`.
pub fn run_ablations(
    runner: &mut dyn VariantRunner,
    dataset: &Dataset,
    records: &[AnalysisRecord],
    tables: &[AblationTable],
    threshold: f64,
) -> Result<Vec<Table>, EvalError> {
    let gts: Vec<BinaryMask> = records
        .iter()
        .map(|r| {
            let img = dataset.load_image(r).map_err(DatasetError::from)?;
            Ok(dataset.load_mask(r).map_err(DatasetError::from)?.unwrap_or_else(|| BinaryMask::from_elem((img.height() as usize, img.width() as usize), false)))
        })
        .collect::<Result<_, EvalError>>()?;
    let groups = column_groups(records);
    let mut out = Vec::new();
    for table in tables {
        let need = table.need();
        let mut columns = vec!["variant".to_string(), "flags".to_string()];
        for (g, _) in &groups {
            if need.detection() {
                columns.extend([format!("{g}_acc"), format!("{g}_f1")]);
            }
            if need.localization() {
                columns.extend([format!("{g}_iou"), format!("{g}_pixel_f1")]);
            }
        }
        let mut t = Table { name: table.name().into(), title: table.title().into(), columns, rows: Vec::new(), notes: Vec::new() };
        if need.localization() {
            t.notes.push("localization over tampered images".into());
        }
        for (label, settings) in table.variants() {
            let preds = runner.run(&settings, need, records)?;
            if preds.len() != records.len() {
                return Err(EvalError::Length { preds: preds.len(), gts: records.len() });
            }
            let mut row = vec![label, settings.flags().join(" ")];
            for (_, idx) in &groups {
                if need.detection() {
                    let mut c = Confusion::default();
                    for &i in idx {
                        c.add(preds[i].verdict, records[i].authentic);
                    }
                    row.extend([fmt4(c.accuracy()), fmt4(c.f1())]);
                }
                if need.localization() {
                    let mut scores = Vec::new();
                    for &i in idx.iter().filter(|&&i| !records[i].authentic) {
                        let pred = match &preds[i].mask {
                            Some(p) => super::binarize(p, threshold),
                            None => BinaryMask::from_elem(gts[i].dim(), false),
                        };
                        scores.push(score_prediction(&pred, &gts[i])?);
                    }
                    if scores.is_empty() {
                        row.extend(["n/a".to_string(), "n/a".to_string()]);
                    } else {
                        let e = LocalizationEval::from_scores(scores);
                        row.extend([fmt4(e.mean_iou), fmt4(e.mean_pixel_f1)]);
                    }
                }
            }
            t.rows.push(row);
        }
        out.push(t);
    }
    Ok(out)
}

/// What the locator reads at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDescriptions {
    /// Reference descriptions, isolating the locator from detector errors.
    #[default]
    Reference,
    /// The variant detector's generations.
    Detector,
}

/// Trains every variant from `train` with the given base configurations.
/// Models are cached per setting, so rows shared between tables train once.
pub struct TrainingRunner<'a, F: Scalar> {
    pub dataset: &'a Dataset,
    pub train: Vec<AnalysisRecord>,
    pub detector: DetectorConfig,
    pub locator: LocatorConfig,
    /// Tags at evaluation come from this classifier, or from labels without one.
    pub dtg: Option<&'a DtgModel<F>>,
    pub eval_descriptions: EvalDescriptions,
    detectors: HashMap<bool, Detector<F>>,
    locators: HashMap<(LocatorInputs, bool), Locator<F>>,
    /// Final training loss of each trained model, by name.
    pub losses: Vec<(String, f64)>,
}

impl<'a, F: Scalar> TrainingRunner<'a, F> {
    pub fn new(dataset: &'a Dataset, train: Vec<AnalysisRecord>, detector: DetectorConfig, locator: LocatorConfig) -> Self {
        Self {
            dataset,
            train,
            detector,
            locator,
            dtg: None,
            eval_descriptions: EvalDescriptions::default(),
            detectors: HashMap::new(),
            locators: HashMap::new(),
            losses: Vec::new(),
        }
    }

    fn model_error(e: impl std::fmt::Display) -> EvalError {
        EvalError::Model(e.to_string())
    }

    fn detector(&mut self, disable_dtg: bool) -> Result<&Detector<F>, EvalError> {
        if !self.detectors.contains_key(&disable_dtg) {
            let mut config = self.detector.clone();
            config.use_domain_tag = !disable_dtg;
            let mut model = Detector::new(config);
            let samples = self.dataset.detection_samples(&self.train)?;
            let report = train_detector(&mut model, &samples, None).map_err(Self::model_error)?;
            self.losses.push((format!("detector{}", if disable_dtg { " without tag" } else { "" }), report.final_loss));
            self.detectors.insert(disable_dtg, model);
        }
        Ok(&self.detectors[&disable_dtg])
    }

    fn locator(&mut self, s: &AblationSettings) -> Result<(), EvalError> {
        let key = (s.mflm_inputs, s.train_on_correct_description);
        if self.locators.contains_key(&key) {
            return Ok(());
        }
        let mut config = self.locator.clone();
        config.inputs = s.mflm_inputs;
        config.train.correct_description_target = s.train_on_correct_description;
        let samples = match config.train.description_source {
            DescriptionSource::Dataset => self.dataset.locator_samples::<F>(&self.train, None)?,
            DescriptionSource::Detector => {
                let (dataset, train) = (self.dataset, self.train.clone());
                dataset.locator_samples(&train, Some(self.detector(s.disable_dtg)?))?
            }
        };
        let mut model = Locator::new(config);
        let report = train_locator(&mut model, &samples).map_err(Self::model_error)?;
        let mut name = format!("locator {}", s.mflm_inputs.as_str());
        if s.train_on_correct_description {
            name.push_str(" corrected");
        }
        self.losses.push((name, report.final_loss));
        self.locators.insert(key, model);
        Ok(())
    }
}

impl<F: Scalar> VariantRunner for TrainingRunner<'_, F> {
    fn run(&mut self, settings: &AblationSettings, need: Need, records: &[AnalysisRecord]) -> Result<Vec<Prediction>, EvalError> {
        let mut preds: Vec<Prediction> = records
            .iter()
            .map(|r| Prediction { verdict: r.description.verdict, text: r.description.to_text(), mask: None, flags: Vec::new() })
            .collect();
        let detection_needed = need.detection() || (need.localization() && self.eval_descriptions == EvalDescriptions::Detector);
        if detection_needed {
            let dtg = self.dtg;
            let dataset = self.dataset;
            let detector = self.detector(settings.disable_dtg)?;
            for (p, r) in preds.iter_mut().zip(records) {
                let image = dataset.load_image(r).map_err(DatasetError::from)?;
                let tag = match dtg {
                    Some(m) => classify_domain(m, &image).tag(),
                    None => DomainTag::new(r.domain),
                };
                let out = detector.detect(&image, &tag, &detector.config.instructions[0]).map_err(Self::model_error)?;
                p.verdict = out.description.verdict;
                p.text = out.raw_text;
                p.flags = out.flags;
            }
        }
        if need.localization() {
            self.locator(settings)?;
            let locator = &self.locators[&(settings.mflm_inputs, settings.train_on_correct_description)];
            for (p, r) in preds.iter_mut().zip(records) {
                let image = self.dataset.load_image(r).map_err(DatasetError::from)?;
                let description = match self.eval_descriptions {
                    EvalDescriptions::Reference => r.description.to_text(),
                    EvalDescriptions::Detector => p.text.clone(),
                };
                let out = locator.locate(LocatorQuery { image: &image, description: &description, domain: r.domain }, true).map_err(Self::model_error)?;
                p.mask = Some(out.mask.probs);
                p.flags.extend(out.flags);
            }
        }
        Ok(preds)
    }
}
