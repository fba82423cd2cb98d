//! Metrics, robustness and ablation reports for the pipeline or for
//! externally supplied predictions.
//!
//! A suite run writes one CSV per table plus `report.txt` (all tables, fixed
//! width) and `report.json`. Identical inputs give identical bytes.

pub mod ablation;
mod css;
mod degrade;
mod lexicon;
mod metrics;
mod predictions;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use css::{cosine, eval_css, Embedder, EmbedderConfig, ExplanationEval, HashEmbedder, LiveEmbedder, LiveEmbedderConfig};
pub use degrade::{degrade_image, jpeg_bytes, DegradationKind, DegradationSpec};
pub use lexicon::{answer_lexicon_profile, nouns_and_adjectives, LexiconEntry, LexiconTagger, PartOfSpeech, PosTagger};
pub use metrics::{
    binarize, eval_detection, eval_localization, score_masks, score_prediction, Confusion, DetectionEval, LocalizationEval, MaskScore,
};
pub use predictions::{ExternalPredictions, PredictionRow, VERDICTS_FILE};

use crate::checkpoint::write_atomic;
use crate::dataset::{AnalysisRecord, Dataset, DatasetError};
use crate::description::{OutputFlag, Verdict};
use crate::imaging::BinaryMask;
use crate::pipeline::Pipeline;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{preds} predictions for {gts} ground-truth items")]
    Length { preds: usize, gts: usize },
    #[error("prediction mask {pred:?} and ground truth {gt:?} differ in shape")]
    Shape { pred: (usize, usize), gt: (usize, usize) },
    #[error("invalid degradation {0:?}")]
    Degradation(DegradationSpec),
    #[error("image codec: {0}")]
    Image(String),
    #[error("embedder: {0}")]
    Embedder(String),
    #[error("unknown ablation flag `{0}`")]
    UnknownAblation(String),
    #[error("no split named `{0}`")]
    UnknownSplit(String),
    #[error("no prediction for record {0}")]
    MissingPrediction(String),
    #[error("predictions: {0}")]
    Predictions(String),
    #[error("model: {0}")]
    Model(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

/// One system output for one record.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub verdict: Verdict,
    /// Explanation compared with the reference description.
    pub text: String,
    /// Tamper probabilities; `None` is an empty mask.
    pub mask: Option<Array2<f64>>,
    pub flags: Vec<OutputFlag>,
}

/// Source of predictions under a named condition.
pub trait PredictionProvider: Sync {
    fn id(&self) -> String;

    /// `image` has already been degraded per `degradation`. `None` means the
    /// provider has no predictions for this condition.
    fn predict(&self, record: &AnalysisRecord, image: &RgbImage, degradation: Option<DegradationSpec>)
        -> Result<Option<Prediction>, EvalError>;
}

impl<F: Scalar> PredictionProvider for Pipeline<F> {
    fn id(&self) -> String {
        let v = self.versions();
        format!("pipeline dtg={} detector={} locator={}", v.dtg, v.detector, v.locator)
    }

    fn predict(&self, _record: &AnalysisRecord, image: &RgbImage, _: Option<DegradationSpec>) -> Result<Option<Prediction>, EvalError> {
        let a = self.analyze(image).map_err(|e| EvalError::Model(e.to_string()))?;
        Ok(Some(Prediction {
            verdict: a.detection.description.verdict,
            text: a.detection.raw_text,
            mask: a.mask.map(|m| m.probs),
            flags: a.flags,
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub split: String,
    pub threshold: f64,
    /// Seed of the noise degradations.
    pub seed: u64,
    pub degradations: Vec<DegradationSpec>,
    pub embedder: EmbedderConfig,
    /// Width of the per-image worker pool.
    pub workers: usize,
    /// Rows of the lexicon profile table.
    pub lexicon_top: usize,
    /// Ablation flags of extra tables; see [`ablation::AblationTable`].
    pub ablations: Vec<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            split: "eval".into(),
            threshold: 0.5,
            seed: 0,
            degradations: DegradationSpec::SUITE.to_vec(),
            embedder: EmbedderConfig::default(),
            workers: 1,
            lexicon_top: 20,
            ablations: Vec::new(),
        }
    }
}

/// A titled grid of preformatted cells.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    /// File stem of the table's CSV.
    pub name: String,
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub notes: Vec<String>,
}

impl Table {
    pub fn new(name: &str, title: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), title: title.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new(), notes: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Cell of the first row whose first cell is `key`.
    pub fn cell(&self, key: &str, column: &str) -> Option<&str> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r[0] == key).map(|r| r[c].as_str())
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory csv");
        for row in &self.rows {
            w.write_record(row).expect("in-memory csv");
        }
        w.into_inner().expect("in-memory csv")
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<usize> =
            (0..self.columns.len()).map(|c| self.rows.iter().map(|r| r[c].len()).chain([self.columns[c].len()]).max().unwrap_or(0)).collect();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
                if i == 0 {
                    let _ = write!(s, "{cell:<w$}");
                } else {
                    let _ = write!(s, "  {cell:>w$}");
                }
            }
            s.trim_end().to_string()
        };
        let mut out = format!("{}\n{}\n", self.title, "=".repeat(self.title.len()));
        out.push_str(&line(&self.columns));
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provider: String,
    pub split: String,
    pub records: usize,
    pub embedder_id: String,
    pub threshold: f64,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "provider: {}\nsplit: {} ({} records)\nembedder: {}\nthreshold: {}\n",
            self.provider, self.split, self.records, self.embedder_id, self.threshold
        );
        for t in &self.tables {
            out.push('\n');
            out.push_str(&t.to_text());
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        let put = |name: String, bytes: &[u8]| {
            let path = dir.join(name);
            write_atomic(&path, bytes).map_err(|e| EvalError::Io { path: path.display().to_string(), message: e.to_string() })
        };
        std::fs::create_dir_all(dir).map_err(|e| EvalError::Io { path: dir.display().to_string(), message: e.to_string() })?;
        for t in &self.tables {
            put(format!("{}.csv", t.name), &t.to_csv())?;
        }
        put("report.txt".into(), self.to_text().as_bytes())?;
        let mut json = serde_json::to_vec_pretty(self).expect("report serializes");
        json.push(b'\n');
        put("report.json".into(), &json)
    }
}

pub fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

/// Per-record noise seed, independent of evaluation order.
pub fn record_seed(seed: u64, id: &str) -> u64 {
    let h = Sha256::digest(id.as_bytes());
    seed ^ u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Everything scored about one record under one condition.
#[derive(Clone, Debug)]
pub struct Scored {
    pub verdict: Verdict,
    pub authentic: bool,
    pub mask: MaskScore,
    pub text: String,
    pub reference: String,
}

/// Runs `provider` over `records` on a pool of `workers` threads. Results
/// keep record order; `None` marks a condition without predictions.
pub fn score_records(
    provider: &dyn PredictionProvider,
    dataset: &Dataset,
    records: &[AnalysisRecord],
    degradation: Option<DegradationSpec>,
    config: &SuiteConfig,
) -> Result<Option<Vec<Scored>>, EvalError> {
    let slots: Vec<Mutex<Option<Result<Option<Scored>, EvalError>>>> = records.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(record) = records.get(i) else { break };
        let result = score_one(provider, dataset, record, degradation, config);
        *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(result);
    };
    std::thread::scope(|s| {
        for _ in 0..config.workers.clamp(1, records.len().max(1)) {
            s.spawn(work);
        }
    });
    let mut out = Vec::with_capacity(records.len());
    for slot in slots {
        match slot.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every record scored")? {
            Some(s) => out.push(s),
            None => return Ok(None),
        }
    }
    Ok(Some(out))
}

fn score_one(
    provider: &dyn PredictionProvider,
    dataset: &Dataset,
    record: &AnalysisRecord,
    degradation: Option<DegradationSpec>,
    config: &SuiteConfig,
) -> Result<Option<Scored>, EvalError> {
    let mut image = dataset.load_image(record).map_err(DatasetError::from)?;
    if let Some(spec) = degradation {
        image = degrade_image(&image, spec, record_seed(config.seed, &record.id))?;
    }
    let Some(pred) = provider.predict(record, &image, degradation)? else { return Ok(None) };
    let shape = (image.height() as usize, image.width() as usize);
    let gt = dataset.load_mask(record).map_err(DatasetError::from)?.unwrap_or_else(|| BinaryMask::from_elem(shape, false));
    let pred_mask = match &pred.mask {
        Some(p) => binarize(p, config.threshold),
        None => BinaryMask::from_elem(gt.dim(), false),
    };
    Ok(Some(Scored {
        verdict: pred.verdict,
        authentic: record.authentic,
        mask: score_prediction(&pred_mask, &gt)?,
        text: pred.text,
        reference: record.description.to_text(),
    }))
}

fn groups(records: &[AnalysisRecord]) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![("all".to_string(), (0..records.len()).collect::<Vec<_>>())];
    let mut by_domain: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    let mut by_source: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_domain.entry(r.domain).or_default().push(i);
        by_source.entry(r.source().to_string()).or_default().push(i);
    }
    out.extend(by_domain.into_iter().map(|(d, v)| (format!("domain:{}", d.display_name()), v)));
    out.extend(by_source.into_iter().map(|(s, v)| (format!("source:{s}"), v)));
    out
}

fn detection_of(scored: &[&Scored]) -> DetectionEval {
    let mut c = Confusion::default();
    for s in scored {
        c.add(s.verdict, s.authentic);
    }
    c.into()
}

/// Tampered-only and all-record localization means.
fn localization_of(scored: &[&Scored]) -> (LocalizationEval, LocalizationEval) {
    let tampered = scored.iter().filter(|s| !s.authentic).map(|s| s.mask).collect();
    let all = scored.iter().map(|s| s.mask).collect();
    (LocalizationEval::from_scores(tampered), LocalizationEval::from_scores(all))
}

/// Scores the split under every condition of `config` and assembles the
/// report. `extra` tables (ablations) are appended as given.
pub fn run_suite(
    provider: &dyn PredictionProvider,
    dataset: &Dataset,
    config: &SuiteConfig,
    embedder: &dyn Embedder,
    extra: Vec<Table>,
) -> Result<Report, EvalError> {
    let records = dataset.split(&config.split).ok_or_else(|| EvalError::UnknownSplit(config.split.clone()))?;
    for d in &config.degradations {
        d.validate()?;
    }
    ablation::parse_ablations(&config.ablations)?;
    let clean = score_records(provider, dataset, records, None, config)?
        .ok_or_else(|| EvalError::Predictions("no predictions for undegraded images".into()))?;
    let mut tables = Vec::new();

    let mut det = Table::new("detection", "Detection", &["group", "n", "acc", "f1", "tampered_acc", "tp", "fp", "tn", "fn"]);
    let mut loc = Table::new("localization", "Localization", &["group", "n_tampered", "iou", "pixel_f1", "iou_all", "pixel_f1_all"]);
    let mut exp = Table::new("explanation", "Explanation similarity", &["group", "n", "css", "empty"]);
    exp.notes.push(format!("embedder: {}", embedder.id()));
    loc.notes.push("iou/pixel_f1 over tampered images; *_all adds authentic images, where empty vs empty scores 1".into());
    for (name, idx) in groups(records) {
        let s: Vec<&Scored> = idx.iter().map(|&i| &clean[i]).collect();
        let d = detection_of(&s);
        let tampered: Vec<&Scored> = s.iter().copied().filter(|x| !x.authentic).collect();
        let t = detection_of(&tampered);
        det.push(vec![
            name.clone(),
            s.len().to_string(),
            fmt4(d.acc),
            fmt4(d.f1),
            if tampered.is_empty() { "n/a".into() } else { fmt4(t.acc) },
            d.confusion.tp.to_string(),
            d.confusion.fp.to_string(),
            d.confusion.tn.to_string(),
            d.confusion.fn_.to_string(),
        ]);
        let (lt, la) = localization_of(&s);
        let na = |e: &LocalizationEval, v: f64| if e.per_image.is_empty() { "n/a".to_string() } else { fmt4(v) };
        loc.push(vec![name.clone(), lt.per_image.len().to_string(), na(&lt, lt.mean_iou), na(&lt, lt.mean_pixel_f1), fmt4(la.mean_iou), fmt4(la.mean_pixel_f1)]);
        let preds: Vec<&str> = s.iter().map(|x| x.text.as_str()).collect();
        let refs: Vec<&str> = s.iter().map(|x| x.reference.as_str()).collect();
        let e = eval_css(&preds, &refs, embedder)?;
        exp.push(vec![name, s.len().to_string(), fmt4(e.mean_css), e.empty_predictions.len().to_string()]);
    }
    tables.extend([det, loc, exp]);

    let mut deg = Table::new("degradation", "Robustness to degradations", &["condition", "acc", "f1", "iou", "pixel_f1"]);
    let row = |label: String, scored: Option<&[Scored]>| match scored {
        Some(sc) => {
            let s: Vec<&Scored> = sc.iter().collect();
            let d = detection_of(&s);
            let (lt, _) = localization_of(&s);
            vec![label, fmt4(d.acc), fmt4(d.f1), fmt4(lt.mean_iou), fmt4(lt.mean_pixel_f1)]
        }
        None => vec![label, "n/a".into(), "n/a".into(), "n/a".into(), "n/a".into()],
    };
    deg.push(row("none".into(), Some(&clean)));
    for spec in &config.degradations {
        let scored = score_records(provider, dataset, records, Some(*spec), config)?;
        deg.push(row(spec.to_string(), scored.as_deref()));
    }
    deg.notes.push(format!("gaussian variance in squared 8-bit units; noise seed {}", config.seed));
    tables.push(deg);

    let tagger = LexiconTagger::default();
    let keep = nouns_and_adjectives();
    let refs: Vec<&str> = clean.iter().map(|s| s.reference.as_str()).collect();
    let preds: Vec<&str> = clean.iter().map(|s| s.text.as_str()).collect();
    let gt_profile = answer_lexicon_profile(&refs, &tagger, &keep);
    let pred_profile = answer_lexicon_profile(&preds, &tagger, &keep);
    let mut lex = Table::new("lexicon", "Noun and adjective frequency", &["rank", "reference_word", "reference_count", "predicted_word", "predicted_count"]);
    for i in 0..config.lexicon_top.min(gt_profile.len().max(pred_profile.len())) {
        let cell = |p: &[LexiconEntry]| p.get(i).map_or((String::new(), String::new()), |e| (e.word.clone(), e.count.to_string()));
        let (gw, gc) = cell(&gt_profile);
        let (pw, pc) = cell(&pred_profile);
        lex.push(vec![(i + 1).to_string(), gw, gc, pw, pc]);
    }
    tables.push(lex);
    tables.extend(extra);

    Ok(Report {
        provider: provider.id(),
        split: config.split.clone(),
        records: records.len(),
        embedder_id: embedder.id(),
        threshold: config.threshold,
        tables,
    })
}
