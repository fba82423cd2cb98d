//! Image-mask-description triplets built from source corpora.
//!
//! A build reads a source manifest, renders one prompt per entry, asks a
//! description service for the three-section analysis, validates it, and
//! writes the dataset directory:
//!
//! ```text
//! train.jsonl  eval.jsonl  rejects.jsonl  report.json
//! images/{id}.{ext}  masks/{id}.png  raw/{id}.txt
//! ```
//!
//! Record paths are relative to the dataset directory.

mod client;
mod template;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use client::{
    ClientError, DescriptionClient, DescriptionRequest, FixtureClient, LiveClient, LiveClientConfig, RecordingClient, ReplayClient,
    TranscriptEntry,
};
pub use template::{render_prompt, template_file_name, PromptTemplate, TemplateError, TemplateSet, PLACEHOLDERS};

use crate::checkpoint::write_atomic;
use crate::description::{mentions_position, parse_description, StructuredDescription, Verdict};
use crate::detector::{DetectionSample, Detector};
use crate::domain::{DomainCategory, DomainTag};
use crate::dtg::DomainSample;
use crate::locator::LocatorSample;
use crate::scalar::Scalar;
use crate::imaging::{decode_image, decode_mask, encode_mask_png, load_image, load_mask, BinaryMask, ImagingError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub image_path: PathBuf,
    #[serde(default)]
    pub mask_path: Option<PathBuf>,
    pub domain: DomainCategory,
    pub authentic: bool,
    pub source_name: String,
    /// How the tampering was produced, free text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("entry {index} is tampered but has no mask")]
    TamperedWithoutMask { index: usize },
    #[error("entry {index} is authentic but has a mask")]
    AuthenticWithMask { index: usize },
}

/// Source inventory. Relative paths resolve against `root`, the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub entries: Vec<SourceEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl SourceManifest {
    pub fn new(entries: Vec<SourceEntry>, root: PathBuf) -> Result<Self, ManifestError> {
        let m = Self { entries, root };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let bytes = std::fs::read(path).map_err(|e| ManifestError::Io { path: path.display().to_string(), message: e.to_string() })?;
        let mut m: Self = serde_json::from_slice(&bytes)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    /// Mask pairing: tampered entries have a mask, authentic ones do not.
    pub fn validate(&self) -> Result<(), ManifestError> {
        for (index, e) in self.entries.iter().enumerate() {
            match (e.authentic, e.mask_path.is_some()) {
                (false, false) => return Err(ManifestError::TamperedWithoutMask { index }),
                (true, true) => return Err(ManifestError::AuthenticWithMask { index }),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }
}

/// A validated triplet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub domain: DomainCategory,
    pub authentic: bool,
    pub description: StructuredDescription,
}

impl AnalysisRecord {
    pub fn load_image(&self, root: &Path) -> Result<image::RgbImage, ImagingError> {
        load_image(&root.join(&self.image_path))
    }

    pub fn load_mask(&self, root: &Path) -> Result<Option<BinaryMask>, ImagingError> {
        self.mask_path.as_ref().map(|p| load_mask(&root.join(p))).transpose()
    }
}

/// Record-level invariants of a description given the entry's label.
pub fn check_description(description: &StructuredDescription, authentic: bool) -> Result<(), String> {
    if description.verdict != Verdict::from_authentic(authentic) {
        return Err(format!("verdict `{}` contradicts the {} label", description.verdict, if authentic { "authentic" } else { "tampered" }));
    }
    if description.basis_text.trim().is_empty() {
        return Err("empty BASIS section".into());
    }
    if !authentic {
        if description.location_text.trim().is_empty() {
            return Err("empty LOCATION section".into());
        }
        if !mentions_position(&description.location_text) {
            return Err("LOCATION names no position".into());
        }
    }
    Ok(())
}

/// Entry that produced no record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub id: String,
    pub image_path: PathBuf,
    pub source_name: String,
    pub reason: String,
    pub attempts: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    /// Width of the description worker pool.
    pub workers: usize,
    /// Attempts per entry on transient service errors.
    pub max_attempts: u32,
    /// Sources whose entries form the eval split.
    pub eval_sources: Vec<String>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self { workers: 4, max_attempts: 3, eval_sources: Vec::new() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tampered: usize,
    pub authentic: usize,
    /// `tampered / authentic`; absent without authentic records.
    pub balance_ratio: Option<f64>,
}

impl ClassCounts {
    pub fn new(tampered: usize, authentic: usize) -> Self {
        Self { tampered, authentic, balance_ratio: balance_ratio(tampered, authentic) }
    }
}

/// Positive-to-negative ratio.
pub fn balance_ratio(tampered: usize, authentic: usize) -> Option<f64> {
    (authentic > 0).then(|| tampered as f64 / authentic as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub records: usize,
    pub overall: ClassCounts,
    pub per_domain: BTreeMap<DomainCategory, ClassCounts>,
}

impl SplitReport {
    pub fn from_records(records: &[AnalysisRecord]) -> Self {
        let count = |f: &dyn Fn(&AnalysisRecord) -> bool| {
            ClassCounts::new(records.iter().filter(|r| f(r) && !r.authentic).count(), records.iter().filter(|r| f(r) && r.authentic).count())
        };
        let per_domain = DomainCategory::ALL.into_iter().map(|d| (d, count(&|r: &AnalysisRecord| r.domain == d))).collect();
        Self { records: records.len(), overall: count(&|_| true), per_domain }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub entries: usize,
    pub rejects: usize,
    pub train: SplitReport,
    pub eval: SplitReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildOutput {
    pub train: Vec<AnalysisRecord>,
    pub eval: Vec<AnalysisRecord>,
    pub rejects: Vec<Reject>,
    pub report: BuildReport,
}

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("the manifest has no entries")]
    EmptyManifest,
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("image {0} appears in both splits")]
    SplitOverlap(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("cannot write {path}: {cause}")]
    Io { path: String, cause: std::io::Error },
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// `{source}-{12 hex of the image path hash}`; stable across rebuilds.
pub fn record_id(entry: &SourceEntry) -> String {
    let digest = Sha256::digest(entry.image_path.to_string_lossy().as_bytes());
    format!("{}-{}", sanitize(&entry.source_name), &hex::encode(digest)[..12])
}

struct Accepted {
    record: AnalysisRecord,
    image_bytes: Vec<u8>,
    mask_png: Option<Vec<u8>>,
}

enum Outcome {
    Accepted(Box<Accepted>, String),
    Rejected(Reject, Option<String>),
}

fn extension(path: &Path) -> String {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).unwrap_or_else(|| "png".into())
}

fn process(
    manifest: &SourceManifest,
    entry: &SourceEntry,
    id: String,
    templates: &TemplateSet,
    client: &dyn DescriptionClient,
    max_attempts: u32,
) -> Result<Outcome, TemplateError> {
    let reject = |reason: String, attempts: u32, raw: Option<String>| {
        Outcome::Rejected(
            Reject { id: id.clone(), image_path: entry.image_path.clone(), source_name: entry.source_name.clone(), reason, attempts },
            raw,
        )
    };
    let image_bytes = match std::fs::read(manifest.resolve(&entry.image_path)) {
        Ok(b) => b,
        Err(e) => return Ok(reject(format!("unreadable image: {e}"), 0, None)),
    };
    let image = match decode_image(&image_bytes) {
        Ok(i) => i,
        Err(e) => return Ok(reject(format!("undecodable image: {e}"), 0, None)),
    };
    let mut mask_png = None;
    let mut mask_raw = None;
    if let Some(path) = &entry.mask_path {
        let bytes = match std::fs::read(manifest.resolve(path)) {
            Ok(b) => b,
            Err(e) => return Ok(reject(format!("unreadable mask: {e}"), 0, None)),
        };
        let mask = match decode_mask(&bytes) {
            Ok(m) => m,
            Err(e) => return Ok(reject(format!("undecodable mask: {e}"), 0, None)),
        };
        if mask.dim() != (image.height() as usize, image.width() as usize) {
            return Ok(reject(format!("mask is {:?}, image is {}x{}", mask.dim(), image.height(), image.width()), 0, None));
        }
        mask_png = Some(encode_mask_png(&mask));
        mask_raw = Some(bytes);
    }
    let prompt = render_prompt(templates.get(entry.domain, entry.authentic), entry)?;
    let image_name = entry.image_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let request = DescriptionRequest { prompt, image_name, image: image_bytes.clone(), mask: mask_raw };
    let mut attempts = 0;
    let raw = loop {
        attempts += 1;
        match client.describe(&request) {
            Ok(raw) => break raw,
            Err(e) if e.is_transient() && attempts < max_attempts.max(1) => {
                tracing::warn!(%id, attempt = attempts, error = %e, "description attempt failed, retrying");
            }
            Err(e) => return Ok(reject(e.to_string(), attempts, None)),
        }
    };
    let description = match parse_description(&raw) {
        Ok(d) => d,
        Err(e) => return Ok(reject(format!("unparseable response: {e}"), attempts, Some(raw))),
    };
    if let Err(reason) = check_description(&description, entry.authentic) {
        return Ok(reject(reason, attempts, Some(raw)));
    }
    let record = AnalysisRecord {
        image_path: PathBuf::from(format!("images/{id}.{}", extension(&entry.image_path))),
        mask_path: entry.mask_path.as_ref().map(|_| PathBuf::from(format!("masks/{id}.png"))),
        id,
        domain: entry.domain,
        authentic: entry.authentic,
        description,
    };
    Ok(Outcome::Accepted(Box::new(Accepted { record, image_bytes, mask_png }), raw))
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("record serializes");
        out.push(b'\n');
    }
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), BuildError> {
    write_atomic(path, bytes).map_err(|cause| BuildError::Io { path: path.display().to_string(), cause })
}

/// Builds the dataset into `out`. Descriptions are requested on a pool of
/// `config.workers` threads; files are written by the calling thread in
/// manifest order, so output bytes do not depend on scheduling.
pub fn build_dataset(
    manifest: &SourceManifest,
    templates: &TemplateSet,
    client: &dyn DescriptionClient,
    config: &BuildConfig,
    out: &Path,
) -> Result<BuildOutput, BuildError> {
    if manifest.entries.is_empty() {
        return Err(BuildError::EmptyManifest);
    }
    manifest.validate()?;
    let ids: Vec<String> = manifest.entries.iter().map(record_id).collect();
    let mut seen = BTreeSet::new();
    for id in &ids {
        if !seen.insert(id) {
            return Err(BuildError::DuplicateId(id.clone()));
        }
    }
    let is_eval = |e: &SourceEntry| config.eval_sources.iter().any(|s| *s == e.source_name);
    let train_paths: BTreeSet<_> = manifest.entries.iter().filter(|e| !is_eval(e)).map(|e| manifest.resolve(&e.image_path)).collect();
    if let Some(e) = manifest.entries.iter().filter(|e| is_eval(e)).find(|e| train_paths.contains(&manifest.resolve(&e.image_path))) {
        return Err(BuildError::SplitOverlap(e.image_path.display().to_string()));
    }

    let slots: Vec<Mutex<Option<Result<Outcome, TemplateError>>>> = manifest.entries.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..config.workers.clamp(1, manifest.entries.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(entry) = manifest.entries.get(i) else { break };
                let outcome = process(manifest, entry, ids[i].clone(), templates, client, config.max_attempts);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(outcome);
            });
        }
    });

    for dir in ["images", "masks", "raw"] {
        std::fs::create_dir_all(out.join(dir)).map_err(|cause| BuildError::Io { path: out.join(dir).display().to_string(), cause })?;
    }
    let (mut train, mut eval, mut rejects) = (Vec::new(), Vec::new(), Vec::new());
    for (entry, slot) in manifest.entries.iter().zip(slots) {
        let outcome = slot.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every entry was processed")?;
        match outcome {
            Outcome::Accepted(acc, raw) => {
                write(&out.join(&acc.record.image_path), &acc.image_bytes)?;
                if let (Some(path), Some(png)) = (&acc.record.mask_path, &acc.mask_png) {
                    write(&out.join(path), png)?;
                }
                write(&out.join(format!("raw/{}.txt", acc.record.id)), raw.as_bytes())?;
                if is_eval(entry) {
                    eval.push(acc.record);
                } else {
                    train.push(acc.record);
                }
            }
            Outcome::Rejected(reject, raw) => {
                tracing::warn!(id = %reject.id, reason = %reject.reason, "entry rejected");
                if let Some(raw) = raw {
                    write(&out.join(format!("raw/{}.txt", reject.id)), raw.as_bytes())?;
                }
                rejects.push(reject);
            }
        }
    }
    let report = BuildReport {
        entries: manifest.entries.len(),
        rejects: rejects.len(),
        train: SplitReport::from_records(&train),
        eval: SplitReport::from_records(&eval),
    };
    write(&out.join("train.jsonl"), &jsonl(&train))?;
    write(&out.join("eval.jsonl"), &jsonl(&eval))?;
    write(&out.join("rejects.jsonl"), &jsonl(&rejects))?;
    let mut report_bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
    report_bytes.push(b'\n');
    write(&out.join("report.json"), &report_bytes)?;
    Ok(BuildOutput { train, eval, rejects, report })
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {cause}")]
    Json { path: String, line: usize, cause: serde_json::Error },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("record {0}: {1}")]
    Invalid(String, String),
}

/// A built dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub train: Vec<AnalysisRecord>,
    pub eval: Vec<AnalysisRecord>,
}

/// Reads one JSON Lines record file; a missing file is an empty split.
pub fn read_records(path: &Path) -> Result<Vec<AnalysisRecord>, DatasetError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(DatasetError::Io { path: path.display().to_string(), message: e.to_string() }),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|cause| DatasetError::Json { path: path.display().to_string(), line: n + 1, cause }))
        .collect()
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self, DatasetError> {
        let train = read_records(&root.join("train.jsonl"))?;
        let eval = read_records(&root.join("eval.jsonl"))?;
        for r in train.iter().chain(&eval) {
            check_description(&r.description, r.authentic).map_err(|m| DatasetError::Invalid(r.id.clone(), m))?;
            if r.authentic == r.mask_path.is_some() {
                return Err(DatasetError::Invalid(r.id.clone(), "mask presence contradicts the label".into()));
            }
        }
        Ok(Self { root: root.to_path_buf(), train, eval })
    }

    pub fn split(&self, name: &str) -> Option<&[AnalysisRecord]> {
        match name {
            "train" => Some(&self.train),
            "eval" => Some(&self.eval),
            _ => None,
        }
    }

    pub fn load_image(&self, record: &AnalysisRecord) -> Result<image::RgbImage, ImagingError> {
        record.load_image(&self.root)
    }

    pub fn load_mask(&self, record: &AnalysisRecord) -> Result<Option<BinaryMask>, ImagingError> {
        record.load_mask(&self.root)
    }
}

/// Training views of records.
impl Dataset {
    pub fn domain_samples(&self, records: &[AnalysisRecord]) -> Result<Vec<DomainSample>, DatasetError> {
        records.iter().map(|r| Ok(DomainSample { image: self.load_image(r)?, domain: r.domain })).collect()
    }

    /// Targets are the record descriptions in the header contract.
    pub fn detection_samples(&self, records: &[AnalysisRecord]) -> Result<Vec<DetectionSample>, DatasetError> {
        records
            .iter()
            .map(|r| Ok(DetectionSample { image: self.load_image(r)?, domain: r.domain, description: r.description.to_text() }))
            .collect()
    }

    /// The locator reads each record's description verbatim, or the
    /// detector's generation for it when `detector` is given.
    pub fn locator_samples<F: Scalar>(
        &self,
        records: &[AnalysisRecord],
        detector: Option<&Detector<F>>,
    ) -> Result<Vec<LocatorSample>, DatasetError> {
        records
            .iter()
            .map(|r| {
                let image = self.load_image(r)?;
                let reference = r.description.to_text();
                let description = match detector {
                    Some(d) => d
                        .detect(&image, &DomainTag::new(r.domain), &d.config.instructions[0])
                        .map_err(|e| DatasetError::Invalid(r.id.clone(), e.to_string()))?
                        .raw_text,
                    None => reference.clone(),
                };
                Ok(LocatorSample { mask: self.load_mask(r)?, image, domain: r.domain, authentic: r.authentic, description, reference })
            })
            .collect()
    }
}

impl AnalysisRecord {
    /// Source corpus name, recovered from the id.
    pub fn source(&self) -> &str {
        self.id.rsplit_once('-').map_or(self.id.as_str(), |(s, _)| s)
    }
}
