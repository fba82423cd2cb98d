//! Subcommands of the `tamperscope` binary.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tamperscope_core::config::ProjectConfig;
use tamperscope_core::dataset::{
    build_dataset, Dataset, DescriptionClient, FixtureClient, LiveClient, RecordingClient, ReplayClient, SourceManifest, TemplateSet,
};
use tamperscope_core::detector::{train_detector, Detector};
use tamperscope_core::dtg::{train_dtg, DtgModel};
use tamperscope_core::eval::ablation::{parse_ablations, run_ablations, TrainingRunner};
use tamperscope_core::eval::{run_suite, ExternalPredictions, PredictionProvider, PredictionRow};
use tamperscope_core::imaging::{encode_mask_png, encode_probability_png, load_image};
use tamperscope_core::locator::{train_locator, DescriptionSource, Locator};
use tamperscope_core::pipeline::{Pipeline, DETECTOR_FILE, DTG_FILE, LOCATOR_FILE};
use tamperscope_core::toy::{self, ToySpec};
use tamperscope_service::ServiceConfig;

/// Models run in single precision.
type F = f32;

#[derive(Parser, Debug)]
#[command(name = "tamperscope", version, about = "Explainable image forgery detection and localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic copy-move corpus with a source manifest and canned descriptions.
    MakeToy(MakeToyArgs),
    /// Build training and evaluation records from a source manifest.
    BuildDataset(BuildDatasetArgs),
    /// Train the domain tag classifier.
    TrainDtg(TrainArgs),
    /// Fine-tune the detector's adapters.
    TrainDetector(TrainDetectorArgs),
    /// Fine-tune the locator.
    TrainLocator(TrainLocatorArgs),
    /// Run one image through the full pipeline.
    Analyze(AnalyzeArgs),
    /// Write pipeline predictions for a split in the evaluation ingestion layout.
    Predict(PredictArgs),
    /// Score predictions and write the report tables.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP analysis API.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct MakeToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 24)]
    pub tampered: usize,
    #[arg(long, default_value_t = 8)]
    pub authentic: usize,
    #[arg(long, default_value_t = 12)]
    pub eval_tampered: usize,
    #[arg(long, default_value_t = 4)]
    pub eval_authentic: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ClientKind {
    /// The configured chat-completions service; the key comes from the
    /// environment variable named by `client.api_key_env`.
    Live,
    /// Answers from a recorded transcript.
    Replay,
    /// Canned answers keyed by image file name.
    Fixture,
}

#[derive(Args, Debug)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of prompt templates; the built-in set when omitted.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub client: ClientKind,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Transcript read by the replay client.
    #[arg(long, required_if_eq("client", "replay"))]
    pub transcript: Option<PathBuf>,
    /// Response file read by the fixture client.
    #[arg(long, required_if_eq("client", "fixture"))]
    pub fixtures: Option<PathBuf>,
    /// Append every response to this transcript for later replay.
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainDetectorArgs {
    #[command(flatten)]
    pub common: TrainArgs,
    /// Train this tag classifier jointly and write it back in place.
    #[arg(long)]
    pub joint_dtg: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainLocatorArgs {
    #[command(flatten)]
    pub common: TrainArgs,
    /// Detector whose generations the locator reads when the configured
    /// description source is `detector`.
    #[arg(long)]
    pub detector: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub ckpt_dir: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Where to write the mask PNG of a tampered verdict.
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt_dir: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "eval")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// A prediction directory, or `pipeline` to run the checkpoints in `--ckpt-dir`.
    #[arg(long)]
    pub preds: String,
    #[arg(long)]
    pub ckpt_dir: Option<PathBuf>,
    /// Configuration file whose `[suite]` table drives the run; ablations
    /// also use its model sections.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Extra ablation tables or flag sets, added to the configured ones.
    #[arg(long = "ablation")]
    pub ablations: Vec<String>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt_dir: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Session store directory.
    #[arg(long, default_value = "sessions")]
    pub data_dir: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeToy(a) => make_toy(a),
        Command::BuildDataset(a) => build(a),
        Command::TrainDtg(a) => train_dtg_cmd(a),
        Command::TrainDetector(a) => train_detector_cmd(a),
        Command::TrainLocator(a) => train_locator_cmd(a),
        Command::Analyze(a) => analyze(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Serve(a) => serve(a),
    }
}

fn config(path: Option<&Path>) -> Result<ProjectConfig> {
    Ok(ProjectConfig::load_or_default(path)?)
}

fn dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn make_toy(a: MakeToyArgs) -> Result<()> {
    let train = toy::generate("train", &ToySpec { tampered: a.tampered, authentic: a.authentic, seed: a.seed });
    let eval = toy::generate("eval", &ToySpec { tampered: a.eval_tampered, authentic: a.eval_authentic, seed: a.seed.wrapping_add(1) });
    let manifest = toy::write_corpus(&a.out, &[("train", &train), ("eval", &eval)])?;
    println!("{}", manifest.display());
    Ok(())
}

fn build(a: BuildDatasetArgs) -> Result<()> {
    let cfg = config(a.config.as_deref())?;
    let manifest = SourceManifest::load(&a.manifest)?;
    let templates = match &a.templates {
        Some(dir) => TemplateSet::load(dir)?,
        None => TemplateSet::builtin(),
    };
    let client: Box<dyn DescriptionClient> = match a.client {
        ClientKind::Live => Box::new(LiveClient::from_env(cfg.client.clone())?),
        ClientKind::Replay => Box::new(ReplayClient::load(a.transcript.as_deref().expect("required by clap"))?),
        ClientKind::Fixture => Box::new(FixtureClient::load(a.fixtures.as_deref().expect("required by clap"))?),
    };
    let client: Box<dyn DescriptionClient> = match a.record {
        Some(path) => Box::new(RecordingClient::new(client, path)),
        None => client,
    };
    let out = build_dataset(&manifest, &templates, &*client, &cfg.build, &a.out)?;
    print_json(&out.report)
}

fn train_dtg_cmd(a: TrainArgs) -> Result<()> {
    let cfg = config(a.config.as_deref())?;
    let ds = dataset(&a.dataset)?;
    let mut train = cfg.dtg.train.clone();
    if let Some(e) = a.epochs {
        train.epochs = e;
    }
    let mut model = DtgModel::<F>::new(cfg.dtg.model.clone());
    let report = train_dtg(&mut model, &ds.domain_samples(&ds.train)?, &train)?;
    model.save(&a.out)?;
    tracing::info!(path = %a.out.display(), version = %model.weights_version, "tag classifier written");
    print_json(&report)
}

fn train_detector_cmd(a: TrainDetectorArgs) -> Result<()> {
    let cfg = config(a.common.config.as_deref())?;
    let ds = dataset(&a.common.dataset)?;
    let mut detector_cfg = cfg.detector.clone();
    if let Some(e) = a.common.epochs {
        detector_cfg.train.epochs = e;
    }
    let mut model = Detector::<F>::new(detector_cfg);
    let mut dtg = a.joint_dtg.as_deref().map(DtgModel::<F>::load).transpose()?;
    let report = train_detector(&mut model, &ds.detection_samples(&ds.train)?, dtg.as_mut())?;
    model.save(&a.common.out)?;
    if let (Some(path), Some(dtg)) = (&a.joint_dtg, &dtg) {
        dtg.save(path)?;
    }
    tracing::info!(path = %a.common.out.display(), version = %model.weights_version, "detector written");
    print_json(&report)
}

fn train_locator_cmd(a: TrainLocatorArgs) -> Result<()> {
    let cfg = config(a.common.config.as_deref())?;
    let ds = dataset(&a.common.dataset)?;
    let mut locator_cfg = cfg.locator.clone();
    if let Some(e) = a.common.epochs {
        locator_cfg.train.epochs = e;
    }
    let detector = match (locator_cfg.train.description_source, &a.detector) {
        (DescriptionSource::Dataset, _) => None,
        (DescriptionSource::Detector, Some(path)) => Some(Detector::<F>::load(path)?),
        (DescriptionSource::Detector, None) => bail!("the configured description source is the detector; pass --detector"),
    };
    let samples = ds.locator_samples(&ds.train, detector.as_ref())?;
    let mut model = Locator::<F>::new(locator_cfg);
    let report = train_locator(&mut model, &samples)?;
    model.save(&a.common.out)?;
    tracing::info!(path = %a.common.out.display(), version = %model.weights_version, "locator written");
    print_json(&report)
}

fn load_pipeline(dir: &Path) -> Result<Pipeline<F>> {
    Pipeline::load(dir).with_context(|| format!("loading {DTG_FILE}, {DETECTOR_FILE} and {LOCATOR_FILE} from {}", dir.display()))
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let pipeline = load_pipeline(&a.ckpt_dir)?;
    let image = load_image(&a.image)?;
    let analysis = pipeline.analyze(&image)?;
    if let (Some(path), Some(mask)) = (&a.mask_out, &analysis.mask) {
        std::fs::write(path, encode_mask_png(&mask.binary))?;
    }
    let d = &analysis.detection.description;
    print_json(&serde_json::json!({
        "domain_tag": analysis.tag.sentence,
        "verdict": d.verdict,
        "location": d.location_text,
        "basis": d.basis_text,
        "flags": analysis.flags,
        "tampered_pixels": analysis.mask.as_ref().map(|m| m.tampered_pixels()),
        "model_versions": pipeline.versions(),
    }))
}

/// Verdicts, 8-bit masks and 16-bit probability maps for every record.
fn predict(a: PredictArgs) -> Result<()> {
    let pipeline = load_pipeline(&a.ckpt_dir)?;
    let ds = dataset(&a.dataset)?;
    let records = ds.split(&a.split).with_context(|| format!("no split {:?}", a.split))?;
    let mut rows = Vec::with_capacity(records.len());
    let mut masks = Vec::new();
    std::fs::create_dir_all(a.out.join("probs"))?;
    for r in records {
        let analysis = pipeline.analyze(&ds.load_image(r)?)?;
        rows.push(PredictionRow { id: r.id.clone(), verdict: analysis.detection.description.verdict, text: Some(analysis.detection.raw_text.clone()) });
        if let Some(mask) = &analysis.mask {
            masks.push((r.id.clone(), encode_mask_png(&mask.binary)));
            std::fs::write(a.out.join("probs").join(format!("{}.png", r.id)), encode_probability_png(&mask.probs))?;
        }
    }
    ExternalPredictions::write(&a.out, &rows, &masks)?;
    println!("{} predictions written to {}", rows.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = config(a.suite.as_deref())?;
    let mut suite = cfg.suite.clone();
    suite.ablations.extend(a.ablations.iter().cloned());
    let tables = parse_ablations(&suite.ablations)?;
    let ds = dataset(&a.dataset)?;
    let embedder = suite.embedder.build()?;

    let pipeline = match a.preds.as_str() {
        "pipeline" => Some(load_pipeline(a.ckpt_dir.as_deref().context("--preds pipeline needs --ckpt-dir")?)?),
        _ => None,
    };
    let external = match &pipeline {
        Some(_) => None,
        None => Some(ExternalPredictions::load(Path::new(&a.preds))?),
    };
    let provider: &dyn PredictionProvider = match (&pipeline, &external) {
        (Some(p), _) => p,
        (None, Some(e)) => e,
        (None, None) => unreachable!("one provider is always loaded"),
    };

    let extra = if tables.is_empty() {
        Vec::new()
    } else {
        let records = ds.split(&suite.split).with_context(|| format!("no split {:?}", suite.split))?.to_vec();
        let mut runner = TrainingRunner::<F>::new(&ds, ds.train.clone(), cfg.detector.clone(), cfg.locator.clone());
        // Variants see predicted tags when a classifier is at hand.
        runner.dtg = pipeline.as_ref().map(|p| &p.dtg);
        let out = run_ablations(&mut runner, &ds, &records, &tables, suite.threshold)?;
        for (name, loss) in &runner.losses {
            tracing::info!(variant = %name, final_loss = loss, "ablation variant trained");
        }
        out
    };
    let report = run_suite(provider, &ds, &suite, &*embedder, extra)?;
    report.write(&a.out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let service_cfg = match &a.config {
        Some(path) => ServiceConfig::from_toml(&std::fs::read_to_string(path)?).with_context(|| format!("reading {}", path.display()))?,
        None => ServiceConfig::default(),
    };
    let model: Option<Arc<dyn tamperscope_service::ForensicModel>> = match load_pipeline(&a.ckpt_dir) {
        Ok(p) => Some(Arc::new(p)),
        Err(e) => {
            tracing::error!(error = %format!("{e:#}"), "no model loaded; analysis endpoints will answer 503");
            None
        }
    };
    let state = tamperscope_service::open(model, &a.data_dir, service_cfg)?;
    let removed = state.sweep()?;
    tracing::info!(removed, "expired sessions swept at startup");
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(tamperscope_service::serve(state, SocketAddr::new(a.host, a.port)))?;
    Ok(())
}
