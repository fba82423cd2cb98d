use std::collections::BTreeSet;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tamperscope_core::dataset::{build_dataset, AnalysisRecord, BuildConfig, Dataset, FixtureClient, SourceManifest, TemplateSet};
use tamperscope_core::description::Verdict;
use tamperscope_core::eval::ablation::{parse_ablations, run_ablations, AblationSettings, AblationTable, Need, VariantRunner};
use tamperscope_core::eval::{
    answer_lexicon_profile, cosine, degrade_image, eval_css, eval_detection, eval_localization, jpeg_bytes, nouns_and_adjectives,
    run_suite, score_masks, DegradationSpec, Embedder, EvalError, ExternalPredictions, HashEmbedder, LexiconTagger, Prediction,
    PredictionProvider, PredictionRow, SuiteConfig,
};
use tamperscope_core::imaging::{encode_mask_png, encode_png_rgb, mask_to_float, BinaryMask};
use tamperscope_core::toy::{self, ToySpec};

fn mask(rows: &[&str]) -> BinaryMask {
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(r, c)| rows[r].as_bytes()[c] == b'#')
}

#[test]
fn detection_counts_from_the_hand_example() {
    // tp=3 fp=1 tn=4 fn=2
    let mut preds = vec![Verdict::Tampered; 3];
    preds.push(Verdict::Tampered);
    preds.extend([Verdict::Authentic; 4]);
    preds.extend([Verdict::Authentic; 2]);
    let gts = [false, false, false, true, true, true, true, true, false, false];
    let e = eval_detection(&preds, &gts).unwrap();
    assert_eq!((e.confusion.tp, e.confusion.fp, e.confusion.tn, e.confusion.fn_), (3, 1, 4, 2));
    assert!((e.acc - 0.7).abs() < 1e-12);
    assert!((e.f1 - 6.0 / 9.0).abs() < 1e-12);
}

#[test]
fn detection_edge_cases() {
    let all = eval_detection(&[Verdict::Tampered, Verdict::Authentic, Verdict::Tampered, Verdict::Authentic], &[false, true, false, true]).unwrap();
    assert_eq!((all.acc, all.f1), (1.0, 1.0));
    let none = eval_detection(&[Verdict::Authentic; 3], &[false; 3]).unwrap();
    assert_eq!((none.acc, none.f1), (0.0, 0.0));
    assert!(matches!(eval_detection(&[Verdict::Authentic], &[]), Err(EvalError::Length { .. })));
}

#[test]
fn detection_matches_exhaustive_counts() {
    // every verdict/label assignment of length 6
    for bits in 0u32..(1 << 12) {
        let preds: Vec<Verdict> = (0..6).map(|i| if bits >> i & 1 == 1 { Verdict::Tampered } else { Verdict::Authentic }).collect();
        let gts: Vec<bool> = (0..6).map(|i| bits >> (6 + i) & 1 == 1).collect();
        let e = eval_detection(&preds, &gts).unwrap();
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for i in 0..6 {
            match (preds[i] == Verdict::Tampered, !gts[i]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        assert_eq!(e.acc, (tp + tn) as f64 / 6.0);
        let den = 2 * tp + fp + fn_;
        assert_eq!(e.f1, if den == 0 { 0.0 } else { (2 * tp) as f64 / den as f64 });
    }
}

#[test]
fn left_half_versus_top_half() {
    let pred = mask(&["##..", "##..", "##..", "##.."]);
    let gt = mask(&["####", "####", "....", "...."]);
    let s = score_masks(&pred, &gt).unwrap();
    assert!((s.iou - 1.0 / 3.0).abs() < 1e-12);
    assert!((s.f1 - 0.5).abs() < 1e-12);
}

#[test]
fn identical_and_empty_masks_score_one() {
    let m = mask(&["#.#", ".#."]);
    assert_eq!(score_masks(&m, &m).unwrap().iou, 1.0);
    let e = mask(&["...", "..."]);
    let s = score_masks(&e, &e).unwrap();
    assert_eq!((s.iou, s.f1), (1.0, 1.0));
    let s = score_masks(&e, &m).unwrap();
    assert_eq!((s.iou, s.f1), (0.0, 0.0));
}

#[test]
fn mask_scores_match_exhaustive_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let p = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.4));
        let g = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.4));
        let (mut inter, mut union, mut np, mut ng) = (0, 0, 0, 0);
        for r in 0..h {
            for c in 0..w {
                inter += (p[[r, c]] && g[[r, c]]) as usize;
                union += (p[[r, c]] || g[[r, c]]) as usize;
                np += p[[r, c]] as usize;
                ng += g[[r, c]] as usize;
            }
        }
        let s = score_masks(&p, &g).unwrap();
        if union == 0 {
            assert_eq!((s.iou, s.f1), (1.0, 1.0));
        } else {
            assert_eq!(s.iou, inter as f64 / union as f64);
            assert_eq!(s.f1, 2.0 * inter as f64 / (np + ng) as f64);
        }
    }
}

#[test]
fn localization_thresholds_and_resizes_ground_truth() {
    let probs = Array2::from_shape_fn((4, 4), |(r, _)| if r < 2 { 0.7 } else { 0.49 });
    let gt = Array2::from_shape_fn((8, 8), |(r, _)| r < 4);
    let e = eval_localization(&[probs.clone()], &[gt], 0.5).unwrap();
    assert_eq!((e.mean_iou, e.mean_pixel_f1), (1.0, 1.0));
    let e = eval_localization(&[probs], &[Array2::from_elem((3, 4), false)], 0.5).unwrap();
    assert_eq!(e.mean_iou, 0.0);
    assert!(matches!(eval_localization(&[], &[mask(&["#"])], 0.5), Err(EvalError::Length { .. })));
}

struct Fixed(Vec<(&'static str, Vec<f64>)>);

impl Embedder for Fixed {
    fn id(&self) -> String {
        "fixed".into()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EvalError> {
        Ok(self.0.iter().find(|(k, _)| *k == text).map(|(_, v)| v.clone()).unwrap_or_default())
    }
}

#[test]
fn css_of_orthogonal_and_identical_texts() {
    let e = Fixed(vec![("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]);
    assert_eq!(eval_css(&["a"], &["b"], &e).unwrap().mean_css, 0.0);
    assert_eq!(eval_css(&["a"], &["a"], &e).unwrap().mean_css, 1.0);
    let h = HashEmbedder::default();
    let text = "edge artifacts around the upper left square";
    assert!((eval_css(&[text], &[text], &h).unwrap().mean_css - 1.0).abs() < 1e-9);
}

#[test]
fn css_matches_a_scalar_dot_over_norm_oracle() {
    let h = HashEmbedder { dim: 64 };
    let (a, b) = ("lighting on the face is inconsistent", "the face lighting looks consistent with the scene");
    let (va, vb) = (h.embed(a).unwrap(), h.embed(b).unwrap());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..64 {
        dot += va[i] * vb[i];
        na += va[i] * va[i];
        nb += vb[i] * vb[i];
    }
    let oracle = dot / (na.sqrt() * nb.sqrt());
    let got = eval_css(&[a], &[b], &h).unwrap();
    assert!((got.mean_css - oracle).abs() < 1e-9);
    assert!((cosine(&va, &vb) - cosine(&vb, &va)).abs() < 1e-12);
    assert_eq!(got.embedder_id, h.id());
}

#[test]
fn empty_predictions_score_zero_and_are_flagged() {
    let h = HashEmbedder::default();
    let got = eval_css(&["", "same words"], &["anything", "same words"], &h).unwrap();
    assert_eq!(got.per_pair[0], 0.0);
    assert_eq!(got.empty_predictions, vec![0]);
    assert!((got.mean_css - 0.5).abs() < 1e-9);
}

fn random_image(seed: u64, size: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(size, size, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

#[test]
fn gaussian_noise_is_seeded_and_has_the_spec_variance() {
    let img = random_image(1, 32);
    assert_eq!(degrade_image(&img, DegradationSpec::gaussian(0.0), 9).unwrap(), img);
    let a = degrade_image(&img, DegradationSpec::gaussian(5.0), 9).unwrap();
    assert_eq!(a, degrade_image(&img, DegradationSpec::gaussian(5.0), 9).unwrap());
    assert_ne!(a, degrade_image(&img, DegradationSpec::gaussian(5.0), 10).unwrap());

    let gray = RgbImage::from_pixel(256, 256, Rgb([128, 128, 128]));
    for var in [5.0, 10.0] {
        let noisy = degrade_image(&gray, DegradationSpec::gaussian(var), 42).unwrap();
        let n = noisy.as_raw().len() as f64;
        let mean = noisy.as_raw().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let sample = noisy.as_raw().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((sample - var).abs() / var < 0.1, "variance {sample} for spec {var}");
    }
}

#[test]
fn jpeg_changes_pixels_and_compresses() {
    let img = random_image(2, 64);
    for q in [70u8, 80] {
        let out = degrade_image(&img, DegradationSpec::jpeg(q), 0).unwrap();
        assert_eq!(out.dimensions(), img.dimensions());
        assert_ne!(out.as_raw(), img.as_raw());
        assert!(jpeg_bytes(&img, q).unwrap().len() < encode_png_rgb(&img).len());
    }
    for bad in [DegradationSpec::jpeg(0), DegradationSpec { param: 101.0, ..DegradationSpec::jpeg(1) }, DegradationSpec::gaussian(-1.0)] {
        assert!(matches!(degrade_image(&img, bad, 0), Err(EvalError::Degradation(_))));
    }
}

#[test]
fn lexicon_profile_counts_tagged_words() {
    let tagger = LexiconTagger::default();
    let p = answer_lexicon_profile(&["edge edge resolution"], &tagger, &nouns_and_adjectives());
    let got: Vec<(&str, usize)> = p.iter().map(|e| (e.word.as_str(), e.count)).collect();
    assert_eq!(got, vec![("edge", 2), ("resolution", 1)]);
    assert!(answer_lexicon_profile::<&str>(&[], &tagger, &nouns_and_adjectives()).is_empty());
}

#[test]
fn fixture_descriptions_profile_edge_lighting_texture() {
    let texts: Vec<String> =
        toy::generate("lx", &ToySpec { tampered: 12, authentic: 6, seed: 1 }).iter().map(|s| s.description.to_text()).collect();
    let p = answer_lexicon_profile(&texts, &LexiconTagger::default(), &nouns_and_adjectives());
    let top: BTreeSet<&str> = p.iter().take(20).map(|e| e.word.as_str()).collect();
    for w in ["edge", "lighting", "texture"] {
        assert!(top.contains(w), "{w} missing from {top:?}");
    }
}

fn toy_dataset(dir: &Path) -> Dataset {
    let train = toy::generate("tr", &ToySpec { tampered: 3, authentic: 3, seed: 1 });
    let eval = toy::generate("ev", &ToySpec { tampered: 3, authentic: 3, seed: 2 });
    let manifest = toy::write_corpus(&dir.join("src"), &[("train", &train), ("eval", &eval)]).unwrap();
    let client = FixtureClient::load(&dir.join("src/fixtures.json")).unwrap();
    let cfg = BuildConfig { eval_sources: vec!["eval".into()], ..Default::default() };
    build_dataset(&SourceManifest::load(&manifest).unwrap(), &TemplateSet::builtin(), &client, &cfg, &dir.join("ds")).unwrap();
    Dataset::load(&dir.join("ds")).unwrap()
}

/// Returns the ground truth as its prediction.
struct Oracle<'a>(&'a Dataset);

impl PredictionProvider for Oracle<'_> {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, record: &AnalysisRecord, _: &RgbImage, _: Option<DegradationSpec>) -> Result<Option<Prediction>, EvalError> {
        Ok(Some(Prediction {
            verdict: record.description.verdict,
            text: record.description.to_text(),
            mask: self.0.load_mask(record).unwrap().map(|m| mask_to_float(&m)),
            flags: Vec::new(),
        }))
    }
}

#[test]
fn perfect_predictions_score_one_everywhere() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = toy_dataset(tmp.path());
    let report = run_suite(&Oracle(&ds), &ds, &SuiteConfig::default(), &HashEmbedder::default(), Vec::new()).unwrap();
    let det = report.table("detection").unwrap();
    let loc = report.table("localization").unwrap();
    let exp = report.table("explanation").unwrap();
    for row in &det.rows {
        assert_eq!((&row[2][..], &row[3][..]), ("1.0000", "1.0000"), "{row:?}");
    }
    for row in &loc.rows {
        assert!(row[2..].iter().all(|c| c == "1.0000"), "{row:?}");
    }
    for row in &exp.rows {
        assert_eq!(row[2], "1.0000");
    }
    let groups: Vec<&str> = det.rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(groups, ["all", "domain:PhotoShop", "domain:DeepFake", "domain:AIGC-Editing", "source:eval"]);
}

#[test]
fn reports_are_byte_identical_on_rerun_and_list_degradations() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = toy_dataset(tmp.path());
    let cfg = SuiteConfig { workers: 3, ..Default::default() };
    let a = run_suite(&Oracle(&ds), &ds, &cfg, &HashEmbedder::default(), Vec::new()).unwrap();
    let b = run_suite(&Oracle(&ds), &ds, &SuiteConfig { workers: 1, ..cfg }, &HashEmbedder::default(), Vec::new()).unwrap();
    a.write(&tmp.path().join("a")).unwrap();
    b.write(&tmp.path().join("b")).unwrap();
    for f in ["detection.csv", "localization.csv", "explanation.csv", "degradation.csv", "lexicon.csv", "report.txt", "report.json"] {
        assert_eq!(std::fs::read(tmp.path().join("a").join(f)).unwrap(), std::fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
    let conditions: Vec<&str> = a.table("degradation").unwrap().rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(conditions, ["none", "JPEG 70", "JPEG 80", "Gaussian 5", "Gaussian 10"]);
}

#[test]
fn unknown_ablation_flags_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = toy_dataset(tmp.path());
    let cfg = SuiteConfig { ablations: vec!["disable_everything".into()], ..Default::default() };
    assert!(matches!(run_suite(&Oracle(&ds), &ds, &cfg, &HashEmbedder::default(), Vec::new()), Err(EvalError::UnknownAblation(_))));
    assert!(matches!(parse_ablations(&["mflm_inputs=image+sound"]), Err(EvalError::UnknownAblation(_))));
    let t = parse_ablations(&["domain_tag", "locator_inputs", "disable_dtg,mflm_inputs=instruction+tag", "train_on_correct_o_det"]).unwrap();
    assert_eq!(t.len(), 3);
    let AblationTable::Custom(rows) = &t[2] else { panic!("custom table last") };
    assert_eq!(rows[0].flags(), ["disable_dtg", "mflm_inputs=instruction+tag"]);
    assert!(rows[1].train_on_correct_description);
    assert_eq!(AblationSettings::from_flags(&rows[0].flags()).unwrap(), rows[0]);
}

/// Predicts ground truth, with masks degraded for reduced inputs.
struct Stub<'a> {
    ds: &'a Dataset,
    calls: Vec<(AblationSettings, Need)>,
}

impl VariantRunner for Stub<'_> {
    fn run(&mut self, s: &AblationSettings, need: Need, records: &[AnalysisRecord]) -> Result<Vec<Prediction>, EvalError> {
        self.calls.push((*s, need));
        Ok(records
            .iter()
            .map(|r| Prediction {
                verdict: if s.disable_dtg { Verdict::Tampered } else { r.description.verdict },
                text: String::new(),
                mask: self.ds.load_mask(r).unwrap().map(|m| {
                    let full = s.mflm_inputs == Default::default();
                    mask_to_float(&m).mapv(|v| if full { v } else { 1.0 - v })
                }),
                flags: Vec::new(),
            })
            .collect())
    }
}

#[test]
fn ablation_tables_have_the_reference_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = toy_dataset(tmp.path());
    let tables = parse_ablations(&["domain_tag", "corrected_description", "locator_inputs"]).unwrap();
    let mut stub = Stub { ds: &ds, calls: Vec::new() };
    let out = run_ablations(&mut stub, &ds, &ds.eval, &tables, 0.5).unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(out[0].columns[..4], ["variant", "flags", "all_acc", "all_f1"]);
    assert_eq!(out[0].cell("with tag", "all_acc"), Some("1.0000"));
    assert_eq!(out[0].cell("without tag", "all_acc"), Some("0.5000"));
    assert_eq!(out[1].rows.len(), 2);
    let inputs: Vec<&str> = out[2].rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(inputs, ["instruction+image", "instruction+tag", "instruction+tag+image", "description+image"]);
    assert_eq!(out[2].cell("description+image", "all_iou"), Some("1.0000"));
    assert_eq!(out[2].cell("instruction+tag", "all_iou"), Some("0.0000"));
    assert_eq!(stub.calls.len(), 8);
}

#[test]
fn external_predictions_are_ingested() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = toy_dataset(tmp.path());
    let mut rows = Vec::new();
    let mut masks = Vec::new();
    for r in &ds.eval {
        rows.push(PredictionRow { id: r.id.clone(), verdict: r.description.verdict, text: Some(r.description.to_text()) });
        if let Some(m) = ds.load_mask(r).unwrap() {
            masks.push((r.id.clone(), encode_mask_png(&m)));
        }
    }
    let dir = tmp.path().join("baseline");
    ExternalPredictions::write(&dir, &rows, &masks).unwrap();
    ExternalPredictions::write(&dir.join("jpeg-70"), &rows, &[]).unwrap();
    let ext = ExternalPredictions::load(&dir).unwrap();
    let report = run_suite(&ext, &ds, &SuiteConfig::default(), &HashEmbedder::default(), Vec::new()).unwrap();
    assert_eq!(report.provider, "external:baseline");
    assert_eq!(report.table("localization").unwrap().cell("all", "iou"), Some("1.0000"));
    let deg = report.table("degradation").unwrap();
    assert_eq!(deg.cell("JPEG 70", "acc"), Some("1.0000"));
    assert_eq!(deg.cell("JPEG 70", "iou"), Some("0.0000"));
    assert_eq!(deg.cell("Gaussian 5", "acc"), Some("n/a"));

    ExternalPredictions::write(&tmp.path().join("short"), &rows[..1], &[]).unwrap();
    let short = ExternalPredictions::load(&tmp.path().join("short")).unwrap();
    assert!(matches!(run_suite(&short, &ds, &SuiteConfig::default(), &HashEmbedder::default(), Vec::new()), Err(EvalError::MissingPrediction(_))));
}
