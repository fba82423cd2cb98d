//! Model-level behaviour of the domain classifier, the detector and the
//! locator, on small toy inputs.

use ndarray::Array2;
use proptest::prelude::*;
use tamperscope_core::description::Verdict;
use tamperscope_core::detector::{train_detector, DetectionSample, Detector, DetectorConfig, DEFAULT_INSTRUCTION};
use tamperscope_core::domain::{DomainCategory, DomainTag};
use tamperscope_core::dtg::{classify_domain, softmax3, train_dtg, DomainClassifier, DomainSample, DtgConfig, DtgError, DtgModel, DtgTrainConfig};
use tamperscope_core::locator::{
    extract_seg_embedding, seg_position, train_locator, Locator, LocatorConfig, LocatorQuery, LocatorSample, TamperMask, SEG_PROMPT,
};
use tamperscope_core::nn::ParamRole;
use tamperscope_core::tokenizer::{ByteTokenizer, Special};
use tamperscope_core::toy::{self, Quadrant, ToySpec};

fn small_dtg() -> DtgConfig {
    DtgConfig { input_size: 64, channels: vec![8, 16, 16], seed: 3 }
}

fn domain_samples(per_domain: usize, seed: u64) -> Vec<DomainSample> {
    toy::domain_images(per_domain, seed).into_iter().map(|(image, domain)| DomainSample { image, domain }).collect()
}

proptest! {
    #[test]
    fn softmax3_is_a_distribution(a in -50.0f64..50.0, b in -50.0f64..50.0, c in -50.0f64..50.0) {
        let p = softmax3([a, b, c]);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted = softmax3([a + 7.0, b + 7.0, c + 7.0]);
        for (x, y) in p.iter().zip(shifted) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn higher_threshold_selects_a_subset(probs in prop::collection::vec(0.0f64..=1.0, 64), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let mask = TamperMask::from_probs(Array2::from_shape_vec((8, 8), probs).unwrap(), lo);
        let strict = mask.rethreshold(hi);
        prop_assert!(strict.tampered_pixels() <= mask.tampered_pixels());
        for (s, l) in strict.binary.iter().zip(&mask.binary) {
            prop_assert!(!s || *l);
        }
    }
}

#[test]
fn dtg_cross_entropy_matches_its_logits() {
    let model = DtgModel::<f64>::new(small_dtg());
    for (image, domain) in toy::domain_images(1, 5) {
        let logits = model.domain_logits(&image);
        let (loss, _) = model.loss_and_grads(model.input_tensor(&image), domain, 1.0);
        let oracle = -softmax3(logits)[domain.code()].ln();
        assert!((loss - oracle).abs() < 1e-9, "{loss} vs {oracle}");
    }
}

#[test]
fn dtg_with_zero_learning_rate_keeps_its_weights() {
    let mut model = DtgModel::<f32>::new(small_dtg());
    let before = model.store.snapshot(&[ParamRole::Base, ParamRole::Head]);
    let config = DtgTrainConfig { epochs: 2, learning_rate: 0.0, ..DtgTrainConfig::default() };
    train_dtg(&mut model, &domain_samples(1, 2), &config).unwrap();
    assert_eq!(model.store.snapshot(&[ParamRole::Base, ParamRole::Head]), before);
}

#[test]
fn dtg_rejects_an_empty_training_set() {
    let mut model = DtgModel::<f32>::new(small_dtg());
    assert!(matches!(train_dtg(&mut model, &[], &DtgTrainConfig::default()), Err(DtgError::Empty)));
}

#[test]
fn dtg_overfits_a_small_balanced_set() {
    let samples = domain_samples(4, 8);
    let mut model = DtgModel::<f32>::new(small_dtg());
    let config = DtgTrainConfig { epochs: 40, learning_rate: 3e-3, batch_size: 4, seed: 1 };
    let report = train_dtg(&mut model, &samples, &config).unwrap();
    let correct = samples.iter().filter(|s| classify_domain(&model, &s.image).category == s.domain).count();
    let accuracy = correct as f64 / samples.len() as f64;
    assert!(accuracy >= 0.95, "accuracy {accuracy}, report {report:?}");
    assert!(report.final_loss < report.initial_loss);
}

fn detector_logits(det: &Detector<f64>, tag: DomainCategory, adapters: bool) -> Array2<f64> {
    let image = toy::tampered_sample("d", DomainCategory::Photoshop, Quadrant::UpperLeft, 6).image;
    let tokens = det.encode_image(&image);
    let layout = det.layout(Some(&DomainTag::new(tag)), &[], DEFAULT_INSTRUCTION).unwrap();
    det.decoder(&tokens, &layout, adapters).logits(&[]).unwrap()
}

fn quick_detector_config() -> DetectorConfig {
    let mut config = DetectorConfig::default();
    config.train.epochs = 1;
    config
}

fn detection_samples(samples: &[toy::ToySample]) -> Vec<DetectionSample> {
    samples.iter().map(|s| DetectionSample { image: s.image.clone(), domain: s.domain, description: s.description.to_text() }).collect()
}

#[test]
fn detector_prompt_splices_image_tag_and_question_in_order() {
    let det = Detector::<f32>::new(DetectorConfig::default());
    let tag = DomainTag::new(DomainCategory::Aigc);
    let layout = det.layout(Some(&tag), &[], DEFAULT_INSTRUCTION).unwrap();
    let tok = ByteTokenizer;
    let n_image = det.config.vision.tokens();
    assert_eq!(layout.ids[0], Special::Bos.id());
    assert_eq!(layout.image_span, 1..1 + n_image);
    assert!(layout.ids[layout.image_span.clone()].iter().all(|&t| t == Special::Image.id()));
    let tag_span = layout.segment_spans[0].clone();
    assert_eq!(tag_span.start, layout.image_span.end);
    assert_eq!(tok.decode(&layout.ids[tag_span.clone()]), tag.sentence);
    assert_eq!(layout.question_span.start, tag_span.end);
    assert_eq!(tok.decode(&layout.ids[layout.question_span.clone()]), DEFAULT_INSTRUCTION);
    assert_eq!(*layout.ids.last().unwrap(), Special::Answer.id());
    assert_eq!(layout.len(), 1 + n_image + tag_span.len() + DEFAULT_INSTRUCTION.len() + 1);

    let mut untagged = DetectorConfig::default();
    untagged.use_domain_tag = false;
    let det = Detector::<f32>::new(untagged);
    let layout = det.layout(Some(&tag), &[], DEFAULT_INSTRUCTION).unwrap();
    assert!(layout.segment_spans.is_empty());
    assert_eq!(layout.question_span.start, layout.image_span.end);
}

#[test]
fn domain_tag_only_affects_positions_from_its_span_onward() {
    let det = Detector::<f64>::new(DetectorConfig::default());
    let layout = det.layout(Some(&DomainTag::new(DomainCategory::Deepfake)), &[], DEFAULT_INSTRUCTION).unwrap();
    let tag_start = layout.segment_spans[0].start;
    let a = detector_logits(&det, DomainCategory::Deepfake, true);
    let b = detector_logits(&det, DomainCategory::Aigc, true);
    assert_eq!(a.slice(ndarray::s![..tag_start, ..]), b.slice(ndarray::s![..tag_start, ..]));
    assert_ne!(a.row(a.nrows() - 1), b.row(b.nrows() - 1));
}

#[test]
fn fresh_adapters_are_neutral_and_zeroed_adapters_revert_to_base() {
    let mut det = Detector::<f64>::new(quick_detector_config());
    assert_eq!(detector_logits(&det, DomainCategory::Aigc, true), detector_logits(&det, DomainCategory::Aigc, false));

    let samples = toy::generate("n", &ToySpec { tampered: 1, authentic: 1, seed: 4 });
    let report = train_detector(&mut det, &detection_samples(&samples), None).unwrap();
    assert_eq!(report.base_checksum_before, report.base_checksum_after, "base weights are frozen");
    assert_ne!(detector_logits(&det, DomainCategory::Aigc, true), detector_logits(&det, DomainCategory::Aigc, false));

    let base = detector_logits(&det, DomainCategory::Aigc, false);
    det.store.zero_adapters();
    assert_eq!(detector_logits(&det, DomainCategory::Aigc, true), base);
}

#[test]
fn detector_overfits_two_samples() {
    let samples = toy::generate("o", &ToySpec { tampered: 1, authentic: 1, seed: 12 });
    let mut config = DetectorConfig::default();
    config.train.epochs = 150;
    let mut det = Detector::<f32>::new(config);
    let report = train_detector(&mut det, &detection_samples(&samples), None).unwrap();
    assert!(report.final_loss < 0.1 * report.initial_loss, "{report:?}");
    for s in &samples {
        let out = det.detect(&s.image, &DomainTag::new(s.domain), DEFAULT_INSTRUCTION).unwrap();
        assert_eq!(out.description.verdict, s.description.verdict, "{}", out.raw_text);
        if s.authentic() {
            assert_eq!(out.description.verdict, Verdict::Authentic);
        }
    }
}

#[test]
fn ground_truth_localization_answer_is_the_seg_sentence() {
    assert_eq!(SEG_PROMPT, "It is <SEG>");
    let loc = Locator::<f32>::new(LocatorConfig::default());
    let answer = loc.target_answer("ignored");
    assert_eq!(ByteTokenizer.decode(&answer), SEG_PROMPT);
    assert_eq!(answer.len(), "It is ".len() + 1);
    assert_eq!(seg_position(&answer), Some(answer.len() - 1));

    let mut corrected = LocatorConfig::default();
    corrected.train.correct_description_target = true;
    let loc = Locator::<f32>::new(corrected);
    assert_eq!(ByteTokenizer.decode(&loc.target_answer("VERDICT: tampered")), "VERDICT: tampered\nIt is <SEG>");
}

#[test]
fn seg_embedding_reads_the_first_seg_row() {
    let states = Array2::from_shape_fn((5, 3), |(r, c)| (r * 10 + c) as f64);
    let seg = Special::Seg.id();
    let ids = [1, 2, seg, 4, seg];
    let row = extract_seg_embedding(&states, &ids, |r| r).unwrap();
    assert_eq!(row, Array2::from_shape_vec((1, 3), vec![20.0, 21.0, 22.0]).unwrap());
    let doubled = extract_seg_embedding(&states, &ids, |r| r * 2.0).unwrap();
    assert_eq!(doubled[[0, 1]], 42.0);
    assert!(extract_seg_embedding(&states, &[1, 2, 3], |r| r).is_err());
}

fn locator_samples(samples: &[toy::ToySample]) -> Vec<LocatorSample> {
    samples
        .iter()
        .map(|s| LocatorSample {
            image: s.image.clone(),
            domain: s.domain,
            mask: s.mask.clone(),
            authentic: s.authentic(),
            description: s.description.to_text(),
            reference: s.description.to_text(),
        })
        .collect()
}

#[test]
fn locator_prompt_and_mask_revert_when_adapters_are_zeroed() {
    let sample = toy::tampered_sample("l", DomainCategory::Photoshop, Quadrant::LowerRight, 21);
    let mut config = LocatorConfig::default();
    config.train.epochs = 1;
    let mut loc = Locator::<f64>::new(config);
    let description = sample.description.to_text();
    let layout = loc.layout(&description, sample.domain, None).unwrap();
    let answer = loc.target_answer(&description);
    let prompt = |loc: &Locator<f64>, adapters: bool| loc.prompt_embedding(&sample.image, &layout, &answer, adapters).unwrap();
    let mask = |loc: &Locator<f64>, adapters: bool| loc.localize(&sample.image, &prompt(loc, adapters), adapters).unwrap();

    assert_eq!(prompt(&loc, true), prompt(&loc, false));
    assert_eq!(mask(&loc, true), mask(&loc, false));

    let report = train_locator(&mut loc, &locator_samples(std::slice::from_ref(&sample))).unwrap();
    assert!(report.final_loss.is_finite());
    let base = mask(&loc, false);
    assert_ne!(mask(&loc, true).probs, base.probs);
    loc.store.zero_adapters();
    assert_eq!(mask(&loc, true), base);
}

#[test]
fn located_masks_are_nested_under_rising_thresholds() {
    let loc = Locator::<f32>::new(LocatorConfig::default());
    let sample = toy::tampered_sample("t", DomainCategory::Aigc, Quadrant::UpperRight, 5);
    let description = sample.description.to_text();
    let query = LocatorQuery { image: &sample.image, description: &description, domain: sample.domain };
    let out = loc.locate(query, true).unwrap();
    let mut previous = usize::MAX;
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let pixels = out.mask.rethreshold(t).tampered_pixels();
        assert!(pixels <= previous);
        previous = pixels;
    }
    assert_eq!(out.mask.rethreshold(0.0).tampered_pixels(), out.mask.probs.len());
}
