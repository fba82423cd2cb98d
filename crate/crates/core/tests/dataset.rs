use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use tamperscope_core::dataset::{
    balance_ratio, build_dataset, check_description, record_id, render_prompt, BuildConfig, BuildError, ClientError, Dataset,
    DescriptionClient, DescriptionRequest, FixtureClient, PromptTemplate, RecordingClient, ReplayClient, SourceEntry,
    SourceManifest, TemplateError, TemplateSet,
};
use tamperscope_core::description::{parse_description, Verdict};
use tamperscope_core::domain::DomainCategory;
use tamperscope_core::imaging::load_mask;
use tamperscope_core::toy::{self, ToySpec};

/// One sample per domain and authenticity.
fn six_corpus(dir: &Path) -> PathBuf {
    let samples = toy::generate("fx", &ToySpec { tampered: 3, authentic: 3, seed: 4 });
    toy::write_corpus(dir, &[("fixture", &samples)]).unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn six_entry_manifest_builds_six_records() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = SourceManifest::load(&six_corpus(&tmp.path().join("src"))).unwrap();
    let client = FixtureClient::load(&tmp.path().join("src/fixtures.json")).unwrap();
    let out = tmp.path().join("out");
    let built = build_dataset(&manifest, &TemplateSet::builtin(), &client, &BuildConfig::default(), &out).unwrap();
    assert_eq!(built.train.len(), 6);
    assert!(built.rejects.is_empty());
    let domains: BTreeSet<_> = built.train.iter().map(|r| (r.domain, r.authentic)).collect();
    assert_eq!(domains.len(), 6);
    assert_eq!(built.report.train.overall.balance_ratio, Some(1.0));
    for d in DomainCategory::ALL {
        assert_eq!(built.report.train.per_domain[&d].tampered, 1);
        assert_eq!(built.report.train.per_domain[&d].authentic, 1);
    }

    let loaded = Dataset::load(&out).unwrap();
    assert_eq!(loaded.train, built.train);
    assert!(loaded.eval.is_empty());
    for r in &loaded.train {
        assert_eq!(r.authentic, r.mask_path.is_none());
        assert!(out.join(format!("raw/{}.txt", r.id)).exists());
        let image = loaded.load_image(r).unwrap();
        if let Some(mask) = loaded.load_mask(r).unwrap() {
            assert_eq!(mask.dim(), (image.height() as usize, image.width() as usize));
            let bytes = image::open(out.join(r.mask_path.as_ref().unwrap())).unwrap().to_luma8();
            assert!(bytes.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
            assert!(mask.iter().any(|&m| m));
        }
    }
}

#[test]
fn replayed_builds_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = SourceManifest::load(&six_corpus(&tmp.path().join("src"))).unwrap();
    let transcript = tmp.path().join("transcript.jsonl");
    let recorder = RecordingClient::new(FixtureClient::load(&tmp.path().join("src/fixtures.json")).unwrap(), transcript.clone());
    build_dataset(&manifest, &TemplateSet::builtin(), &recorder, &BuildConfig::default(), &tmp.path().join("live")).unwrap();

    let replay = ReplayClient::load(&transcript).unwrap();
    assert_eq!(replay.len(), 6);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    build_dataset(&manifest, &TemplateSet::builtin(), &replay, &BuildConfig { workers: 1, ..Default::default() }, &a).unwrap();
    build_dataset(&manifest, &TemplateSet::builtin(), &replay, &BuildConfig { workers: 6, ..Default::default() }, &b).unwrap();
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    assert_eq!(ta, tb);
    assert_eq!(ta, tree(&tmp.path().join("live")));
}

#[test]
fn unreadable_image_becomes_a_reject() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest_path = six_corpus(&tmp.path().join("src"));
    let manifest = SourceManifest::load(&manifest_path).unwrap();
    std::fs::remove_file(manifest.resolve(&manifest.entries[2].image_path)).unwrap();
    let client = FixtureClient::load(&tmp.path().join("src/fixtures.json")).unwrap();
    let out = tmp.path().join("out");
    let built = build_dataset(&manifest, &TemplateSet::builtin(), &client, &BuildConfig::default(), &out).unwrap();
    assert_eq!(built.train.len(), 5);
    assert_eq!(built.rejects.len(), 1);
    assert_eq!(built.rejects[0].id, record_id(&manifest.entries[2]));
    assert_eq!(std::fs::read_to_string(out.join("rejects.jsonl")).unwrap().lines().count(), 1);
    assert_eq!(built.report.rejects, 1);
}

struct Flaky {
    failures: usize,
    calls: AtomicUsize,
    error: ClientError,
    inner: FixtureClient,
}

impl DescriptionClient for Flaky {
    fn describe(&self, request: &DescriptionRequest) -> Result<String, ClientError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) < self.failures {
            return Err(self.error.clone());
        }
        self.inner.describe(request)
    }
}

fn single_entry(tmp: &Path) -> (SourceManifest, FixtureClient) {
    let samples = toy::generate("one", &ToySpec { tampered: 1, authentic: 0, seed: 9 });
    let path = toy::write_corpus(tmp, &[("solo", &samples)]).unwrap();
    (SourceManifest::load(&path).unwrap(), FixtureClient::load(&tmp.join("fixtures.json")).unwrap())
}

#[test]
fn two_timeouts_then_success_within_three_attempts() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, inner) = single_entry(&tmp.path().join("src"));
    let client = Flaky { failures: 2, calls: AtomicUsize::new(0), error: ClientError::Timeout, inner };
    let cfg = BuildConfig { max_attempts: 3, ..Default::default() };
    let built = build_dataset(&manifest, &TemplateSet::builtin(), &client, &cfg, &tmp.path().join("out")).unwrap();
    assert_eq!(built.train.len(), 1);
    assert_eq!(client.calls.load(Ordering::SeqCst), 3);
}

#[test]
fn exhausted_retries_and_refusals_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, inner) = single_entry(&tmp.path().join("src"));
    let client = Flaky { failures: 5, calls: AtomicUsize::new(0), error: ClientError::Refused("policy".into()), inner };
    let built = build_dataset(&manifest, &TemplateSet::builtin(), &client, &BuildConfig::default(), &tmp.path().join("out")).unwrap();
    assert!(built.train.is_empty());
    assert_eq!(built.rejects[0].attempts, 3);
    assert!(built.rejects[0].reason.contains("policy"));
}

#[test]
fn missing_verdict_or_wrong_verdict_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, _) = single_entry(&tmp.path().join("src"));
    let name = manifest.entries[0].image_path.file_name().unwrap().to_string_lossy().into_owned();
    for (text, needle) in [
        ("LOCATION: upper left corner\nBASIS: seams", "VERDICT"),
        ("VERDICT: authentic\nLOCATION: none\nBASIS: consistent", "contradicts"),
        ("VERDICT: tampered\nLOCATION: somewhere\nBASIS: seams", "position"),
    ] {
        let client = FixtureClient::new(HashMap::from([(name.clone(), text.to_string())]));
        let out = tmp.path().join(format!("out-{needle}"));
        let built = build_dataset(&manifest, &TemplateSet::builtin(), &client, &BuildConfig::default(), &out).unwrap();
        assert!(built.train.is_empty(), "{text}");
        assert!(built.rejects[0].reason.contains(needle), "{}", built.rejects[0].reason);
        let raw = std::fs::read_to_string(out.join(format!("raw/{}.txt", built.rejects[0].id))).unwrap();
        assert_eq!(raw, text);
    }
}

#[test]
fn empty_manifest_and_duplicate_ids_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let client = FixtureClient::default();
    let empty = SourceManifest::new(Vec::new(), tmp.path().into()).unwrap();
    assert!(matches!(
        build_dataset(&empty, &TemplateSet::builtin(), &client, &BuildConfig::default(), tmp.path()),
        Err(BuildError::EmptyManifest)
    ));
    let (manifest, _) = single_entry(&tmp.path().join("src"));
    let doubled = SourceManifest::new(vec![manifest.entries[0].clone(), manifest.entries[0].clone()], manifest.root.clone()).unwrap();
    assert!(matches!(
        build_dataset(&doubled, &TemplateSet::builtin(), &client, &BuildConfig::default(), tmp.path()),
        Err(BuildError::DuplicateId(_))
    ));
}

#[test]
fn eval_sources_form_a_disjoint_split() {
    let tmp = tempfile::tempdir().unwrap();
    let train = toy::generate("tr", &ToySpec { tampered: 3, authentic: 1, seed: 1 });
    let eval = toy::generate("ev", &ToySpec { tampered: 2, authentic: 2, seed: 2 });
    let path = toy::write_corpus(&tmp.path().join("src"), &[("alpha", &train), ("beta", &eval)]).unwrap();
    let manifest = SourceManifest::load(&path).unwrap();
    let client = FixtureClient::load(&tmp.path().join("src/fixtures.json")).unwrap();
    let cfg = BuildConfig { eval_sources: vec!["beta".into()], ..Default::default() };
    let built = build_dataset(&manifest, &TemplateSet::builtin(), &client, &cfg, &tmp.path().join("out")).unwrap();
    assert_eq!((built.train.len(), built.eval.len()), (4, 4));
    let a: BTreeSet<_> = built.train.iter().map(|r| &r.image_path).collect();
    assert!(built.eval.iter().all(|r| !a.contains(&r.image_path)));
    assert_eq!(built.report.eval.overall.balance_ratio, Some(1.0));
    assert_eq!(built.report.train.overall.balance_ratio, Some(3.0));

    let mut overlapping = manifest.clone();
    let mut dup = overlapping.entries[0].clone();
    dup.source_name = "beta".into();
    dup.image_path = overlapping.resolve(&dup.image_path);
    overlapping.entries.push(dup);
    assert!(matches!(
        build_dataset(&overlapping, &TemplateSet::builtin(), &client, &cfg, &tmp.path().join("o2")),
        Err(BuildError::SplitOverlap(_))
    ));
}

#[test]
fn mask_pairing_is_enforced_by_the_manifest() {
    let entry = |authentic: bool, mask: Option<&str>| SourceEntry {
        image_path: "a.png".into(),
        mask_path: mask.map(PathBuf::from),
        domain: DomainCategory::Aigc,
        authentic,
        source_name: "s".into(),
        provenance: None,
    };
    assert!(SourceManifest::new(vec![entry(false, None)], PathBuf::new()).is_err());
    assert!(SourceManifest::new(vec![entry(true, Some("m.png"))], PathBuf::new()).is_err());
    assert!(SourceManifest::new(vec![entry(false, Some("m.png")), entry(true, None)], PathBuf::new()).is_ok());
}

#[test]
fn balance_ratio_of_a_balanced_domain_is_one() {
    assert_eq!(balance_ratio(20_000, 20_000), Some(1.0));
    assert_eq!(balance_ratio(3, 0), None);
}

fn entry(domain: DomainCategory, authentic: bool) -> SourceEntry {
    SourceEntry {
        image_path: "imgs/cat.jpg".into(),
        mask_path: (!authentic).then(|| "masks/cat.png".into()),
        domain,
        authentic,
        source_name: "corpus".into(),
        provenance: None,
    }
}

#[test]
fn tampered_prompts_ask_for_artifacts_and_semantic_errors() {
    let set = TemplateSet::builtin();
    let prompt = render_prompt(set.get(DomainCategory::Photoshop, false), &entry(DomainCategory::Photoshop, false)).unwrap();
    assert!(prompt.contains("pixel-level artifact details"));
    assert!(prompt.contains("image-level semantic-related errors"));
    assert!(prompt.contains("cat.jpg") && prompt.contains("cat.png"));
    assert!(!prompt.contains('{'));
    assert_eq!(prompt, render_prompt(set.get(DomainCategory::Photoshop, false), &entry(DomainCategory::Photoshop, false)).unwrap());
}

#[test]
fn authentic_prompts_never_mention_a_mask() {
    let set = TemplateSet::builtin();
    for d in DomainCategory::ALL {
        let t = set.get(d, true);
        assert!(!t.placeholders().unwrap().contains(&"mask".to_string()));
        let prompt = render_prompt(t, &entry(d, true)).unwrap();
        assert!(!prompt.contains("cat.png"));
        assert!(!prompt.to_lowercase().contains("mask"));
    }
}

#[test]
fn template_errors_name_the_problem() {
    let set = TemplateSet::builtin();
    assert!(matches!(
        render_prompt(set.get(DomainCategory::Aigc, false), &entry(DomainCategory::Deepfake, false)),
        Err(TemplateError::Mismatch { .. })
    ));
    let t = PromptTemplate { domain: DomainCategory::Aigc, authentic: false, body: "see {image} and {mask}".into() };
    let mut no_mask = entry(DomainCategory::Aigc, false);
    no_mask.mask_path = None;
    assert_eq!(render_prompt(&t, &no_mask), Err(TemplateError::MissingValue("mask".into())));
    let bad = PromptTemplate { body: "{image} {mask} {weather}".into(), ..t.clone() };
    assert_eq!(bad.validate(), Err(TemplateError::UnknownPlaceholder("weather".into())));
    let missing = PromptTemplate { body: "only {image}".into(), ..t.clone() };
    assert!(matches!(missing.validate(), Err(TemplateError::MustReference { placeholder: "mask", .. })));
    let braces = PromptTemplate { body: "{{literal}} {image} {mask}".into(), ..t };
    assert_eq!(render_prompt(&braces, &entry(DomainCategory::Aigc, false)).unwrap(), "{literal} cat.jpg cat.png");
}

#[test]
fn template_sets_round_trip_through_a_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let set = TemplateSet::builtin();
    set.write(tmp.path()).unwrap();
    assert_eq!(TemplateSet::load(tmp.path()).unwrap(), set);
    std::fs::remove_file(tmp.path().join("deepfake-authentic.txt")).unwrap();
    assert!(matches!(TemplateSet::load(tmp.path()), Err(TemplateError::Io { .. })));
}

#[test]
fn replay_misses_are_not_found() {
    let req = DescriptionRequest { prompt: "p".into(), image_name: "x.png".into(), image: vec![1, 2], mask: None };
    let other = DescriptionRequest { mask: Some(Vec::new()), ..req.clone() };
    assert_ne!(req.key(), other.key());
    assert!(matches!(ReplayClient::default().describe(&req), Err(ClientError::NotFound(_))));
    assert!(!ClientError::NotFound("x".into()).is_transient());
}

#[test]
fn toy_fixture_descriptions_satisfy_record_invariants() {
    for s in toy::generate("inv", &ToySpec { tampered: 8, authentic: 4, seed: 3 }) {
        let parsed = parse_description(&s.description.to_text()).unwrap();
        assert_eq!(parsed, s.description);
        check_description(&parsed, s.authentic()).unwrap();
        assert_eq!(parsed.verdict == Verdict::Tampered, s.mask.is_some());
    }
}

#[test]
fn stored_masks_match_the_source_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let samples = toy::generate("m", &ToySpec { tampered: 2, authentic: 0, seed: 5 });
    let path = toy::write_corpus(&tmp.path().join("src"), &[("s", &samples)]).unwrap();
    let manifest = SourceManifest::load(&path).unwrap();
    let client = FixtureClient::load(&tmp.path().join("src/fixtures.json")).unwrap();
    let out = tmp.path().join("out");
    let built = build_dataset(&manifest, &TemplateSet::builtin(), &client, &BuildConfig::default(), &out).unwrap();
    for (r, s) in built.train.iter().zip(&samples) {
        assert_eq!(&load_mask(&out.join(r.mask_path.as_ref().unwrap())).unwrap(), s.mask.as_ref().unwrap());
    }
}
