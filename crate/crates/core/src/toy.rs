//! Synthetic copy-move corpus for desk-scale training and tests.
//!
//! Each domain has its own background style so the tag classifier has
//! something to learn. A tampered image holds two identical textured squares
//! in two quadrants; the mask and the location text name the pasted copy,
//! which pixels alone cannot single out. An authentic image holds one plain
//! disc and no striped texture.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::description::{StructuredDescription, Verdict};
use crate::domain::DomainCategory;
use crate::detector::{train_detector, DetectionSample, Detector, DetectorConfig};
use crate::dtg::{train_dtg, DomainSample, DtgConfig, DtgModel, DtgTrainConfig};
use crate::imaging::{encode_mask_png, encode_png_rgb, BinaryMask};
use crate::locator::{train_locator, Locator, LocatorConfig, LocatorSample};
use crate::pipeline::{Pipeline, PipelineError};
use crate::scalar::Scalar;

pub const TOY_SIZE: u32 = 128;
const OBJECT: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quadrant {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::UpperLeft, Quadrant::UpperRight, Quadrant::LowerLeft, Quadrant::LowerRight];

    pub fn phrase(self) -> &'static str {
        match self {
            Quadrant::UpperLeft => "upper left corner",
            Quadrant::UpperRight => "upper right corner",
            Quadrant::LowerLeft => "lower left corner",
            Quadrant::LowerRight => "lower right corner",
        }
    }

    /// Top-left pixel of the square placed in this quadrant.
    fn origin(self) -> (u32, u32) {
        let half = TOY_SIZE / 2;
        let pad = (half - OBJECT) / 2;
        let (qx, qy) = match self {
            Quadrant::UpperLeft => (0, 0),
            Quadrant::UpperRight => (1, 0),
            Quadrant::LowerLeft => (0, 1),
            Quadrant::LowerRight => (1, 1),
        };
        (qx * half + pad, qy * half + pad)
    }
}

pub fn basis_for(domain: DomainCategory) -> &'static str {
    match domain {
        DomainCategory::Photoshop => "duplicated texture with a sharp edge seam",
        DomainCategory::Deepfake => "lighting on the region breaks the scene and the edge is blurred",
        DomainCategory::Aigc => "texture is too smooth and the lighting of the edge is inconsistent",
    }
}

pub const AUTHENTIC_BASIS: &str = "lighting, texture and edge statistics are consistent";

#[derive(Clone, Debug)]
pub struct ToySample {
    pub name: String,
    pub image: RgbImage,
    pub mask: Option<BinaryMask>,
    pub domain: DomainCategory,
    pub description: StructuredDescription,
    pub quadrant: Option<Quadrant>,
}

impl ToySample {
    pub fn authentic(&self) -> bool {
        self.mask.is_none()
    }
}

fn background(domain: DomainCategory, rng: &mut ChaCha8Rng) -> RgbImage {
    let jitter: i32 = rng.random_range(-15..=15);
    let c = |v: i32| v.clamp(0, 255) as u8;
    match domain {
        DomainCategory::Photoshop => RgbImage::from_fn(TOY_SIZE, TOY_SIZE, |_, _| {
            let n: i32 = rng.random_range(-25..=25);
            Rgb([c(70 + jitter + n), c(85 + n), c(150 + n)])
        }),
        DomainCategory::Deepfake => {
            let mid = TOY_SIZE as f64 / 2.0;
            RgbImage::from_fn(TOY_SIZE, TOY_SIZE, |x, y| {
                let dx = (x as f64 - mid) / 40.0;
                let dy = (y as f64 - mid) / 52.0;
                if dx * dx + dy * dy < 1.0 {
                    Rgb([c(205 + jitter), c(160 + jitter / 2), c(130)])
                } else {
                    Rgb([c(120 + jitter), c(120 + jitter), c(125 + jitter)])
                }
            })
        }
        DomainCategory::Aigc => RgbImage::from_fn(TOY_SIZE, TOY_SIZE, |x, y| {
            let t = (x + y) as i32 * 255 / (2 * TOY_SIZE as i32);
            Rgb([c(40 + t / 2 + jitter), c(150 + t / 3), c(60 + jitter)])
        }),
    }
}

fn object(rng: &mut ChaCha8Rng) -> RgbImage {
    let a = Rgb([rng.random_range(0..=255u8), rng.random_range(0..=60u8), rng.random_range(0..=255u8)]);
    let b = Rgb([rng.random_range(200..=255u8), rng.random_range(200..=255u8), rng.random_range(0..=80u8)]);
    let period = rng.random_range(4..=8u32);
    RgbImage::from_fn(OBJECT, OBJECT, |x, y| if ((x + y) / period) % 2 == 0 { a } else { b })
}

fn paste(target: &mut RgbImage, patch: &RgbImage, at: (u32, u32)) {
    image::imageops::replace(target, patch, i64::from(at.0), i64::from(at.1));
}

fn square_mask(at: (u32, u32)) -> BinaryMask {
    Array2::from_shape_fn((TOY_SIZE as usize, TOY_SIZE as usize), |(r, c)| {
        let (r, c) = (r as u32, c as u32);
        r >= at.1 && r < at.1 + OBJECT && c >= at.0 && c < at.0 + OBJECT
    })
}

/// A tampered sample whose pasted copy sits in `target`.
pub fn tampered_sample(name: &str, domain: DomainCategory, target: Quadrant, seed: u64) -> ToySample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = background(domain, &mut rng);
    let patch = object(&mut rng);
    let others: Vec<Quadrant> = Quadrant::ALL.iter().copied().filter(|q| *q != target).collect();
    let source = others[rng.random_range(0..others.len())];
    paste(&mut image, &patch, source.origin());
    paste(&mut image, &patch, target.origin());
    ToySample {
        name: name.to_string(),
        image,
        mask: Some(square_mask(target.origin())),
        domain,
        description: StructuredDescription {
            verdict: Verdict::Tampered,
            location_text: format!("the {}", target.phrase()),
            basis_text: basis_for(domain).to_string(),
        },
        quadrant: Some(target),
    }
}

pub fn authentic_sample(name: &str, domain: DomainCategory, seed: u64) -> ToySample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = background(domain, &mut rng);
    let at = Quadrant::ALL[rng.random_range(0..4)];
    let color = Rgb([rng.random_range(0..=255u8), rng.random_range(0..=255u8), rng.random_range(0..=255u8)]);
    let (ox, oy) = at.origin();
    let r = OBJECT as f64 / 2.0;
    for y in 0..OBJECT {
        for x in 0..OBJECT {
            let (dx, dy) = (x as f64 + 0.5 - r, y as f64 + 0.5 - r);
            if dx * dx + dy * dy < r * r {
                image.put_pixel(ox + x, oy + y, color);
            }
        }
    }
    ToySample {
        name: name.to_string(),
        image,
        mask: None,
        domain,
        description: StructuredDescription {
            verdict: Verdict::Authentic,
            location_text: "none".into(),
            basis_text: AUTHENTIC_BASIS.into(),
        },
        quadrant: None,
    }
}

/// Composition of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub tampered: usize,
    pub authentic: usize,
    pub seed: u64,
}

/// Tampered samples cycle over domains and quadrants; authentic ones over
/// domains.
pub fn generate(prefix: &str, spec: &ToySpec) -> Vec<ToySample> {
    let mut out = Vec::with_capacity(spec.tampered + spec.authentic);
    for i in 0..spec.tampered {
        let domain = DomainCategory::ALL[i % 3];
        let quadrant = Quadrant::ALL[i % 4];
        out.push(tampered_sample(&format!("{prefix}-t{i:03}"), domain, quadrant, spec.seed.wrapping_mul(1_000_003) + i as u64));
    }
    for i in 0..spec.authentic {
        let domain = DomainCategory::ALL[i % 3];
        out.push(authentic_sample(&format!("{prefix}-a{i:03}"), domain, spec.seed.wrapping_mul(2_000_029) + i as u64));
    }
    out
}

/// Balanced domain-classification images, `per_domain` of each.
pub fn domain_images(per_domain: usize, seed: u64) -> Vec<(RgbImage, DomainCategory)> {
    let mut out = Vec::with_capacity(per_domain * 3);
    for domain in DomainCategory::ALL {
        for i in 0..per_domain {
            let s = seed.wrapping_mul(7_919) + (domain.code() * 1000 + i) as u64;
            let sample = if i % 2 == 0 {
                tampered_sample("", domain, Quadrant::ALL[i % 4], s)
            } else {
                authentic_sample("", domain, s)
            };
            out.push((sample.image, domain));
        }
    }
    out
}

/// Writes images, masks, a source manifest and the fixture responses keyed
/// by image file name. Returns the manifest path.
pub fn write_corpus(dir: &Path, splits: &[(&str, &[ToySample])]) -> std::io::Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::new();
    let mut fixtures = BTreeMap::new();
    for (source, samples) in splits {
        for s in *samples {
            let image_rel = format!("images/{}.png", s.name);
            std::fs::write(dir.join(&image_rel), encode_png_rgb(&s.image))?;
            let mask_rel = match &s.mask {
                Some(m) => {
                    let rel = format!("masks/{}.png", s.name);
                    std::fs::write(dir.join(&rel), encode_mask_png(m))?;
                    Some(rel)
                }
                None => None,
            };
            fixtures.insert(format!("{}.png", s.name), s.description.to_text());
            entries.push(serde_json::json!({
                "image_path": image_rel,
                "mask_path": mask_rel,
                "domain": s.domain,
                "authentic": s.authentic(),
                "source_name": source,
                "provenance": "synthetic copy-move",
            }));
        }
    }
    let manifest = dir.join("manifest.json");
    std::fs::write(&manifest, serde_json::to_vec_pretty(&serde_json::json!({ "entries": entries }))?)?;
    std::fs::write(dir.join("fixtures.json"), serde_json::to_vec_pretty(&fixtures)?)?;
    Ok(manifest)
}

/// Epoch counts for [`train_pipeline`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyBudget {
    pub dtg_epochs: usize,
    pub detector_epochs: usize,
    pub locator_epochs: usize,
}

/// Trains all three models on `samples` with the given configs, overriding
/// only the epoch counts. The locator reads the reference descriptions.
pub fn train_pipeline<F: Scalar>(
    samples: &[ToySample],
    budget: ToyBudget,
    dtg: DtgConfig,
    mut dtg_train: DtgTrainConfig,
    mut detector: DetectorConfig,
    mut locator: LocatorConfig,
) -> Result<Pipeline<F>, PipelineError> {
    let mut dtg_model = DtgModel::<F>::new(dtg);
    dtg_train.epochs = budget.dtg_epochs;
    let domain: Vec<DomainSample> = samples.iter().map(|s| DomainSample { image: s.image.clone(), domain: s.domain }).collect();
    train_dtg(&mut dtg_model, &domain, &dtg_train)?;

    detector.train.epochs = budget.detector_epochs;
    let mut det = Detector::<F>::new(detector);
    let det_samples: Vec<DetectionSample> =
        samples.iter().map(|s| DetectionSample { image: s.image.clone(), domain: s.domain, description: s.description.to_text() }).collect();
    train_detector(&mut det, &det_samples, None)?;

    locator.train.epochs = budget.locator_epochs;
    let mut loc = Locator::<F>::new(locator);
    let loc_samples: Vec<LocatorSample> = samples
        .iter()
        .map(|s| LocatorSample {
            image: s.image.clone(),
            domain: s.domain,
            mask: s.mask.clone(),
            authentic: s.authentic(),
            description: s.description.to_text(),
            reference: s.description.to_text(),
        })
        .collect();
    train_locator(&mut loc, &loc_samples)?;
    Ok(Pipeline::new(dtg_model, det, loc))
}
