//! Post-processing degradations for robustness rows.

use std::fmt;

use image::codecs::jpeg::JpegEncoder;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    /// Re-encode at `param` quality.
    Jpeg,
    /// Additive normal noise of variance `param`, in squared 8-bit units.
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub param: f64,
}

impl DegradationSpec {
    pub const fn jpeg(quality: u8) -> Self {
        Self { kind: DegradationKind::Jpeg, param: quality as f64 }
    }

    pub const fn gaussian(variance: f64) -> Self {
        Self { kind: DegradationKind::Gaussian, param: variance }
    }

    /// The shipped robustness suite: JPEG 70 and 80, Gaussian 5 and 10.
    pub const SUITE: [DegradationSpec; 4] =
        [DegradationSpec::jpeg(70), DegradationSpec::jpeg(80), DegradationSpec::gaussian(5.0), DegradationSpec::gaussian(10.0)];

    pub fn validate(&self) -> Result<(), EvalError> {
        let ok = match self.kind {
            DegradationKind::Jpeg => self.param.fract() == 0.0 && (1.0..=100.0).contains(&self.param),
            DegradationKind::Gaussian => self.param.is_finite() && self.param >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(EvalError::Degradation(*self))
        }
    }

    /// Directory-safe name, e.g. `jpeg-70`.
    pub fn slug(&self) -> String {
        match self.kind {
            DegradationKind::Jpeg => format!("jpeg-{}", self.param),
            DegradationKind::Gaussian => format!("gaussian-{}", self.param),
        }
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DegradationKind::Jpeg => write!(f, "JPEG {}", self.param),
            DegradationKind::Gaussian => write!(f, "Gaussian {}", self.param),
        }
    }
}

pub fn jpeg_bytes(image: &RgbImage, quality: u8) -> Result<Vec<u8>, EvalError> {
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, quality).encode_image(image).map_err(|e| EvalError::Image(e.to_string()))?;
    Ok(out)
}

/// Deterministic for a fixed `seed`. JPEG ignores the seed.
pub fn degrade_image(image: &RgbImage, spec: DegradationSpec, seed: u64) -> Result<RgbImage, EvalError> {
    spec.validate()?;
    match spec.kind {
        DegradationKind::Jpeg => {
            let bytes = jpeg_bytes(image, spec.param as u8)?;
            Ok(image::load_from_memory(&bytes).map_err(|e| EvalError::Image(e.to_string()))?.to_rgb8())
        }
        DegradationKind::Gaussian => {
            if spec.param == 0.0 {
                return Ok(image.clone());
            }
            let normal = Normal::new(0.0, spec.param.sqrt()).expect("finite positive deviation");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = image.clone();
            for v in out.iter_mut() {
                *v = (f64::from(*v) + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
            }
            Ok(out)
        }
    }
}
