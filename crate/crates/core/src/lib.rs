pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod description;
pub mod detector;
pub mod domain;
pub mod dtg;
pub mod eval;
pub mod generate;
pub mod imaging;
pub mod locator;
pub mod pipeline;
pub mod loss;
pub mod nn;
pub mod prompt;
pub mod scalar;
pub mod tokenizer;
pub mod toy;
pub mod vision;

pub use scalar::Scalar;

/// Single-precision instantiations of the generic models.
pub type Detector = detector::Detector<f32>;
pub type Locator = locator::Locator<f32>;
pub type DtgModel = dtg::DtgModel<f32>;
pub type Pipeline = pipeline::Pipeline<f32>;
