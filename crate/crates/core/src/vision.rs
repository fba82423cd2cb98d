//! Patch image encoder and the projector into a language model's width.

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::imaging::image_patches;
use crate::nn::{Graph, Init, Mlp, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionConfig {
    pub image_size: u32,
    pub patch: u32,
    pub hidden: usize,
    /// Width of one patch feature.
    pub width: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self { image_size: 128, patch: 32, hidden: 128, width: 64 }
    }
}

impl VisionConfig {
    pub fn tokens(&self) -> usize {
        let grid = (self.image_size / self.patch) as usize;
        grid * grid
    }

    fn patch_len(&self) -> usize {
        (self.patch * self.patch * 3) as usize
    }
}

/// Frozen two-layer per-patch encoder.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub config: VisionConfig,
    mlp: Mlp,
}

impl VisionEncoder {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, config: VisionConfig) -> Self {
        let mlp = Mlp::new(store, &format!("{prefix}vision"), config.patch_len(), config.hidden, config.width, Init::FROZEN_BASE);
        Self { config, mlp }
    }

    /// `tokens x width` patch features. The encoder is frozen, so this is
    /// evaluated outside any training graph.
    pub fn features<F: Scalar>(&self, store: &ParamStore<F>, image: &RgbImage) -> Array2<F> {
        let patches = image_patches::<F>(image, self.config.image_size, self.config.patch);
        let mut g = Graph::inference(store);
        let x = g.constant(patches);
        let h = self.mlp.forward(&mut g, x);
        let h = g.tape.tanh(h);
        g.value(h).clone()
    }
}

/// Trainable MLP from patch features to language-model embeddings.
#[derive(Clone, Debug)]
pub struct Projector {
    mlp: Mlp,
    pub outputs: usize,
}

impl Projector {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, inputs: usize, outputs: usize, init: Init) -> Self {
        Self { mlp: Mlp::new(store, &format!("{prefix}projector"), inputs, outputs, outputs, init), outputs }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, features: Array2<F>) -> Var {
        let x = g.constant(features);
        self.mlp.forward(g, x)
    }
}
