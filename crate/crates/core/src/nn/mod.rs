//! Layers, parameter storage and optimization on top of [`crate::autograd`].

pub mod layers;
pub mod optim;
pub mod params;
pub mod transformer;

pub use layers::{AdapterConfig, Conv2d, Init, LayerNorm, Linear, LoraAdapter, Mlp};
pub use optim::{Adam, GradAccumulator, LrSchedule};
pub use params::{Graph, LoadError, ParamEntry, ParamId, ParamRole, ParamStore, TensorData};
pub use transformer::{KvCache, LanguageModel, LmConfig, LmOutput};
