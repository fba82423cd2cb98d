use serde::{Deserialize, Serialize};

use super::params::{Graph, ParamId, ParamRole, ParamStore};
use crate::autograd::{ConvGeometry, Var};
use crate::scalar::Scalar;

/// Low-rank adapter settings for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Layer-name patterns. A layer is adapted when its full dotted name
    /// equals a pattern or ends with `.pattern`.
    pub target_layers: Vec<String>,
}

impl AdapterConfig {
    pub fn disabled() -> Self {
        Self { rank: 0, alpha: 0.0, target_layers: Vec::new() }
    }

    pub fn targets(&self, layer: &str) -> bool {
        self.rank > 0
            && self.target_layers.iter().any(|pat| {
                layer == pat || (layer.len() > pat.len() && layer.ends_with(pat.as_str()) && layer.as_bytes()[layer.len() - pat.len() - 1] == b'.')
            })
    }

    pub fn scale(&self) -> f64 {
        if self.rank == 0 {
            0.0
        } else {
            self.alpha / self.rank as f64
        }
    }
}

/// How a layer's own weights are created.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub role: ParamRole,
    pub trainable: bool,
}

impl Init {
    pub const FROZEN_BASE: Init = Init { role: ParamRole::Base, trainable: false };
    pub const TRAINABLE_BASE: Init = Init { role: ParamRole::Base, trainable: true };
    pub const HEAD: Init = Init { role: ParamRole::Head, trainable: true };
}

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub scale: f64,
}

/// `y = x W + b`, plus `scale * (x A) B` when an adapter is attached and enabled.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<LoraAdapter>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, inputs: usize, outputs: usize, bias: bool, init: Init) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        let weight = store.normal(format!("{name}.weight"), (inputs, outputs), std, init.role, init.trainable);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), (1, outputs), init.role, init.trainable));
        Self { name: name.to_string(), weight, bias, adapter: None, inputs, outputs }
    }

    /// Attaches a low-rank adapter if `config` targets this layer. The up
    /// projection starts at zero so a fresh adapter is an exact no-op.
    pub fn adapt<F: Scalar>(mut self, store: &mut ParamStore<F>, config: &AdapterConfig) -> Self {
        if config.targets(&self.name) {
            let rank = config.rank;
            let down = store.normal(
                format!("{}.lora_down", self.name),
                (self.inputs, rank),
                (1.0 / self.inputs as f64).sqrt(),
                ParamRole::Adapter,
                true,
            );
            let up = store.zeros(format!("{}.lora_up", self.name), (rank, self.outputs), ParamRole::Adapter, true);
            self.adapter = Some(LoraAdapter { down, up, scale: config.scale() });
        }
        self
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let mut y = g.tape.matmul(x, w);
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.tape.add_row(y, b);
        }
        if g.adapters {
            if let Some(adapter) = &self.adapter {
                let down = g.param(adapter.down);
                let up = g.param(adapter.up);
                let low = g.tape.matmul(x, down);
                let delta = g.tape.matmul(low, up);
                let delta = g.tape.scale(delta, F::of(adapter.scale));
                y = g.tape.add(y, delta);
            }
        }
        y
    }
}

/// Square-kernel convolution on `(h * w) x c` feature maps, lowered to a
/// patch unfold followed by a [`Linear`] (so it adapts like one).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub proj: Linear,
}

impl Conv2d {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let proj = Linear::new(store, name, kernel * kernel * in_channels, out_channels, true, init);
        Self { kernel, stride, padding: kernel / 2, in_channels, out_channels, proj }
    }

    pub fn adapt<F: Scalar>(mut self, store: &mut ParamStore<F>, config: &AdapterConfig) -> Self {
        self.proj = self.proj.adapt(store, config);
        self
    }

    pub fn geometry(&self, height: usize, width: usize) -> ConvGeometry {
        ConvGeometry {
            height,
            width,
            channels: self.in_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Returns the output map and its spatial size.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, height: usize, width: usize) -> (Var, usize, usize) {
        let geometry = self.geometry(height, width);
        let cols = g.tape.im2col(x, geometry);
        let y = self.proj.forward(g, cols);
        (y, geometry.out_height(), geometry.out_width())
    }
}

/// Row standardization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, width: usize, init: Init) -> Self {
        let gain = store.filled(format!("{name}.gain"), (1, width), F::one(), init.role, init.trainable);
        let bias = store.zeros(format!("{name}.bias"), (1, width), init.role, init.trainable);
        Self { gain, bias }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let normed = g.tape.layer_norm(x, F::of(1e-5));
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.tape.mul_row(normed, gain);
        g.tape.add_row(y, bias)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, inputs: usize, hidden: usize, outputs: usize, init: Init) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), inputs, hidden, true, init),
            second: Linear::new(store, &format!("{name}.1"), hidden, outputs, true, init),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let h = self.first.forward(g, x);
        let h = g.tape.relu(h);
        self.second.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adapter_patterns_match_on_dotted_suffix() {
        let cfg = AdapterConfig { rank: 4, alpha: 8.0, target_layers: vec!["attn.q".into(), "head".into()] };
        assert!(cfg.targets("blocks.0.attn.q"));
        assert!(cfg.targets("head"));
        assert!(!cfg.targets("blocks.0.attn.qk"));
        assert!(!cfg.targets("lm_head"));
        assert_eq!(cfg.scale(), 2.0);
        let off = AdapterConfig { rank: 0, ..cfg };
        assert!(!off.targets("head"));
    }
}
