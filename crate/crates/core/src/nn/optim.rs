use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use super::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Sums gradients over a mini-batch.
#[derive(Default)]
pub struct GradAccumulator<F> {
    sums: BTreeMap<ParamId, Array2<F>>,
    count: usize,
}

impl<F: Scalar> GradAccumulator<F> {
    pub fn new() -> Self {
        Self { sums: BTreeMap::new(), count: 0 }
    }

    pub fn add(&mut self, grads: Vec<(ParamId, Array2<F>)>) {
        for (id, g) in grads {
            match self.sums.get_mut(&id) {
                Some(sum) => *sum += &g,
                None => {
                    self.sums.insert(id, g);
                }
            }
        }
        self.count += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Mean gradients, leaving the accumulator empty.
    pub fn drain_mean(&mut self) -> Vec<(ParamId, Array2<F>)> {
        let scale = F::one() / F::of_usize(self.count.max(1));
        self.count = 0;
        std::mem::take(&mut self.sums).into_iter().map(|(id, g)| (id, g * scale)).collect()
    }
}

/// Learning-rate schedule over epochs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate at epoch 0 towards zero at the end.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam<F> {
    pub lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    clip: Option<F>,
    step: i32,
    moments: BTreeMap<ParamId, (Array2<F>, Array2<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: F) -> Self {
        Self {
            lr,
            beta1: F::of(0.9),
            beta2: F::of(0.999),
            eps: F::of(1e-8),
            clip: None,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_clip(mut self, max_norm: Option<F>) -> Self {
        self.clip = max_norm;
        self
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, mut grads: Vec<(ParamId, Array2<F>)>) {
        if let Some(max_norm) = self.clip {
            let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|&v| v * v).sum::<F>().sqrt();
            if norm > max_norm {
                let scale = max_norm / norm;
                for (_, g) in grads.iter_mut() {
                    g.mapv_inplace(|v| v * scale);
                }
            }
        }
        self.step += 1;
        let bias1 = F::one() - self.beta1.powi(self.step);
        let bias2 = F::one() - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (id, g) in grads {
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            let param = store.get_mut(id);
            Zip::from(param).and(m).and(v).and(&g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}
