//! Adaptive-moment optimizer and the plateau stopping rule.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam over a fixed, ordered list of parameter slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(hyper: AdamHyper, sizes: &[usize]) -> Self {
        Adam {
            hyper,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// One update of every slot. `params` and `grads` follow the slot order.
    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: &[Vec<f32>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer slot count");
        assert_eq!(grads.len(), self.m.len(), "gradient slot count");
        self.t += 1;
        let h = self.hyper;
        let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);
        let c1 = 1.0 - h.beta1.powi(self.t as i32);
        let c2 = 1.0 - h.beta2.powi(self.t as i32);
        // Bias corrections folded into the step size.
        let lr = (h.learning_rate * c2.sqrt() / c1) as f32;
        let eps = (h.epsilon * c2.sqrt()) as f32;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.len(), g.len(), "gradient length");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Stop after `patience` consecutive epochs without an improvement larger
/// than `min_delta` in the epoch-mean loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub best: f64,
    pub stale_epochs: u64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            best: f64::INFINITY,
            stale_epochs: 0,
        }
    }
}

impl EarlyStop {
    /// Record an epoch; true when training should stop.
    pub fn observe(&mut self, epoch_loss: f64, patience: u64, min_delta: f64) -> bool {
        if self.best - epoch_loss > min_delta {
            self.best = epoch_loss;
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
        self.stale_epochs >= patience
    }
}
