use super::train::{apply_gradients, Gradients, SegmentationModel};
use crate::error::Result;

/// Adam state over the flat parameter layout of a model.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(model: &SegmentationModel, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Gradients::zeros(model),
            v: Gradients::zeros(model),
        }
    }

    /// Applies one update and re-projects the classifier rows.
    pub fn step(&mut self, model: &mut SegmentationModel, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step);
        let bc2 = 1.0 - b2.powi(self.step);
        let mut direction = Gradients::zeros(model);
        let parts = [
            (&grads.extractor, &mut self.m.extractor, &mut self.v.extractor, &mut direction.extractor),
            (&grads.head, &mut self.m.head, &mut self.v.head, &mut direction.head),
        ];
        for (g, m, v, d) in parts {
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                d[i] = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        apply_gradients(model, &direction, self.lr)
    }
}
