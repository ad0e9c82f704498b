//! Adam with L2 weight decay, and the warm-up + cosine learning-rate schedule.

use std::collections::HashMap;
use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::nn::Param;
use crate::tape::{c, Gradients, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

pub struct Adam<F: Real> {
    pub cfg: AdamConfig,
    step: u64,
    moments: HashMap<String, (Array2<F>, Array2<F>)>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, moments: HashMap::new() }
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param<F>>, grads: &Gradients<F>, lr: f64) {
        self.step_scaled(params, grads, lr, |_| 1.0)
    }

    /// As [`Adam::step`], with a per-parameter learning-rate multiplier.
    pub fn step_scaled<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param<F>>,
        grads: &Gradients<F>,
        lr: f64,
        lr_mult: impl Fn(&Param<F>) -> f64,
    ) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let inv_bc2 = c::<F>(1.0 / bc2);
        let (b1f, b2f) = (c::<F>(b1), c::<F>(b2));
        let (one_m_b1, one_m_b2) = (c::<F>(1.0 - b1), c::<F>(1.0 - b2));
        let eps = c::<F>(self.cfg.eps);
        let wd = c::<F>(self.cfg.weight_decay);
        for p in params {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.param(p) else { continue };
            let step_size = c::<F>(lr * lr_mult(p) / bc1);
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Array2::zeros(p.value.dim()), Array2::zeros(p.value.dim())));
            ndarray::Zip::from(&mut p.value).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                let g = g + wd * *w;
                *m = b1f * *m + one_m_b1 * g;
                *v = b2f * *v + one_m_b2 * g * g;
                *w = *w - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            });
        }
    }
}

/// Linear warm-up from 0 to `peak`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, warmup_steps: usize, total_steps: usize, peak: f64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Contrastive weight ramp: 0 at step 0, 1.0 from `ramp_steps` on.
pub fn lambda_ramp(step: usize, ramp_steps: usize) -> f64 {
    if ramp_steps == 0 {
        1.0
    } else {
        (step as f64 / ramp_steps as f64).min(1.0)
    }
}
