//! Adam optimiser and the OneCycle learning-rate schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::kernels::Param;

/// Cosine one-cycle schedule: warm up from `lr_max/div_factor` to `lr_max`
/// at step `round(pct_start·total_steps)`, then anneal to
/// `lr_max/div_factor/final_div_factor` at step `total_steps − 1`.
pub fn onecycle_lr(
    step: usize,
    total_steps: usize,
    lr_max: f64,
    pct_start: f64,
    div_factor: f64,
    final_div_factor: f64,
) -> f64 {
    let initial = lr_max / div_factor;
    let min = initial / final_div_factor;
    let last = total_steps.saturating_sub(1);
    let peak = ((pct_start * total_steps as f64).round() as usize).min(last);
    let step = step.min(last);
    let cos_anneal = |from: f64, to: f64, frac: f64| {
        to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    };
    if step <= peak {
        if peak == 0 {
            return lr_max;
        }
        cos_anneal(initial, lr_max, step as f64 / peak as f64)
    } else {
        cos_anneal(lr_max, min, (step - peak) as f64 / (last - peak) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients currently stored in `params`.
    /// The parameter list must be in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Param], lr: f64) {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| Array2::zeros(p.value.raw_dim()))
                .collect();
            self.v = self.m.clone();
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "parameter list changed between steps"
        );
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}
