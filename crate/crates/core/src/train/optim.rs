use std::collections::BTreeMap;

use super::config::{OptimConfig, OptimizerKind};

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Optimizer state keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Number of updates applied so far.
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Starts a new update; call once per step before [`Self::apply`].
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates `param` in place from `grad` (already scaled by any
    /// clipping factor).
    pub fn apply(&mut self, cfg: &OptimConfig, name: &str, param: &mut [f32], grad: &[f32]) {
        let lr = cfg.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in param.iter_mut().zip(grad) {
                    *p -= (lr * g as f64) as f32;
                }
            }
            OptimizerKind::Adam => {
                let st = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| Moments {
                        m: vec![0.0; param.len()],
                        v: vec![0.0; param.len()],
                    });
                let (b1, b2) = (cfg.beta1, cfg.beta2);
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for ((p, &g), (m, v)) in param
                    .iter_mut()
                    .zip(grad)
                    .zip(st.m.iter_mut().zip(st.v.iter_mut()))
                {
                    let g = g as f64;
                    let mn = b1 * *m as f64 + (1.0 - b1) * g;
                    let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                    *m = mn as f32;
                    *v = vn as f32;
                    let step = lr * (mn / c1) / ((vn / c2).sqrt() + cfg.eps);
                    *p -= step as f32;
                }
            }
        }
    }
}

/// Factor that brings the global L2 norm of `grads` down to `max_norm`
/// (1 when already within it or when clipping is off).
pub fn clip_factor<'a>(grads: impl IntoIterator<Item = &'a [f32]>, max_norm: f64) -> (f64, f32) {
    let norm = grads
        .into_iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    let factor = if max_norm > 0.0 && norm > max_norm {
        (max_norm / norm) as f32
    } else {
        1.0
    };
    (norm, factor)
}
