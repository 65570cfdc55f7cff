//! Adam with bias correction, operating over the canonical parameter groups.

use crate::model::{ModelConfig, ParamSet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            m: ParamSet::zeros(cfg),
            v: ParamSet::zeros(cfg),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. The moment estimates always advance; the parameter write
    /// is skipped entirely at `lr == 0` so a zero-rate step leaves ψ
    /// bit-identical.
    pub fn step(&mut self, params: &mut ParamSet, grad: &ParamSet, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut pg = params.groups_mut();
        let gg = grad.groups();
        let mut mg = self.m.groups_mut();
        let mut vg = self.v.groups_mut();
        for i in 0..pg.len() {
            let (_, p) = &mut pg[i];
            let (_, g) = &gg[i];
            let (_, m) = &mut mg[i];
            let (_, v) = &mut vg[i];
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    if lr != 0.0 {
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + ADAM_EPSILON);
                    }
                });
        }
    }
}
