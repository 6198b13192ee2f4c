use serde::{Deserialize, Serialize};

use super::Module;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the module's visit order.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients and clears them.
    pub fn step(&mut self, model: &mut dyn Module) {
        self.step += 1;
        let t = self.step as f64;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let step_size = (c.learning_rate / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.epsilon as f32);
        let mut idx = 0;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            if m_all.len() <= idx {
                m_all.push(vec![0.0; p.len()]);
                v_all.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut m_all[idx], &mut v_all[idx]);
            assert_eq!(m.len(), p.len(), "parameter {} changed size", p.name);
            for (((w, g), m), v) in p.value.iter_mut().zip(&mut p.grad).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * *g;
                *v = b2 * *v + (1.0 - b2) * *g * *g;
                *w -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
                *g = 0.0;
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, ParamInit};
    use rand::SeedableRng;

    struct Quad(Param);

    impl Module for Quad {
        fn visit(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut q = Quad(Param::new("w", &[2], ParamInit::Ones, &mut rng));
        q.0.grad = vec![3.0, -0.5];
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        });
        opt.step(&mut q);
        // Bias-corrected first step is lr·sign(g).
        assert!((q.0.value[0] - 0.9).abs() < 1e-6);
        assert!((q.0.value[1] - 1.1).abs() < 1e-6);
        assert_eq!(q.0.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut q = Quad(Param::new("w", &[1], ParamInit::Zeros, &mut rng));
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..Default::default()
        });
        for _ in 0..2000 {
            q.0.grad[0] = 2.0 * (q.0.value[0] - 3.0);
            opt.step(&mut q);
        }
        assert!((q.0.value[0] - 3.0).abs() < 1e-2);
    }
}
