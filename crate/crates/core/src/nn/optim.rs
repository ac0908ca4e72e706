use super::tensor::{Parameters, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-7,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers follow the visit order
/// of the trainable parameters and are allocated on the first step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter. Non-finite gradients
    /// abort the step before anything is modified.
    pub fn step(&mut self, model: &mut dyn Parameters<T>) -> Result<()> {
        let mut bad = None;
        let mut sizes = Vec::new();
        model.visit(&mut |p| {
            if p.trainable {
                sizes.push(p.len());
                if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
                    bad = Some(p.name.clone());
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
        if self.first.is_empty() {
            self.first = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
            self.second = self.first.clone();
        } else {
            let have: Vec<usize> = self.first.iter().map(Vec::len).collect();
            if have != sizes {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    left: have,
                    right: sizes,
                });
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.learning_rate / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.epsilon);

        let mut i = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            let m = &mut first[i];
            let v = &mut second[i];
            i += 1;
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + ob1 * g;
                v[j] = b2 * v[j] + ob2 * g * g;
                p.value[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        });
        Ok(())
    }
}
