use rand::Rng;

use crate::env::Action;
use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, Dense, Param, Parameters, Real, Tensor};

/// Plain ReLU MLP from the feature vector to the action values.
#[derive(Debug, Clone)]
pub struct BaselineHead<T> {
    pub layers: Vec<Dense<T>>,
    hidden_out: Vec<Tensor<T>>,
}

impl<T: Real> BaselineHead<T> {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if hidden.contains(&0) {
            return Err(Error::config("model.baseline_hidden", "widths must be positive"));
        }
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = feature_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Dense::new(&format!("hidden{i}"), width, h, rng));
            width = h;
        }
        layers.push(Dense::new("q_out", width, Action::COUNT, rng));
        Ok(Self {
            layers,
            hidden_out: Vec::new(),
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn run(&mut self, feature: &Tensor<T>, record: bool) -> Result<Tensor<T>> {
        self.hidden_out.clear();
        let last = self.layers.len() - 1;
        let mut cur = feature.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let mut y = if record { layer.forward(&cur)? } else { layer.infer(&cur)? };
            if i < last {
                relu_inplace(y.data_mut());
                if record {
                    self.hidden_out.push(y.clone());
                }
            }
            cur = y;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, dq: &Tensor<T>) -> Result<Tensor<T>> {
        let last = self.layers.len() - 1;
        if self.hidden_out.len() != last {
            return Err(Error::Usage("baseline head: backward before forward".into()));
        }
        let mut grad = self.layers[last].backward(dq)?;
        for i in (0..last).rev() {
            relu_backward(self.hidden_out[i].data(), grad.data_mut());
            grad = self.layers[i].backward(&grad)?;
        }
        self.hidden_out.clear();
        Ok(grad)
    }

    pub fn clear_cache(&mut self) {
        self.hidden_out.clear();
        self.layers.iter_mut().for_each(Dense::clear_cache);
    }
}

impl<T: Real> Parameters<T> for BaselineHead<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}
