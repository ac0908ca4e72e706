use rand::Rng;

use super::tensor::{matmul, Param, Parameters, Real, Tensor};
use crate::error::{Error, Result};

/// Samples `n` values from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect()
}

/// Fully connected layer, `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_dim: usize,
    out_dim: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let w = fan_in_uniform(rng, in_dim * out_dim, in_dim);
        let b = fan_in_uniform(rng, out_dim, in_dim);
        Self::from_values(name, in_dim, out_dim, w, b).expect("sizes match by construction")
    }

    pub fn from_values(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape {
                op: "dense init",
                left: vec![in_dim, out_dim],
                right: vec![weight.len(), bias.len()],
            });
        }
        Ok(Self {
            weight: Param::new(format!("{name}.weight"), vec![in_dim, out_dim], weight, true),
            bias: Param::new(format!("{name}.bias"), vec![out_dim], bias, true),
            in_dim,
            out_dim,
            input: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Pure forward pass.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_dim {
            return Err(Error::Shape {
                op: "dense_forward",
                left: x.shape().to_vec(),
                right: self.weight.shape.clone(),
            });
        }
        let b = x.batch();
        let mut y = Vec::with_capacity(b * self.out_dim);
        for _ in 0..b {
            y.extend_from_slice(&self.bias.value);
        }
        matmul(
            b,
            self.in_dim,
            self.out_dim,
            T::one(),
            x.data(),
            false,
            &self.weight.value,
            false,
            T::one(),
            &mut y,
        );
        Tensor::new(vec![b, self.out_dim], y)
    }

    /// Forward pass that records its input for [`Dense::backward`].
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("{}: backward before forward", self.weight.name)))?;
        let b = x.batch();
        if dy.shape() != [b, self.out_dim] {
            return Err(Error::Shape {
                op: "dense_backward",
                left: dy.shape().to_vec(),
                right: vec![b, self.out_dim],
            });
        }
        // dW += x^T dy
        matmul(
            self.in_dim,
            b,
            self.out_dim,
            T::one(),
            x.data(),
            true,
            dy.data(),
            false,
            T::one(),
            &mut self.weight.grad,
        );
        for r in 0..b {
            for (g, &d) in self.bias.grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        // dx = dy W^T
        let mut dx = vec![T::zero(); b * self.in_dim];
        matmul(
            b,
            self.out_dim,
            self.in_dim,
            T::one(),
            dy.data(),
            false,
            &self.weight.value,
            true,
            T::zero(),
            &mut dx,
        );
        Tensor::new(vec![b, self.in_dim], dx)
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

impl<T: Real> Parameters<T> for Dense<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let d = Dense::<f32>::from_values("d", 2, 2, eye, vec![0.0; 2]).unwrap();
        let x = Tensor::new(vec![2, 2], vec![1.5, -2.0, 3.0, 0.25]).unwrap();
        assert_eq!(d.infer(&x).unwrap(), x);
    }

    #[test]
    fn hand_arithmetic() {
        // [1,2] . [[3],[-1]] + 0.5 = 1.5
        let d = Dense::<f64>::from_values("d", 2, 1, vec![3.0, -1.0], vec![0.5]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(d.infer(&x).unwrap().data(), &[1.5]);
    }

    #[test]
    fn empty_batch() {
        let d = Dense::<f32>::from_values("d", 2, 3, vec![0.0; 6], vec![0.0; 3]).unwrap();
        let y = d.infer(&Tensor::zeros(vec![0, 2])).unwrap();
        assert_eq!(y.shape(), &[0, 3]);
    }

    #[test]
    fn shape_error_reports_both_shapes() {
        let d = Dense::<f32>::from_values("d", 2, 3, vec![0.0; 6], vec![0.0; 3]).unwrap();
        match d.infer(&Tensor::zeros(vec![1, 4])) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![1, 4]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn backward_requires_forward() {
        let mut d = Dense::<f32>::from_values("d", 2, 1, vec![1.0, 1.0], vec![0.0]).unwrap();
        assert!(matches!(
            d.backward(&Tensor::zeros(vec![1, 1])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn gradients_match_hand_derivation() {
        let mut d = Dense::<f64>::from_values("d", 2, 1, vec![3.0, -1.0], vec![0.5]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        d.forward(&x).unwrap();
        let dx = d.backward(&Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        assert_eq!(d.weight.grad, vec![2.0, 4.0]);
        assert_eq!(d.bias.grad, vec![2.0]);
        assert_eq!(dx.data(), &[6.0, -2.0]);
    }
}
