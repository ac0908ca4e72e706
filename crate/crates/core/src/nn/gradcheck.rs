//! Central finite-difference gradient checking in 64-bit precision.

use super::tensor::{zero_grads, Parameters};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|a - n| / max(|a| + |n|, floor)` over trainable entries.
    pub max_rel_error: f64,
    /// Parameter and entry where the largest error occurred.
    pub worst: (String, usize),
    pub checked: usize,
    /// Largest absolute gradient found on any fixed parameter.
    pub fixed_grad_max: f64,
}

const REL_FLOOR: f64 = 1e-7;

/// Compares analytic gradients against central differences of step `h`.
///
/// `loss(model, with_grad)` must return the scalar loss and, when `with_grad`
/// is set, accumulate its gradient into the model's parameters.
pub fn check_gradients<M: Parameters<f64>>(
    model: &mut M,
    h: f64,
    mut loss: impl FnMut(&mut M, bool) -> Result<f64>,
) -> Result<GradCheck> {
    zero_grads(model);
    loss(model, true)?;
    let mut analytic: Vec<(usize, String, Vec<f64>)> = Vec::new();
    let mut fixed_grad_max = 0.0f64;
    let mut index = 0;
    model.visit(&mut |p| {
        if p.trainable {
            analytic.push((index, p.name.clone(), p.grad.clone()));
        } else {
            fixed_grad_max = p.grad.iter().fold(fixed_grad_max, |m, g| m.max(g.abs()));
        }
        index += 1;
    });

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
        fixed_grad_max,
    };
    for (pi, name, grads) in &analytic {
        for (e, &a) in grads.iter().enumerate() {
            let original = nudge(model, *pi, e, None);
            nudge(model, *pi, e, Some(original + h));
            let plus = loss(model, false)?;
            nudge(model, *pi, e, Some(original - h));
            let minus = loss(model, false)?;
            nudge(model, *pi, e, Some(original));
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (name.clone(), e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reads entry `e` of the `pi`-th parameter, optionally overwriting it.
fn nudge<M: Parameters<f64>>(model: &mut M, pi: usize, e: usize, value: Option<f64>) -> f64 {
    let mut index = 0;
    let mut old = 0.0;
    model.visit_mut(&mut |p| {
        if index == pi {
            old = p.value[e];
            if let Some(v) = value {
                p.value[e] = v;
            }
        }
        index += 1;
    });
    old
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{relu_backward, relu_inplace, Conv2d, Dense, Param, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Net {
        conv: Conv2d<f64>,
        dense: Dense<f64>,
    }

    impl Parameters<f64> for Net {
        fn visit(&self, f: &mut dyn FnMut(&Param<f64>)) {
            self.conv.visit(f);
            self.dense.visit(f);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            self.conv.visit_mut(f);
            self.dense.visit_mut(f);
        }
    }

    #[test]
    fn conv_dense_stack_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Net {
            conv: Conv2d::new("c", 2, 3, 3, 2, &mut rng),
            dense: Dense::new("d", 3 * 3 * 3, 2, &mut rng),
        };
        let x: Vec<f64> = (0..2 * 2 * 7 * 7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![2, 2, 7, 7], x).unwrap();
        let r = check_gradients(&mut net, 1e-3, |n, grad| {
            let mut h = n.conv.forward(&x)?;
            relu_inplace(h.data_mut());
            let flat = h.clone().reshape(vec![2, 27])?;
            let y = n.dense.forward(&flat)?;
            let l: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 2.0;
            if grad {
                let mut d = n.dense.backward(&y)?.reshape(vec![2, 3, 3, 3])?;
                relu_backward(h.data(), d.data_mut());
                n.conv.backward(&d, false)?;
            }
            Ok(l)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert_eq!(r.checked, 3 * 2 * 9 + 3 + 27 * 2 + 2);
    }

    #[test]
    fn relu_linear_region_has_unit_gradient() {
        let mut d = Dense::<f64>::from_values("d", 1, 3, vec![1.0, 2.0, 3.0], vec![0.0; 3]).unwrap();
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        d.forward(&x).unwrap();
        let mut y = d.infer(&x).unwrap();
        relu_inplace(y.data_mut());
        let mut g = Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap();
        relu_backward(y.data(), g.data_mut());
        assert_eq!(g.data(), &[1.0, 1.0, 1.0]);
    }
}
