use rand::Rng;

use super::ConvSpec;
use crate::error::{Error, Result};
use crate::nn::{conv_out_size, relu_backward, relu_inplace, Conv2d, Param, Parameters, Real, Tensor};

/// Convolution stack with ReLU after every layer. The flattened output is the
/// feature vector. With no layers the flattened input passes straight through.
#[derive(Debug, Clone)]
pub struct Backbone<T> {
    convs: Vec<Conv2d<T>>,
    in_shape: [usize; 3],
    feature_dim: usize,
    outputs: Vec<Tensor<T>>,
}

/// Feature width produced by `specs` on a `channels x side x side` input.
pub fn feature_dim(channels: usize, side: usize, specs: &[ConvSpec]) -> Result<usize> {
    let (mut c, mut s) = (channels, side);
    for (i, spec) in specs.iter().enumerate() {
        s = conv_out_size(s, spec.kernel, spec.stride).ok_or_else(|| {
            Error::config(
                "model.convs",
                format!("layer {i} (kernel {}, stride {}) does not fit a {s}x{s} input", spec.kernel, spec.stride),
            )
        })?;
        c = spec.channels;
    }
    Ok(c * s * s)
}

impl<T: Real> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, side: usize, specs: &[ConvSpec], rng: &mut R) -> Result<Self> {
        let feature_dim = feature_dim(channels, side, specs)?;
        let mut convs = Vec::with_capacity(specs.len());
        let mut c = channels;
        for (i, spec) in specs.iter().enumerate() {
            if spec.channels == 0 {
                return Err(Error::config("model.convs", "channel count must be positive"));
            }
            convs.push(Conv2d::new(&format!("conv{i}"), c, spec.channels, spec.kernel, spec.stride, rng));
            c = spec.channels;
        }
        Ok(Self {
            convs,
            in_shape: [channels, side, side],
            feature_dim,
            outputs: Vec::new(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn in_shape(&self) -> [usize; 3] {
        self.in_shape
    }

    /// `x` is `B x C x S x S`; returns `B x feature_dim`.
    pub fn run(&mut self, x: &Tensor<T>, record: bool) -> Result<Tensor<T>> {
        let [c, h, w] = self.in_shape;
        if x.shape().len() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::Shape {
                op: "backbone",
                left: x.shape().to_vec(),
                right: vec![c, h, w],
            });
        }
        let b = x.batch();
        self.outputs.clear();
        let mut cur = x.clone();
        for conv in &mut self.convs {
            let mut y = if record { conv.forward(&cur)? } else { conv.infer(&cur)? };
            relu_inplace(y.data_mut());
            if record {
                self.outputs.push(y.clone());
            }
            cur = y;
        }
        cur.reshape(vec![b, self.feature_dim])
    }

    pub fn backward(&mut self, dfeat: &Tensor<T>) -> Result<()> {
        if self.convs.is_empty() {
            return Ok(());
        }
        if self.outputs.len() != self.convs.len() {
            return Err(Error::Usage("backbone: backward before forward".into()));
        }
        let mut grad = dfeat.clone().reshape(self.outputs.last().expect("non-empty").shape().to_vec())?;
        for i in (0..self.convs.len()).rev() {
            relu_backward(self.outputs[i].data(), grad.data_mut());
            match self.convs[i].backward(&grad, i > 0)? {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.outputs.clear();
        self.convs.iter_mut().for_each(Conv2d::clear_cache);
    }
}

impl<T: Real> Parameters<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for c in &self.convs {
            c.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for c in &mut self.convs {
            c.visit_mut(f);
        }
    }
}
