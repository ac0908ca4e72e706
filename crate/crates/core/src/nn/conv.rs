use rand::Rng;

use super::dense::fan_in_uniform;
use super::tensor::{matmul, Param, Parameters, Real, Tensor};
use crate::error::{Error, Result};

/// Output edge of a valid cross-correlation.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || kernel > input {
        return None;
    }
    Some((input - kernel) / stride + 1)
}

/// 2-D convolution (valid cross-correlation, square kernel), computed as
/// im2col followed by a matrix product per sample.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    in_shape: [usize; 4],
    out_hw: (usize, usize),
    cols: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = fan_in_uniform(rng, out_channels * fan_in, fan_in);
        let b = fan_in_uniform(rng, out_channels, fan_in);
        Self::from_values(name, in_channels, out_channels, kernel, stride, w, b)
            .expect("sizes match by construction")
    }

    pub fn from_values(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        weight: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        let shape = vec![out_channels, in_channels, kernel, kernel];
        if weight.len() != shape.iter().product::<usize>() || bias.len() != out_channels {
            return Err(Error::Shape {
                op: "conv init",
                left: shape,
                right: vec![weight.len(), bias.len()],
            });
        }
        if stride == 0 {
            return Err(Error::config(name, "stride must be >= 1"));
        }
        Ok(Self {
            weight: Param::new(format!("{name}.weight"), shape, weight, true),
            bias: Param::new(format!("{name}.bias"), vec![out_channels], bias, true),
            in_channels,
            out_channels,
            kernel,
            stride,
            cache: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Spatial output size for an `h x w` input.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (
            conv_out_size(h, self.kernel, self.stride),
            conv_out_size(w, self.kernel, self.stride),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::Shape {
                op: "conv_forward",
                left: vec![h, w],
                right: vec![self.kernel, self.kernel],
            }),
        }
    }

    fn k_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<[usize; 4]> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::Shape {
                op: "conv_forward",
                left: s.to_vec(),
                right: self.weight.shape.clone(),
            });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    fn im2col(&self, sample: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.in_channels {
            let plane = &sample[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let src = &plane[(oy * self.stride + ky) * w + kx..];
                        for ox in 0..ow {
                            dst[oy * ow + ox] = src[ox * self.stride];
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let base = (oy * self.stride + ky) * w + kx;
                        for ox in 0..ow {
                            plane[base + ox * self.stride] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor<T>, keep_cols: bool) -> Result<(Tensor<T>, Option<ConvCache<T>>)> {
        let [b, _, h, w] = self.check_input(x)?;
        let (oh, ow) = self.out_hw(h, w)?;
        let p = oh * ow;
        let kl = self.k_len();
        let sample_len = self.in_channels * h * w;
        let mut out = vec![T::zero(); b * self.out_channels * p];
        let mut all_cols = if keep_cols {
            vec![T::zero(); b * kl * p]
        } else {
            Vec::new()
        };
        let mut scratch = if keep_cols {
            Vec::new()
        } else {
            vec![T::zero(); kl * p]
        };
        for s in 0..b {
            let cols: &mut [T] = if keep_cols {
                &mut all_cols[s * kl * p..(s + 1) * kl * p]
            } else {
                &mut scratch
            };
            self.im2col(&x.data()[s * sample_len..(s + 1) * sample_len], h, w, oh, ow, cols);
            let o = &mut out[s * self.out_channels * p..(s + 1) * self.out_channels * p];
            for (co, chunk) in o.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.value[co]);
            }
            matmul(
                self.out_channels,
                kl,
                p,
                T::one(),
                &self.weight.value,
                false,
                cols,
                false,
                T::one(),
                o,
            );
        }
        let y = Tensor::new(vec![b, self.out_channels, oh, ow], out)?;
        let cache = keep_cols.then(|| ConvCache {
            in_shape: [b, self.in_channels, h, w],
            out_hw: (oh, ow),
            cols: all_cols,
        });
        Ok((y, cache))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, false).map(|(y, _)| y)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = self.run(x, true)?;
        self.cache = cache;
        Ok(y)
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `input_grad` is set.
    pub fn backward(&mut self, dy: &Tensor<T>, input_grad: bool) -> Result<Option<Tensor<T>>> {
        let cache = self.cache.as_ref().ok_or_else(|| {
            Error::Usage(format!("{}: backward before forward", self.weight.name))
        })?;
        let [b, c, h, w] = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let p = oh * ow;
        let kl = self.k_len();
        if dy.shape() != [b, self.out_channels, oh, ow] {
            return Err(Error::Shape {
                op: "conv_backward",
                left: dy.shape().to_vec(),
                right: vec![b, self.out_channels, oh, ow],
            });
        }
        let mut dx = input_grad.then(|| vec![T::zero(); b * c * h * w]);
        let mut dcols = vec![T::zero(); kl * p];
        for s in 0..b {
            let d = &dy.data()[s * self.out_channels * p..(s + 1) * self.out_channels * p];
            let cols = &cache.cols[s * kl * p..(s + 1) * kl * p];
            matmul(
                self.out_channels,
                p,
                kl,
                T::one(),
                d,
                false,
                cols,
                true,
                T::one(),
                &mut self.weight.grad,
            );
            for (co, chunk) in d.chunks(p).enumerate() {
                let mut acc = T::zero();
                for &v in chunk {
                    acc += v;
                }
                self.bias.grad[co] += acc;
            }
            if let Some(dx) = dx.as_mut() {
                matmul(
                    kl,
                    self.out_channels,
                    p,
                    T::one(),
                    &self.weight.value,
                    true,
                    d,
                    false,
                    T::zero(),
                    &mut dcols,
                );
                self.col2im(&dcols, h, w, oh, ow, &mut dx[s * c * h * w..(s + 1) * c * h * w]);
            }
        }
        dx.map(|d| Tensor::new(vec![b, c, h, w], d)).transpose()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Real> Parameters<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
