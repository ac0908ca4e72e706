//! Fixed-pattern sparse maps used by the granule and Purkinje stages.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, top_k_indices, Param, Parameters, Real, Tensor};

/// Keeps the `k` largest entries of `h` (ties to the lower index) and zeroes
/// the rest.
pub fn topk_activate<T: Real>(h: &[T], k: usize) -> Result<Vec<T>> {
    if k > h.len() {
        return Err(Error::Usage(format!("top-k with k={k} over {} values", h.len())));
    }
    let mut out = vec![T::zero(); h.len()];
    for i in top_k_indices(h, k) {
        out[i] = h[i];
    }
    Ok(out)
}

/// Converts stored index values back to integers, rejecting anything that is
/// not an in-range whole number.
fn decode_indices<T: Real>(p: &Param<T>, bound: usize) -> Result<Vec<usize>> {
    p.value
        .iter()
        .map(|v| {
            let f = v.f64();
            if f.fract() == 0.0 && f >= 0.0 && (f as usize) < bound {
                Ok(f as usize)
            } else {
                Err(Error::Numeric(format!("{}: bad index {f}", p.name)))
            }
        })
        .collect()
}

fn ensure_distinct(rows: &[usize], width: usize, name: &str) -> Result<()> {
    for row in rows.chunks(width.max(1)) {
        let mut r = row.to_vec();
        r.sort_unstable();
        if r.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Numeric(format!("{name}: repeated index in a row")));
        }
    }
    Ok(())
}

/// Fixed random expansion from `in_dim` inputs to `out_dim` units; every unit
/// reads exactly `fan_in` distinct inputs. No bias and no trainable values.
#[derive(Debug, Clone)]
pub struct SparseProjection<T> {
    pub indices: Param<T>,
    pub values: Param<T>,
    in_dim: usize,
    out_dim: usize,
    fan_in: usize,
    idx: Vec<usize>,
}

impl<T: Real> SparseProjection<T> {
    pub fn sample<R: Rng + ?Sized>(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if fan_in == 0 || fan_in > in_dim {
            return Err(Error::config(
                "model.fan_in",
                format!("{fan_in} must lie in 1..={in_dim}"),
            ));
        }
        let mut idx = Vec::with_capacity(out_dim * fan_in);
        for _ in 0..out_dim {
            let mut row = sample(rng, in_dim, fan_in).into_vec();
            row.sort_unstable();
            idx.extend(row);
        }
        let values = fan_in_uniform(rng, out_dim * fan_in, fan_in);
        let index_values = idx.iter().map(|&i| T::of(i as f64)).collect();
        Ok(Self {
            indices: Param::new(format!("{name}.indices"), vec![out_dim, fan_in], index_values, false),
            values: Param::new(format!("{name}.values"), vec![out_dim, fan_in], values, false),
            in_dim,
            out_dim,
            fan_in,
            idx,
        })
    }

    /// Re-derives the integer index cache after the stored parameters changed.
    pub fn refresh(&mut self) -> Result<()> {
        let idx = decode_indices(&self.indices, self.in_dim)?;
        ensure_distinct(&idx, self.fan_in, &self.indices.name)?;
        self.idx = idx;
        Ok(())
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Input indices read by unit `j`.
    pub fn row(&self, j: usize) -> &[usize] {
        &self.idx[j * self.fan_in..(j + 1) * self.fan_in]
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.row_len() != self.in_dim {
            return Err(Error::Shape {
                op: "sparse_projection",
                left: x.shape().to_vec(),
                right: vec![self.out_dim, self.in_dim],
            });
        }
        let b = x.batch();
        let mut y = vec![T::zero(); b * self.out_dim];
        for (r, out) in y.chunks_mut(self.out_dim.max(1)).enumerate().take(b) {
            let xr = x.row(r);
            for (j, o) in out.iter_mut().enumerate() {
                let base = j * self.fan_in;
                let mut acc = T::zero();
                for t in base..base + self.fan_in {
                    acc += self.values.value[t] * xr[self.idx[t]];
                }
                *o = acc;
            }
        }
        Tensor::new(vec![b, self.out_dim], y)
    }

    /// Input gradient; the projection itself is fixed.
    pub fn backward_input(&self, dy: &Tensor<T>) -> Tensor<T> {
        let b = dy.batch();
        let mut dx = vec![T::zero(); b * self.in_dim];
        for r in 0..b {
            let dyr = dy.row(r);
            let dxr = &mut dx[r * self.in_dim..(r + 1) * self.in_dim];
            for (j, &g) in dyr.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let base = j * self.fan_in;
                for t in base..base + self.fan_in {
                    dxr[self.idx[t]] += self.values.value[t] * g;
                }
            }
        }
        Tensor::new(vec![b, self.in_dim], dx).expect("sized above")
    }
}

impl<T: Real> Parameters<T> for SparseProjection<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.indices);
        f(&self.values);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.indices);
        f(&mut self.values);
    }
}

/// Sparse trainable matrix from `in_dim` inputs to `out_dim` outputs. Each
/// output owns a fixed set of `per_row` inputs; only the values train.
#[derive(Debug, Clone)]
pub struct SparseLinear<T> {
    pub pattern: Param<T>,
    pub weight: Param<T>,
    in_dim: usize,
    out_dim: usize,
    per_row: usize,
    idx: Vec<usize>,
    input: Option<Tensor<T>>,
}

impl<T: Real> SparseLinear<T> {
    pub fn sample<R: Rng + ?Sized>(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        density: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(density > 0.0 && density <= 1.0) {
            return Err(Error::config("model.pc_density", "must lie in (0, 1]"));
        }
        let per_row = ((density * in_dim as f64).round() as usize).clamp(1, in_dim.max(1));
        let mut idx = Vec::with_capacity(out_dim * per_row);
        for _ in 0..out_dim {
            let mut row = sample(rng, in_dim, per_row).into_vec();
            row.sort_unstable();
            idx.extend(row);
        }
        let weight = fan_in_uniform(rng, out_dim * per_row, per_row);
        Self::from_parts(name, in_dim, out_dim, per_row, idx, weight)
    }

    pub fn from_parts(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        per_row: usize,
        idx: Vec<usize>,
        weight: Vec<T>,
    ) -> Result<Self> {
        if idx.len() != out_dim * per_row || weight.len() != idx.len() {
            return Err(Error::Shape {
                op: "sparse_linear init",
                left: vec![out_dim, per_row],
                right: vec![idx.len(), weight.len()],
            });
        }
        if idx.iter().any(|&i| i >= in_dim) {
            return Err(Error::Usage(format!("{name}: index out of range")));
        }
        ensure_distinct(&idx, per_row, name)?;
        let pattern = idx.iter().map(|&i| T::of(i as f64)).collect();
        Ok(Self {
            pattern: Param::new(format!("{name}.pattern"), vec![out_dim, per_row], pattern, false),
            weight: Param::new(format!("{name}.weight"), vec![out_dim, per_row], weight, true),
            in_dim,
            out_dim,
            per_row,
            idx,
            input: None,
        })
    }

    pub fn refresh(&mut self) -> Result<()> {
        let idx = decode_indices(&self.pattern, self.in_dim)?;
        ensure_distinct(&idx, self.per_row, &self.pattern.name)?;
        self.idx = idx;
        Ok(())
    }

    pub fn per_row(&self) -> usize {
        self.per_row
    }

    pub fn row(&self, o: usize) -> &[usize] {
        &self.idx[o * self.per_row..(o + 1) * self.per_row]
    }

    /// Equivalent dense `out_dim x in_dim` matrix, zeros off the pattern.
    pub fn to_dense(&self) -> Vec<T> {
        let mut m = vec![T::zero(); self.out_dim * self.in_dim];
        for (t, &i) in self.idx.iter().enumerate() {
            m[(t / self.per_row) * self.in_dim + i] = self.weight.value[t];
        }
        m
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.row_len() != self.in_dim {
            return Err(Error::Shape {
                op: "sparse_linear",
                left: x.shape().to_vec(),
                right: vec![self.out_dim, self.in_dim],
            });
        }
        let b = x.batch();
        let mut y = vec![T::zero(); b * self.out_dim];
        for r in 0..b {
            let xr = x.row(r);
            for o in 0..self.out_dim {
                let base = o * self.per_row;
                let mut acc = T::zero();
                for t in base..base + self.per_row {
                    acc += self.weight.value[t] * xr[self.idx[t]];
                }
                y[r * self.out_dim + o] = acc;
            }
        }
        Tensor::new(vec![b, self.out_dim], y)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("{}: backward before forward", self.weight.name)))?;
        let b = x.batch();
        if dy.shape() != [b, self.out_dim] {
            return Err(Error::Shape {
                op: "sparse_linear backward",
                left: dy.shape().to_vec(),
                right: vec![b, self.out_dim],
            });
        }
        let mut dx = vec![T::zero(); b * self.in_dim];
        for r in 0..b {
            let xr = x.row(r);
            let dxr = &mut dx[r * self.in_dim..(r + 1) * self.in_dim];
            for (o, &g) in dy.row(r).iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let base = o * self.per_row;
                for t in base..base + self.per_row {
                    let i = self.idx[t];
                    self.weight.grad[t] += g * xr[i];
                    dxr[i] += g * self.weight.value[t];
                }
            }
        }
        Tensor::new(vec![b, self.in_dim], dx)
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

impl<T: Real> Parameters<T> for SparseLinear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.pattern);
        f(&self.weight);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.pattern);
        f(&mut self.weight);
    }
}
