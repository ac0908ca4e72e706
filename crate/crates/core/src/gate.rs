//! Dendritic gain gate on the granule-to-Purkinje pathway.
//!
//! A batch of granule activity is pooled into one population vector, projected
//! onto fixed random branch directions, and the strongest branches are summed
//! into a per-unit dendritic signal. A slow moving average of that signal sets
//! a multiplicative gain on the granule activity. Nothing here is trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, top_k_indices, Param, Parameters, Real, Tensor};

const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub enabled: bool,
    pub num_branches: usize,
    /// Fraction of branches kept per call.
    pub select_fraction: f64,
    pub sigmoid_temp: f64,
    pub ema_decay: f64,
    pub gain_strength: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            num_branches: 32,
            select_fraction: 0.25,
            sigmoid_temp: 4.0,
            ema_decay: 0.99,
            gain_strength: 0.5,
        }
    }
}

impl GateConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// Number of active branches, `round(select_fraction * num_branches)`.
    pub fn selected(&self) -> usize {
        (self.select_fraction * self.num_branches as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_branches == 0 {
            return Err(Error::config("gate.num_branches", "must be at least 1"));
        }
        if !(self.select_fraction > 0.0 && self.select_fraction <= 1.0) {
            return Err(Error::config("gate.select_fraction", "must lie in (0, 1]"));
        }
        if self.selected() < 1 {
            return Err(Error::config(
                "gate.select_fraction",
                format!("selects no branch out of {}", self.num_branches),
            ));
        }
        if !(self.sigmoid_temp.is_finite() && self.sigmoid_temp > 0.0) {
            return Err(Error::config("gate.sigmoid_temp", "must be finite and positive"));
        }
        check_decay(self.ema_decay)?;
        if !(self.gain_strength.is_finite() && self.gain_strength >= 0.0) {
            return Err(Error::config("gate.gain_strength", "must be finite and non-negative"));
        }
        Ok(())
    }
}

fn check_decay(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::config("gate.ema_decay", format!("{tau} is outside (0, 1)")))
    }
}

/// Fixed branch directions plus the moving-average signal.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState<T> {
    /// `num_branches x dim`, unit rows, never trained.
    pub hyperplanes: Param<T>,
    pub ema: Vec<T>,
    pub initialized: bool,
    num_branches: usize,
    dim: usize,
}

impl<T: Real> GateState<T> {
    /// Samples standard-normal rows and scales each to unit length.
    pub fn sample(num_branches: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("gate.dim", "must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(num_branches * dim);
        for _ in 0..num_branches {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            values.extend(row.iter().map(|v| T::of(v / norm)));
        }
        Self::from_hyperplanes(num_branches, dim, values)
    }

    pub fn from_hyperplanes(num_branches: usize, dim: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != num_branches * dim {
            return Err(Error::Shape {
                op: "gate_hyperplanes",
                left: vec![num_branches, dim],
                right: vec![values.len()],
            });
        }
        for (m, row) in values.chunks(dim.max(1)).enumerate() {
            let norm = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Numeric(format!("hyperplane {m} has norm {norm}")));
            }
        }
        Ok(Self {
            hyperplanes: Param::new("gate.hyperplanes", vec![num_branches, dim], values, false),
            ema: vec![T::of(0.5); dim],
            initialized: false,
            num_branches,
            dim,
        })
    }

    pub fn num_branches(&self) -> usize {
        self.num_branches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hyperplane(&self, m: usize) -> &[T] {
        &self.hyperplanes.value[m * self.dim..(m + 1) * self.dim]
    }

    /// Forgets the moving average; the next update starts it afresh.
    pub fn reset(&mut self) {
        self.ema.iter_mut().for_each(|e| *e = T::of(0.5));
        self.initialized = false;
    }
}

/// Mean over the batch dimension of a `B x D` activity matrix.
pub fn population_mean<T: Real>(g: &Tensor<T>) -> Result<Vec<T>> {
    let b = g.batch();
    if g.shape().len() != 2 || b == 0 {
        return Err(Error::Usage(format!(
            "population mean needs a non-empty B x D batch, got {:?}",
            g.shape()
        )));
    }
    let d = g.row_len();
    let mut sum = vec![T::zero(); d];
    for r in 0..b {
        for (s, &v) in sum.iter_mut().zip(g.row(r)) {
            *s += v;
        }
    }
    let inv = T::one() / T::of(b as f64);
    sum.iter_mut().for_each(|s| *s *= inv);
    Ok(sum)
}

/// L2 normalization with a zero result for near-zero input.
pub fn normalize<T: Real>(v: &[T]) -> Vec<T> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm.f64() < NORM_FLOOR {
        return vec![T::zero(); v.len()];
    }
    v.iter().map(|&x| x / norm).collect()
}

pub fn branch_projections<T: Real>(g_tilde: &[T], state: &GateState<T>) -> Result<Vec<T>> {
    if g_tilde.len() != state.dim {
        return Err(Error::Shape {
            op: "branch_projections",
            left: vec![g_tilde.len()],
            right: vec![state.num_branches, state.dim],
        });
    }
    Ok((0..state.num_branches)
        .map(|m| {
            state
                .hyperplane(m)
                .iter()
                .zip(g_tilde)
                .map(|(&h, &g)| h * g)
                .sum()
        })
        .collect())
}

/// Sums the strongest branches, each weighted by its squashed projection, and
/// squashes the result per unit. Returns `(z, selected branch indices)`.
pub fn select_and_integrate<T: Real>(
    projections: &[T],
    config: &GateConfig,
    state: &GateState<T>,
) -> (Vec<T>, Vec<usize>) {
    let chosen = top_k_indices(projections, config.selected());
    let beta = T::of(config.sigmoid_temp);
    let mut d = vec![T::zero(); state.dim];
    for &m in &chosen {
        let w = sigmoid(beta * projections[m]);
        for (acc, &h) in d.iter_mut().zip(state.hyperplane(m)) {
            *acc += w * h;
        }
    }
    (d.into_iter().map(sigmoid).collect(), chosen)
}

pub fn ema_update<T: Real>(state: &mut GateState<T>, z: &[T], decay: f64) -> Result<()> {
    check_decay(decay)?;
    if z.len() != state.dim {
        return Err(Error::Shape {
            op: "ema_update",
            left: vec![z.len()],
            right: vec![state.dim],
        });
    }
    if !state.initialized {
        state.ema.copy_from_slice(z);
        state.initialized = true;
        return Ok(());
    }
    let (keep, take) = (T::of(decay), T::of(1.0 - decay));
    for (e, &zi) in state.ema.iter_mut().zip(z) {
        *e = keep * *e + take * zi;
    }
    Ok(())
}

/// Per-unit gain `1 + strength * (e - 0.5)`.
pub fn gain_vector<T: Real>(ema: &[T], strength: f64) -> Vec<T> {
    let (a, half) = (T::of(strength), T::of(0.5));
    ema.iter().map(|&e| T::one() + a * (e - half)).collect()
}

/// Scales every row of `g` by `gain`.
pub fn modulate<T: Real>(g: &Tensor<T>, gain: &[T]) -> Result<Tensor<T>> {
    if g.shape().len() != 2 || g.row_len() != gain.len() {
        return Err(Error::Shape {
            op: "modulate",
            left: g.shape().to_vec(),
            right: vec![gain.len()],
        });
    }
    let mut out = g.clone();
    let d = gain.len();
    if d > 0 {
        for row in out.data_mut().chunks_mut(d) {
            for (v, &s) in row.iter_mut().zip(gain) {
                *v *= s;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput<T> {
    pub modulated: Tensor<T>,
    pub gain: Vec<T>,
    pub global_gain: f64,
}

fn mean_gain<T: Real>(gain: &[T]) -> f64 {
    if gain.is_empty() {
        1.0
    } else {
        gain.iter().map(|g| g.f64()).sum::<f64>() / gain.len() as f64
    }
}

/// Full gate: pool, project, select, integrate, advance the moving average
/// once, then apply the resulting gain.
pub fn gate_apply<T: Real>(
    g: &Tensor<T>,
    config: &GateConfig,
    state: &mut GateState<T>,
) -> Result<GateOutput<T>> {
    if !config.enabled {
        return Ok(GateOutput {
            modulated: g.clone(),
            gain: vec![T::one(); g.row_len()],
            global_gain: 1.0,
        });
    }
    config.validate()?;
    let g_bar = population_mean(g)?;
    let p = branch_projections(&normalize(&g_bar), state)?;
    let (z, _) = select_and_integrate(&p, config, state);
    ema_update(state, &z, config.ema_decay)?;
    let gain = gain_vector(&state.ema, config.gain_strength);
    Ok(GateOutput {
        modulated: modulate(g, &gain)?,
        global_gain: mean_gain(&gain),
        gain,
    })
}

/// Whether a forward pass may move the gate's moving average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Advance,
    /// Reuse the stored average without updating it. An uninitialized gate
    /// acts as the identity.
    Frozen,
}

/// Gate bundled with its configuration and a backward cache.
#[derive(Debug, Clone)]
pub struct DendriticGate<T> {
    pub config: GateConfig,
    pub state: GateState<T>,
    last_gain: Option<Vec<T>>,
    last_global: f64,
}

impl<T: Real> DendriticGate<T> {
    pub fn new(config: GateConfig, dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self::with_state(
            config,
            GateState::sample(config.num_branches, dim, seed)?,
        ))
    }

    pub fn with_state(config: GateConfig, state: GateState<T>) -> Self {
        Self {
            config,
            state,
            last_gain: None,
            last_global: 1.0,
        }
    }

    /// Mean gain of the most recent forward pass.
    pub fn global_gain(&self) -> f64 {
        self.last_global
    }

    pub fn reset(&mut self) {
        self.state.reset();
    }

    pub fn infer(&mut self, g: &Tensor<T>, mode: GateMode) -> Result<GateOutput<T>> {
        let out = match mode {
            GateMode::Advance => gate_apply(g, &self.config, &mut self.state)?,
            GateMode::Frozen if self.config.enabled && self.state.initialized => {
                let gain = gain_vector(&self.state.ema, self.config.gain_strength);
                GateOutput {
                    modulated: modulate(g, &gain)?,
                    global_gain: mean_gain(&gain),
                    gain,
                }
            }
            GateMode::Frozen => GateOutput {
                modulated: g.clone(),
                gain: vec![T::one(); g.row_len()],
                global_gain: 1.0,
            },
        };
        self.last_global = out.global_gain;
        Ok(out)
    }

    pub fn forward(&mut self, g: &Tensor<T>, mode: GateMode) -> Result<Tensor<T>> {
        let out = self.infer(g, mode)?;
        self.last_gain = Some(out.gain);
        Ok(out.modulated)
    }

    /// Gradient with respect to the gate input; the gain is a constant here.
    pub fn backward(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let gain = self
            .last_gain
            .as_ref()
            .ok_or_else(|| Error::Usage("gate: backward before forward".into()))?;
        modulate(dy, gain)
    }

    pub fn clear_cache(&mut self) {
        self.last_gain = None;
    }
}

impl<T: Real> Parameters<T> for DendriticGate<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.state.hyperplanes)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.state.hyperplanes)
    }
}
