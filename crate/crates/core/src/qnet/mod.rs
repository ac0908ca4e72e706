//! Q-networks over stacked Pong frames: the cerebellar model and a dense
//! baseline sharing the same convolutional backbone.

mod backbone;
mod baseline;
mod cerebellar;
pub mod sparse;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use backbone::{feature_dim, Backbone};
pub use baseline::BaselineHead;
pub use cerebellar::CerebellarHead;
pub use sparse::{topk_activate, SparseLinear, SparseProjection};

use crate::config::{key_values, parse_field, ConfigValue, KeyValues};
use crate::env::{Action, Observation};
use crate::error::{Error, Result};
use crate::gate::{GateConfig, GateMode};
use crate::nn::{count_params, Checkpoint, Param, Parameters, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Baseline,
    Cdrl,
    CdrlNoDendrite,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Baseline, ModelKind::CdrlNoDendrite, ModelKind::Cdrl];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Cdrl => "cdrl",
            ModelKind::CdrlNoDendrite => "cdrl_no_dendrite",
        }
    }

    pub fn is_cerebellar(self) -> bool {
        self != ModelKind::Baseline
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" => Ok(ModelKind::Baseline),
            "cdrl" => Ok(ModelKind::Cdrl),
            "cdrl_no_dendrite" => Ok(ModelKind::CdrlNoDendrite),
            other => Err(Error::Type {
                key: "model.kind".into(),
                expected: ModelKind::EXPECTED,
                value: other.into(),
            }),
        }
    }
}

impl ConfigValue for ModelKind {
    const EXPECTED: &'static str = "one of baseline, cdrl, cdrl_no_dendrite";
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

/// One convolution layer: output channels, square kernel edge, stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self { channels, kernel, stride }
    }
}

impl ConfigValue for Vec<ConvSpec> {
    const EXPECTED: &'static str = "a list like 32x8x4,64x4x2 (channels x kernel x stride) or `none`";
    fn parse_value(s: &str) -> Option<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Some(Vec::new());
        }
        s.split(',')
            .map(|part| {
                let v: Vec<usize> = part.trim().split('x').map(|d| d.parse().ok()).collect::<Option<_>>()?;
                match v[..] {
                    [c, k, st] if c > 0 && k > 0 && st > 0 => Some(ConvSpec::new(c, k, st)),
                    _ => None,
                }
            })
            .collect()
    }
    fn render(&self) -> String {
        if self.is_empty() {
            return "none".into();
        }
        self.iter()
            .map(|c| format!("{}x{}x{}", c.channels, c.kernel, c.stride))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub convs: Vec<ConvSpec>,
    pub mf_dim: usize,
    pub grc_dim: usize,
    /// Mossy fibres read by each granule cell.
    pub fan_in: usize,
    /// Probability that a granule cell survives the frozen mask.
    pub mask_prob: f64,
    pub topk_fraction: f64,
    pub pc_count: usize,
    /// Fraction of granule cells wired to each Purkinje cell.
    pub pc_density: f64,
    pub cn_dim: usize,
    pub alpha_init: f64,
    pub baseline_hidden: Vec<usize>,
    pub gate: GateConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Cdrl,
            convs: vec![ConvSpec::new(32, 8, 4), ConvSpec::new(64, 4, 2), ConvSpec::new(64, 3, 1)],
            mf_dim: 512,
            grc_dim: 4096,
            fan_in: 5,
            mask_prob: 0.5,
            topk_fraction: 0.05,
            pc_count: 64,
            pc_density: 0.25,
            cn_dim: 1344,
            alpha_init: -1.0,
            baseline_hidden: vec![2352, 2352],
            gate: GateConfig::default(),
        }
    }
}

key_values!(ModelConfig, "model", {
    "kind" => kind,
    "convs" => convs,
    "mf_dim" => mf_dim,
    "grc_dim" => grc_dim,
    "fan_in" => fan_in,
    "mask_prob" => mask_prob,
    "topk_fraction" => topk_fraction,
    "pc_count" => pc_count,
    "pc_density" => pc_density,
    "cn_dim" => cn_dim,
    "alpha_init" => alpha_init,
    "baseline_hidden" => baseline_hidden,
});

impl ModelConfig {
    pub fn with_kind(kind: ModelKind) -> Self {
        Self { kind, ..Self::default() }
    }

    /// Number of granule cells kept by top-k, `round(topk_fraction * grc_dim)`.
    pub fn active_granules(&self) -> usize {
        ((self.topk_fraction * self.grc_dim as f64).round() as usize).min(self.grc_dim)
    }

    /// The gate runs only for the full cerebellar model with the gate switched on.
    pub fn gate_enabled(&self) -> bool {
        self.kind == ModelKind::Cdrl && self.gate.enabled
    }

    pub fn validate(&self) -> Result<()> {
        if !self.kind.is_cerebellar() {
            return Ok(());
        }
        let positive = [
            ("model.mf_dim", self.mf_dim),
            ("model.grc_dim", self.grc_dim),
            ("model.pc_count", self.pc_count),
            ("model.cn_dim", self.cn_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.fan_in == 0 || self.fan_in > self.mf_dim {
            return Err(Error::config(
                "model.fan_in",
                format!("{} must lie in 1..={}", self.fan_in, self.mf_dim),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("model.mask_prob", "must lie in [0, 1]"));
        }
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) {
            return Err(Error::config("model.topk_fraction", "must lie in (0, 1]"));
        }
        if !(self.pc_density > 0.0 && self.pc_density <= 1.0) {
            return Err(Error::config("model.pc_density", "must lie in (0, 1]"));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::config("model.alpha_init", "must be finite"));
        }
        if self.kind == ModelKind::Cdrl {
            self.gate.validate()?;
        }
        Ok(())
    }
}

/// Stacked frames entering the network: `channels x side x side`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub side: usize,
}

impl InputShape {
    pub fn of_env(env: &crate::env::EnvConfig) -> Self {
        Self {
            channels: env.stack_size,
            side: env.obs_side,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks observations into a `B x C x S x S` tensor.
pub fn batch_observations<T: Real>(obs: &[&Observation]) -> Result<Tensor<T>> {
    let Some(first) = obs.first() else {
        return Err(Error::Usage("empty observation batch".into()));
    };
    let (c, s) = (first.stack_size(), first.side());
    let mut flat = Vec::with_capacity(obs.len() * c * s * s);
    for o in obs {
        if o.stack_size() != c || o.side() != s {
            return Err(Error::Shape {
                op: "observation batch",
                left: vec![c, s, s],
                right: vec![o.stack_size(), o.side(), o.side()],
            });
        }
        for f in o.frames() {
            flat.extend(f.iter().map(|&v| T::of(f64::from(v))));
        }
    }
    Tensor::new(vec![obs.len(), c, s, s], flat)
}

#[derive(Debug, Clone)]
enum Head<T> {
    Baseline(BaselineHead<T>),
    Cerebellar(CerebellarHead<T>),
}

/// A complete Q-network: backbone plus one of the two heads.
#[derive(Debug, Clone)]
pub struct QNetwork<T> {
    config: ModelConfig,
    input: InputShape,
    seed: u64,
    backbone: Backbone<T>,
    head: Head<T>,
}

impl<T: Real> QNetwork<T> {
    pub fn build(config: ModelConfig, input: InputShape, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(input.channels, input.side, &config.convs, &mut rng)?;
        let fd = backbone.feature_dim();
        let head = if config.kind.is_cerebellar() {
            let mut cfg = config.clone();
            cfg.gate.enabled = config.gate_enabled();
            Head::Cerebellar(CerebellarHead::new(fd, &cfg, &mut rng)?)
        } else {
            Head::Baseline(BaselineHead::new(fd, &config.baseline_hidden, &mut rng)?)
        };
        Ok(Self {
            config,
            input,
            seed,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    pub fn cerebellar(&self) -> Option<&CerebellarHead<T>> {
        match &self.head {
            Head::Cerebellar(h) => Some(h),
            Head::Baseline(_) => None,
        }
    }

    pub fn cerebellar_mut(&mut self) -> Option<&mut CerebellarHead<T>> {
        match &mut self.head {
            Head::Cerebellar(h) => Some(h),
            Head::Baseline(_) => None,
        }
    }

    pub fn baseline(&self) -> Option<&BaselineHead<T>> {
        match &self.head {
            Head::Baseline(h) => Some(h),
            Head::Cerebellar(_) => None,
        }
    }

    pub fn baseline_mut(&mut self) -> Option<&mut BaselineHead<T>> {
        match &mut self.head {
            Head::Baseline(h) => Some(h),
            Head::Cerebellar(_) => None,
        }
    }

    /// Number of dense stages in the head.
    pub fn head_depth(&self) -> usize {
        match &self.head {
            Head::Baseline(h) => h.depth(),
            // mossy fibre layer, nuclear fusion layer, output layer
            Head::Cerebellar(_) => 3,
        }
    }

    pub fn gate_enabled(&self) -> bool {
        self.cerebellar().is_some_and(|h| h.gate.config.enabled)
    }

    /// Switches the gate of a cerebellar network on or off.
    pub fn set_gate_enabled(&mut self, on: bool) -> Result<()> {
        let Some(h) = self.cerebellar_mut() else {
            return Err(Error::Usage("the baseline network has no dendritic gate".into()));
        };
        h.gate.config.enabled = on;
        h.gate.reset();
        self.config.gate.enabled = on;
        self.config.kind = if on { ModelKind::Cdrl } else { ModelKind::CdrlNoDendrite };
        Ok(())
    }

    pub fn reset_gate(&mut self) {
        if let Some(h) = self.cerebellar_mut() {
            h.gate.reset();
        }
    }

    /// Mean gate gain of the last forward pass, 1 without a gate.
    pub fn global_gain(&self) -> f64 {
        self.cerebellar().map_or(1.0, |h| h.gate.global_gain())
    }

    fn run(&mut self, x: &Tensor<T>, mode: GateMode, record: bool) -> Result<Tensor<T>> {
        let feature = self.backbone.run(x, record)?;
        match &mut self.head {
            Head::Baseline(h) => h.run(&feature, record),
            Head::Cerebellar(h) => h.run(&feature, mode, record),
        }
    }

    /// Forward pass that records what [`QNetwork::backward`] needs.
    pub fn forward(&mut self, x: &Tensor<T>, mode: GateMode) -> Result<Tensor<T>> {
        self.run(x, mode, true)
    }

    /// Forward pass without recording.
    pub fn infer(&mut self, x: &Tensor<T>, mode: GateMode) -> Result<Tensor<T>> {
        self.run(x, mode, false)
    }

    /// Accumulates gradients of every trainable parameter given `dL/dq`.
    pub fn backward(&mut self, dq: &Tensor<T>) -> Result<()> {
        let dfeat = match &mut self.head {
            Head::Baseline(h) => h.backward(dq)?,
            Head::Cerebellar(h) => h.backward(dq)?,
        };
        self.backbone.backward(&dfeat)
    }

    /// Action values for a single observation.
    pub fn q_values(&mut self, obs: &Observation, mode: GateMode) -> Result<[T; Action::COUNT]> {
        let x = batch_observations(&[obs])?;
        let q = self.infer(&x, mode)?;
        let d = q.data();
        Ok([d[0], d[1], d[2]])
    }

    pub fn clear_cache(&mut self) {
        self.backbone.clear_cache();
        match &mut self.head {
            Head::Baseline(h) => h.clear_cache(),
            Head::Cerebellar(h) => h.clear_cache(),
        }
    }

    /// (trainable, total) scalar counts; fixed structures count only in total.
    pub fn param_count(&self) -> (usize, usize) {
        count_params(self)
    }

    /// Copies every parameter and the gate state from `other`.
    pub fn copy_from(&mut self, other: &Self) {
        *self = other.clone();
        self.clear_cache();
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push_meta("seed", self.seed);
        ck.push_meta("input.channels", self.input.channels);
        ck.push_meta("input.side", self.input.side);
        let mut gate = self.config.gate;
        if let Some(h) = self.cerebellar() {
            gate = h.gate.config;
        }
        for (k, v) in self.config.entries().into_iter().chain(gate.entries()) {
            ck.meta.push((k, v));
        }
        self.visit(&mut |p| {
            ck.push_tensor(
                p.name.clone(),
                p.shape.clone(),
                p.trainable,
                p.value.iter().map(|v| v.f64() as f32).collect(),
            )
        });
        if let Some(h) = self.cerebellar() {
            ck.push_meta("gate.initialized", h.gate.state.initialized);
            ck.push_tensor(
                "gate.ema",
                vec![h.gate.state.ema.len()],
                false,
                h.gate.state.ema.iter().map(|v| v.f64() as f32).collect(),
            );
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| ck.require_meta(k);
        let seed: u64 = parse_field("seed", meta("seed")?)?;
        let input = InputShape {
            channels: parse_field("input.channels", meta("input.channels")?)?,
            side: parse_field("input.side", meta("input.side")?)?,
        };
        let mut config = ModelConfig::default();
        let pairs = ck.meta.iter().map(|(k, v)| (k.as_str(), v.as_str()));
        config.apply_entries(pairs.clone())?;
        config.gate.apply_entries(pairs.filter(|(k, _)| *k != "gate.initialized"))?;

        let mut net = Self::build(config, input, seed)?;
        let mut expected = 0usize;
        let mut failure = None;
        net.visit_mut(&mut |p| {
            expected += 1;
            if failure.is_some() {
                return;
            }
            match ck.tensor(&p.name) {
                Some(t) if t.shape == p.shape && t.trainable == p.trainable => {
                    for (dst, &src) in p.value.iter_mut().zip(&t.data) {
                        *dst = T::of(f64::from(src));
                    }
                }
                Some(t) => {
                    failure = Some(format!(
                        "tensor `{}` is {:?} ({}), network expects {:?} ({})",
                        p.name,
                        t.shape,
                        if t.trainable { "trainable" } else { "fixed" },
                        p.shape,
                        if p.trainable { "trainable" } else { "fixed" },
                    ))
                }
                None => failure = Some(format!("missing tensor `{}`", p.name)),
            }
        });
        let load_err = |reason: String| Error::Load {
            path: Default::default(),
            reason,
        };
        if let Some(reason) = failure {
            return Err(load_err(reason));
        }
        let extra = usize::from(net.cerebellar().is_some());
        if ck.tensors.len() != expected + extra {
            return Err(load_err(format!(
                "checkpoint holds {} tensors, network has {}",
                ck.tensors.len(),
                expected + extra
            )));
        }
        if let Some(h) = net.cerebellar_mut() {
            h.refresh()
                .map_err(|e| load_err(e.to_string()))?;
            let ema = ck.require_tensor("gate.ema")?;
            if ema.data.len() != h.gate.state.ema.len() {
                return Err(load_err("gate.ema has the wrong length".into()));
            }
            for (dst, &src) in h.gate.state.ema.iter_mut().zip(&ema.data) {
                *dst = T::of(f64::from(src));
            }
            h.gate.state.initialized = parse_field("gate.initialized", meta("gate.initialized")?)?;
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Self::from_checkpoint(&ck).map_err(|e| match e {
            Error::Load { reason, .. } => Error::Load {
                path: path.to_path_buf(),
                reason,
            },
            other => Error::Load {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })
    }
}

impl<T: Real> Parameters<T> for QNetwork<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.backbone.visit(f);
        match &self.head {
            Head::Baseline(h) => h.visit(f),
            Head::Cerebellar(h) => h.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.backbone.visit_mut(f);
        match &mut self.head {
            Head::Baseline(h) => h.visit_mut(f),
            Head::Cerebellar(h) => h.visit_mut(f),
        }
    }
}
