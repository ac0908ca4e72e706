use rand::Rng;

use super::sparse::{topk_activate, SparseLinear, SparseProjection};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::gate::{DendriticGate, GateMode};
use crate::nn::{relu_backward, relu_inplace, Dense, Param, Parameters, Real, Tensor};

/// Mossy fibre, granule, Purkinje and nuclear stages on top of a feature
/// vector.
///
/// ```text
/// mf   = relu(feature W_mf + b)
/// grc  = topk(relu(phi mf) * mask)
/// pc   = W_pc · gate(grc)
/// cn   = relu(f_direct(feature) + alpha * f_pc(pc))
/// q    = cn W_out + b
/// ```
#[derive(Debug, Clone)]
pub struct CerebellarHead<T> {
    pub mf: Dense<T>,
    pub phi: SparseProjection<T>,
    /// Frozen 0/1 mask over granule cells.
    pub mask: Param<T>,
    pub pc: SparseLinear<T>,
    pub gate: DendriticGate<T>,
    pub pc_cn: Dense<T>,
    pub alpha: Param<T>,
    pub mf_cn: Dense<T>,
    pub out: Dense<T>,
    active: usize,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    mf_act: Tensor<T>,
    grc: Tensor<T>,
    pc_raw: Tensor<T>,
    cn: Tensor<T>,
}

impl<T: Real> CerebellarHead<T> {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let grc = cfg.grc_dim;
        let mf = Dense::new("mf", feature_dim, cfg.mf_dim, rng);
        let phi = SparseProjection::sample("phi", cfg.mf_dim, grc, cfg.fan_in, rng)?;
        let mask = (0..grc)
            .map(|_| if rng.gen_bool(cfg.mask_prob) { T::one() } else { T::zero() })
            .collect();
        let pc = SparseLinear::sample("grc_pc", grc, cfg.pc_count, cfg.pc_density, rng)?;
        let gate = DendriticGate::new(cfg.gate, grc, rng.gen())?;
        let pc_cn = Dense::new("pc_cn", cfg.pc_count, cfg.cn_dim, rng);
        let mf_cn = Dense::new("mf_cn", feature_dim, cfg.cn_dim, rng);
        let out = Dense::new("cn_out", cfg.cn_dim, crate::env::Action::COUNT, rng);
        Ok(Self {
            mf,
            phi,
            mask: Param::new("grc.mask", vec![grc], mask, false),
            pc,
            gate,
            pc_cn,
            alpha: Param::new("alpha_pc", vec![], vec![T::of(cfg.alpha_init)], true),
            mf_cn,
            out,
            active: cfg.active_granules(),
            cache: None,
        })
    }

    /// Granule cells kept by the top-k stage.
    pub fn active_granules(&self) -> usize {
        self.active
    }

    pub fn alpha(&self) -> T {
        self.alpha.value[0]
    }

    pub fn mf_activity(&self, feature: &Tensor<T>) -> Result<Tensor<T>> {
        let mut a = self.mf.infer(feature)?;
        relu_inplace(a.data_mut());
        Ok(a)
    }

    /// Masked, rectified expansion before top-k thinning.
    pub fn grc_preactivation(&self, mf_act: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.phi.apply(mf_act)?;
        let d = self.phi.out_dim();
        for row in h.data_mut().chunks_mut(d.max(1)) {
            for (v, &m) in row.iter_mut().zip(&self.mask.value) {
                *v = if *v > T::zero() { *v * m } else { T::zero() };
            }
        }
        Ok(h)
    }

    pub fn grc_forward(&self, mf_act: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.grc_preactivation(mf_act)?;
        let d = self.phi.out_dim();
        if self.active < d {
            for row in h.data_mut().chunks_mut(d.max(1)) {
                let kept = topk_activate(row, self.active)?;
                row.copy_from_slice(&kept);
            }
        }
        Ok(h)
    }

    pub fn pc_forward(&self, grc: &Tensor<T>) -> Result<Tensor<T>> {
        self.pc.infer(grc)
    }

    /// Returns `(cn, q)`.
    pub fn cn_forward(&self, feature: &Tensor<T>, h_pc: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let pc_raw = self.pc_cn.infer(h_pc)?;
        let mut cn = self.mf_cn.infer(feature)?;
        combine(&mut cn, &pc_raw, self.alpha());
        let q = self.out.infer(&cn)?;
        Ok((cn, q))
    }

    pub fn run(&mut self, feature: &Tensor<T>, mode: GateMode, record: bool) -> Result<Tensor<T>> {
        let mf_act = if record {
            let mut a = self.mf.forward(feature)?;
            relu_inplace(a.data_mut());
            a
        } else {
            self.mf_activity(feature)?
        };
        let grc = self.grc_forward(&mf_act)?;
        let gated = if record {
            self.gate.forward(&grc, mode)?
        } else {
            self.gate.infer(&grc, mode)?.modulated
        };
        let h_pc = if record { self.pc.forward(&gated)? } else { self.pc.infer(&gated)? };
        let pc_raw = if record { self.pc_cn.forward(&h_pc)? } else { self.pc_cn.infer(&h_pc)? };
        let mut cn = if record { self.mf_cn.forward(feature)? } else { self.mf_cn.infer(feature)? };
        combine(&mut cn, &pc_raw, self.alpha());
        let q = if record { self.out.forward(&cn)? } else { self.out.infer(&cn)? };
        if record {
            self.cache = Some(Cache { mf_act, grc, pc_raw, cn });
        }
        Ok(q)
    }

    /// Accumulates gradients and returns the feature gradient.
    pub fn backward(&mut self, dq: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("cerebellar head: backward before forward".into()))?;
        let mut dpre = self.out.backward(dq)?;
        relu_backward(cache.cn.data(), dpre.data_mut());

        let mut dfeat = self.mf_cn.backward(&dpre)?;
        let alpha = self.alpha();
        let mut dalpha = T::zero();
        let mut dpc_raw = dpre;
        for (g, &p) in dpc_raw.data_mut().iter_mut().zip(cache.pc_raw.data()) {
            dalpha += *g * p;
            *g *= alpha;
        }
        self.alpha.grad[0] += dalpha;

        let dh_pc = self.pc_cn.backward(&dpc_raw)?;
        let dgated = self.pc.backward(&dh_pc)?;
        let mut dgrc = self.gate.backward(&dgated)?;
        // Units zeroed by the rectifier, the mask or top-k pass no gradient.
        relu_backward(cache.grc.data(), dgrc.data_mut());
        let mut dmf = self.phi.backward_input(&dgrc);
        relu_backward(cache.mf_act.data(), dmf.data_mut());
        let dfeat_mf = self.mf.backward(&dmf)?;
        for (a, &b) in dfeat.data_mut().iter_mut().zip(dfeat_mf.data()) {
            *a += b;
        }
        Ok(dfeat)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        self.mf.clear_cache();
        self.pc.clear_cache();
        self.gate.clear_cache();
        self.pc_cn.clear_cache();
        self.mf_cn.clear_cache();
        self.out.clear_cache();
    }

    /// Re-derives integer caches from stored index parameters.
    pub fn refresh(&mut self) -> Result<()> {
        self.phi.refresh()?;
        self.pc.refresh()?;
        if self.mask.value.iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(Error::Numeric("grc.mask holds a value other than 0/1".into()));
        }
        Ok(())
    }
}

/// `cn <- max(cn + alpha * pc_raw, 0)`.
fn combine<T: Real>(cn: &mut Tensor<T>, pc_raw: &Tensor<T>, alpha: T) {
    for (c, &p) in cn.data_mut().iter_mut().zip(pc_raw.data()) {
        *c = (*c + alpha * p).max(T::zero());
    }
}

impl<T: Real> Parameters<T> for CerebellarHead<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.mf.visit(f);
        self.phi.visit(f);
        f(&self.mask);
        self.pc.visit(f);
        self.gate.visit(f);
        self.pc_cn.visit(f);
        f(&self.alpha);
        self.mf_cn.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.mf.visit_mut(f);
        self.phi.visit_mut(f);
        f(&mut self.mask);
        self.pc.visit_mut(f);
        self.gate.visit_mut(f);
        self.pc_cn.visit_mut(f);
        f(&mut self.alpha);
        self.mf_cn.visit_mut(f);
        self.out.visit_mut(f);
    }
}
