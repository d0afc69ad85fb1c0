//! Parameter update rules: AdaFisher / AdaFisherW and the SGD, Adam and
//! AdamW baselines.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::kfactor::{fresh_factors, FactoredEfim, KFState, LayerFactors, DEFAULT_GAMMA, DEFAULT_LAMBDA};
use crate::nn::{LayerCapture, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    Adam,
    AdamW,
    AdaFisher,
    AdaFisherW,
}

impl OptimizerName {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerName::Sgd => "sgd",
            OptimizerName::Adam => "adam",
            OptimizerName::AdamW => "adamw",
            OptimizerName::AdaFisher => "adafisher",
            OptimizerName::AdaFisherW => "adafisherw",
        }
    }

    pub fn uses_curvature(self) -> bool {
        matches!(self, OptimizerName::AdaFisher | OptimizerName::AdaFisherW)
    }
}

/// Component switches for AdaFisher. All off is the reference method.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Divide by the square root of the Fisher diagonal.
    pub sqrt: bool,
    /// Use per-batch factors instead of their moving average.
    pub no_ema: bool,
    /// Give normalization layers identity factors.
    pub identity_norm: bool,
}

/// Hyperparameters for every optimizer; each rule reads the fields it needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: OptimizerName,
    /// Learning rate α.
    pub lr: f64,
    /// First-moment decay β (β₁ for Adam).
    pub beta: f64,
    /// Second-moment decay β₂ (Adam family).
    pub beta2: f64,
    /// Adam denominator offset.
    pub eps: f64,
    /// Factor moving-average weight γ.
    pub gamma: f64,
    /// Damping λ.
    pub lambda: f64,
    /// Weight decay κ. Decoupled for AdamW/AdaFisherW, added to the
    /// gradient otherwise.
    pub weight_decay: f64,
    /// Heavy-ball momentum μ (SGD).
    pub momentum: f64,
    pub ablation: Ablation,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: OptimizerName::AdaFisher,
            lr: 1e-3,
            beta: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gamma: DEFAULT_GAMMA,
            lambda: DEFAULT_LAMBDA,
            weight_decay: 0.0,
            momentum: 0.9,
            ablation: Ablation::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn named(name: OptimizerName) -> Self {
        Self {
            name,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if !(0.0..1.0).contains(&self.beta) {
            bail!(Config, "beta must lie in [0, 1), got {}", self.beta);
        }
        if !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "beta2 must lie in [0, 1), got {}", self.beta2);
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Config, "weight decay must be non-negative, got {}", self.weight_decay);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1), got {}", self.momentum);
        }
        if !(self.eps >= 0.0) {
            bail!(Config, "eps must be non-negative");
        }
        if self.name.uses_curvature() {
            if !(self.gamma > 0.0 && self.gamma <= 1.0) {
                bail!(Config, "gamma must lie in (0, 1], got {}", self.gamma);
            }
            if !(self.lambda > 0.0) {
                bail!(Config, "lambda must be positive, got {}", self.lambda);
            }
        }
        Ok(())
    }
}

/// Per-parameter moment buffers and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// First moment, stored without bias correction.
    pub m: Vec<Tensor>,
    /// Second moment (Adam family) or momentum buffer (SGD).
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl OptimizerState {
    pub fn zeros_like(params: &[&Tensor]) -> Result<Self> {
        let m = params
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            v: m.clone(),
            m,
            t: 0,
        })
    }

    fn check(&self, params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            bail!(
                Dimension,
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            );
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                bail!(
                    Dimension,
                    "tensor {i}: param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                );
            }
        }
        Ok(())
    }

    /// Bias-corrected first moments `m / (1 − β^t)`.
    pub fn corrected_first_moment(&self, beta: f64) -> Vec<Tensor> {
        let c = 1.0 - beta.powi(self.t as i32);
        self.m.iter().map(|m| m.scale(1.0 / c)).collect()
    }
}

fn coupled_decay(grads: &[Tensor], params: &[&mut Tensor], kappa: f64) -> Result<Vec<Tensor>> {
    if kappa == 0.0 {
        return Ok(grads.to_vec());
    }
    grads
        .iter()
        .zip(params)
        .map(|(g, p)| g.zip_map(p, |g, p| g + kappa * p))
        .collect()
}

/// One AdaFisher update with a given Fisher approximation.
///
/// `m ← βm + (1−β)g`, `m̂ = m/(1−β^t)`, `θ ← θ − α·F̃⁻¹m̂`; with
/// `decoupled_decay = κ > 0` the update gains `−α·κ·θ` (AdaFisherW).
pub fn adafisher_step(
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    grads: &[Tensor],
    efim: &FactoredEfim,
    params: &mut [&mut Tensor],
    decoupled_decay: f64,
) -> Result<()> {
    if !(decoupled_decay >= 0.0) {
        bail!(Config, "weight decay must be non-negative, got {decoupled_decay}");
    }
    state.check(params, grads)?;
    if efim.param_tensors() != grads.len() {
        bail!(
            Dimension,
            "Fisher covers {} tensors, gradients have {}",
            efim.param_tensors(),
            grads.len()
        );
    }
    state.t += 1;
    for (m, g) in state.m.iter_mut().zip(grads) {
        for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
            *mv = cfg.beta * *mv + (1.0 - cfg.beta) * gv;
        }
    }
    let m_hat = state.corrected_first_moment(cfg.beta);
    let dirs = efim.precondition_all(&m_hat, cfg.ablation.sqrt)?;
    for (p, d) in params.iter_mut().zip(&dirs) {
        for (pv, &dv) in p.data_mut().iter_mut().zip(d.data()) {
            *pv -= cfg.lr * (dv + decoupled_decay * *pv);
        }
    }
    Ok(())
}

/// AdaFisher / AdaFisherW: owns the moving-average factor state and the
/// first moment.
#[derive(Debug, Clone)]
pub struct AdaFisher {
    pub cfg: OptimizerConfig,
    pub state: OptimizerState,
    pub kf: KFState,
    last_efim: Option<FactoredEfim>,
}

impl AdaFisher {
    pub fn new(model: &Model, cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        if !cfg.name.uses_curvature() {
            bail!(Config, "{} is not an AdaFisher variant", cfg.name.as_str());
        }
        Ok(Self {
            state: OptimizerState::zeros_like(&model.params())?,
            kf: KFState::for_model(model, cfg.gamma, cfg.lambda)?,
            cfg,
            last_efim: None,
        })
    }

    pub fn decoupled(&self) -> bool {
        self.cfg.name == OptimizerName::AdaFisherW
    }

    /// Fresh factors for `captures`, honoring the identity-norm switch.
    pub fn factors_from(&self, captures: &[LayerCapture]) -> Result<Vec<LayerFactors>> {
        fresh_factors(captures, self.cfg.ablation.identity_norm)
    }

    /// Folds fresh factors into the state (moving average unless disabled).
    pub fn observe(&mut self, fresh: &[LayerFactors]) -> Result<()> {
        if self.cfg.ablation.no_ema {
            self.kf.replace(fresh)
        } else {
            self.kf.ema_update(fresh)
        }
    }

    pub fn efim(&self) -> Result<FactoredEfim> {
        self.kf.assemble()
    }

    /// Most recent Fisher approximation used by [`AdaFisher::apply`].
    pub fn last_efim(&self) -> Option<&FactoredEfim> {
        self.last_efim.as_ref()
    }

    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], efim: FactoredEfim) -> Result<()> {
        let (grads, decay) = if self.decoupled() {
            (grads.to_vec(), self.cfg.weight_decay)
        } else {
            (coupled_decay(grads, params, self.cfg.weight_decay)?, 0.0)
        };
        adafisher_step(&mut self.state, &self.cfg, &grads, &efim, params, decay)?;
        self.last_efim = Some(efim);
        Ok(())
    }

    /// Full step: fresh factors → EMA → normalize/assemble → update.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], captures: &[LayerCapture]) -> Result<()> {
        let fresh = self.factors_from(captures)?;
        self.observe(&fresh)?;
        let efim = self.efim()?;
        self.apply(params, grads, efim)
    }
}

/// Adam and AdamW with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: OptimizerConfig,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(params: &[&Tensor], cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            state: OptimizerState::zeros_like(params)?,
            cfg,
        })
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        self.state.check(params, grads)?;
        let decoupled = self.cfg.name == OptimizerName::AdamW;
        let grads = if decoupled {
            grads.to_vec()
        } else {
            coupled_decay(grads, params, self.cfg.weight_decay)?
        };
        let c = &self.cfg;
        self.state.t += 1;
        let t = self.state.t as i32;
        let bc1 = 1.0 - c.beta.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let kappa = if decoupled { c.weight_decay } else { 0.0 };
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&grads)
            .zip(self.state.m.iter_mut())
            .zip(self.state.v.iter_mut())
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = c.beta * *mv + (1.0 - c.beta) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + kappa * *pv);
            }
        }
        Ok(())
    }

    /// Bias-corrected second moment `v̂` per parameter tensor.
    pub fn second_moment(&self) -> Vec<Vec<f64>> {
        let bc2 = 1.0 - self.cfg.beta2.powi(self.state.t.max(1) as i32);
        self.state.v.iter().map(|v| v.data().iter().map(|x| x / bc2).collect()).collect()
    }
}

/// Heavy-ball SGD: `buf ← μ·buf + g`, `θ ← θ − α·buf`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub cfg: OptimizerConfig,
    pub state: OptimizerState,
}

impl Sgd {
    pub fn new(params: &[&Tensor], cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            state: OptimizerState::zeros_like(params)?,
            cfg,
        })
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        self.state.check(params, grads)?;
        let grads = coupled_decay(grads, params, self.cfg.weight_decay)?;
        self.state.t += 1;
        let (lr, mu) = (self.cfg.lr, self.cfg.momentum);
        for ((p, g), buf) in params.iter_mut().zip(&grads).zip(self.state.v.iter_mut()) {
            for ((pv, &gv), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                *b = mu * *b + gv;
                *pv -= lr * *b;
            }
        }
        Ok(())
    }
}

/// Any supported optimizer behind one interface.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
    AdaFisher(AdaFisher),
}

impl Optimizer {
    pub fn new(model: &Model, cfg: OptimizerConfig) -> Result<Self> {
        Ok(match cfg.name {
            OptimizerName::Sgd => Optimizer::Sgd(Sgd::new(&model.params(), cfg)?),
            OptimizerName::Adam | OptimizerName::AdamW => Optimizer::Adam(Adam::new(&model.params(), cfg)?),
            OptimizerName::AdaFisher | OptimizerName::AdaFisherW => {
                Optimizer::AdaFisher(AdaFisher::new(model, cfg)?)
            }
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        match self {
            Optimizer::Sgd(o) => &o.cfg,
            Optimizer::Adam(o) => &o.cfg,
            Optimizer::AdaFisher(o) => &o.cfg,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.cfg.lr = lr,
            Optimizer::Adam(o) => o.cfg.lr = lr,
            Optimizer::AdaFisher(o) => o.cfg.lr = lr,
        }
    }

    /// Applies one update to `model` from a finished backward pass.
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], captures: &[LayerCapture]) -> Result<()> {
        let mut params = model.params_mut();
        match self {
            Optimizer::Sgd(o) => o.step(&mut params, grads),
            Optimizer::Adam(o) => o.step(&mut params, grads),
            Optimizer::AdaFisher(o) => o.step(&mut params, grads, captures),
        }
    }
}

/// Learning-rate schedule evaluated per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// Multiply by `gamma` every `step_size` epochs.
    Step { step_size: usize, gamma: f64 },
    /// Cosine annealing from the base rate to `min_lr` over the run.
    Cosine {
        #[serde(default)]
        min_lr: f64,
    },
}

impl Schedule {
    /// Rate for zero-based `epoch` out of `epochs`.
    pub fn lr_at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Step { step_size, gamma } => base * gamma.powi((epoch / step_size.max(1)) as i32),
            Schedule::Cosine { min_lr } => {
                let frac = epoch as f64 / epochs.max(1) as f64;
                min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Step { step_size, gamma } if step_size == 0 || !(gamma > 0.0) => {
                bail!(Config, "step schedule needs step_size ≥ 1 and gamma > 0")
            }
            Schedule::Cosine { min_lr } if !(min_lr >= 0.0) => bail!(Config, "cosine min_lr must be ≥ 0"),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kfactor::{BlockKind, EfimBlock};

    fn unit_efim(lambda: f64, rows: usize, cols: usize) -> FactoredEfim {
        // Pure damping block: divisor λ everywhere.
        FactoredEfim {
            blocks: vec![EfimBlock {
                layer: 0,
                kind: BlockKind::Kronecker,
                h_norm: vec![0.0; cols],
                s_norm: vec![0.0; rows],
            }],
            lambda,
        }
    }

    fn scalar(v: f64) -> Tensor {
        Tensor::matrix(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn first_step_uses_raw_gradient() {
        let cfg = OptimizerConfig::default();
        let mut p = scalar(0.0);
        let mut st = OptimizerState::zeros_like(&[&p]).unwrap();
        adafisher_step(&mut st, &cfg, &[scalar(1.0)], &unit_efim(1.0, 1, 1), &mut [&mut p], 0.0).unwrap();
        assert!((p.data()[0] + 0.001).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let cfg = OptimizerConfig::default();
        let mut p = scalar(2.5);
        let mut st = OptimizerState::zeros_like(&[&p]).unwrap();
        for _ in 0..10 {
            adafisher_step(&mut st, &cfg, &[scalar(0.0)], &unit_efim(1e-3, 1, 1), &mut [&mut p], 0.0).unwrap();
        }
        assert_eq!(p.data()[0], 2.5);
    }

    #[test]
    fn quadratic_matches_scalar_recurrence() {
        // J = ½θ², unit divisor.
        let cfg = OptimizerConfig::default();
        let mut p = scalar(1.0);
        let mut st = OptimizerState::zeros_like(&[&p]).unwrap();
        let (mut th, mut m) = (1.0f64, 0.0f64);
        for t in 1..=100 {
            let g = p.data()[0];
            adafisher_step(&mut st, &cfg, &[scalar(g)], &unit_efim(1.0, 1, 1), &mut [&mut p], 0.0).unwrap();
            m = 0.9 * m + 0.1 * th;
            th -= 0.001 * m / (1.0 - 0.9f64.powi(t));
            assert!((p.data()[0] - th).abs() < 1e-12);
        }
    }

    #[test]
    fn decoupled_decay_pure() {
        let cfg = OptimizerConfig {
            lr: 0.01,
            ..OptimizerConfig::default()
        };
        let mut p = Tensor::matrix(1, 2, vec![1.0, -3.0]).unwrap();
        let mut st = OptimizerState::zeros_like(&[&p]).unwrap();
        let g = Tensor::zeros(&[1, 2]).unwrap();
        adafisher_step(&mut st, &cfg, &[g], &unit_efim(1e-3, 1, 2), &mut [&mut p], 0.1).unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-15);
        assert!((p.data()[1] + 3.0 * 0.999).abs() < 1e-15);
        let mut st = OptimizerState::zeros_like(&[&p]).unwrap();
        let g = Tensor::zeros(&[1, 2]).unwrap();
        assert!(adafisher_step(&mut st, &cfg, &[g], &unit_efim(1e-3, 1, 2), &mut [&mut p], -0.1).is_err());
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        let cfg = OptimizerConfig::named(OptimizerName::Adam);
        for g in [0.3, -4.0] {
            let mut p = scalar(0.0);
            let mut a = Adam::new(&[&p], cfg).unwrap();
            a.step(&mut [&mut p], &[scalar(g)]).unwrap();
            let want = -0.001 * g / (g.abs() + 1e-8);
            assert!((p.data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let cfg = OptimizerConfig::named(OptimizerName::Adam);
        let mut p = scalar(1.0);
        let mut a = Adam::new(&[&p], cfg).unwrap();
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = p.data()[0];
            a.step(&mut [&mut p], &[scalar(g)]).unwrap();
            m = 0.9 * m + 0.1 * th;
            v = 0.999 * v + 0.001 * th * th;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= 0.001 * mh / (vh.sqrt() + 1e-8);
            assert!((p.data()[0] - th).abs() < 1e-12);
        }
        let mut z = scalar(0.7);
        let mut a = Adam::new(&[&z], cfg).unwrap();
        for _ in 0..5 {
            a.step(&mut [&mut z], &[scalar(0.0)]).unwrap();
        }
        assert_eq!(z.data()[0], 0.7);
    }

    #[test]
    fn sgd_cases() {
        let mut cfg = OptimizerConfig::named(OptimizerName::Sgd);
        cfg.lr = 0.1;
        // Zero gradient.
        let mut p = scalar(1.0);
        let mut s = Sgd::new(&[&p], cfg).unwrap();
        s.step(&mut [&mut p], &[scalar(0.0)]).unwrap();
        assert_eq!(p.data()[0], 1.0);
        // μ = 0 is plain gradient descent.
        cfg.momentum = 0.0;
        let mut p = scalar(1.0);
        let mut s = Sgd::new(&[&p], cfg).unwrap();
        s.step(&mut [&mut p], &[scalar(2.0)]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        // Heavy ball on ½θ².
        cfg.momentum = 0.9;
        let mut p = scalar(1.0);
        let mut s = Sgd::new(&[&p], cfg).unwrap();
        let (mut th, mut buf) = (1.0f64, 0.0f64);
        for _ in 0..100 {
            let g = p.data()[0];
            s.step(&mut [&mut p], &[scalar(g)]).unwrap();
            buf = 0.9 * buf + th;
            th -= 0.1 * buf;
            assert!((p.data()[0] - th).abs() < 1e-12);
        }
    }

    #[test]
    fn schedules() {
        assert_eq!(Schedule::Constant.lr_at(0.1, 7, 10), 0.1);
        let s = Schedule::Step {
            step_size: 3,
            gamma: 0.5,
        };
        assert_eq!(s.lr_at(0.8, 2, 10), 0.8);
        assert_eq!(s.lr_at(0.8, 3, 10), 0.4);
        let c = Schedule::Cosine { min_lr: 0.0 };
        assert_eq!(c.lr_at(1.0, 0, 10), 1.0);
        assert!((c.lr_at(1.0, 5, 10) - 0.5).abs() < 1e-15);
        assert!(Schedule::Step {
            step_size: 0,
            gamma: 0.5
        }
        .validate()
        .is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = OptimizerConfig::default();
        assert!(c.validate().is_ok());
        c.beta = 1.0;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::default();
        c.gamma = 0.0;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::default();
        c.weight_decay = -1.0;
        assert!(c.validate().is_err());
        let d = OptimizerConfig::default();
        assert_eq!((d.lr, d.beta, d.gamma, d.lambda), (0.001, 0.9, 0.8, 0.001));
        assert_eq!(d.ablation, Ablation::default());
    }
}
