//! Parameter updates for the trainable set: adapter factors, the unshared
//! projection, and the shared token block. Frozen weights never enter a
//! [`TrainState`], so they cannot be updated by construction; handing in a
//! gradient for an unknown name is an error rather than a silent no-op.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::mat::Mat;

pub const DEFAULT_LR: f64 = 3e-5;
pub const DEFAULT_WARMUP_STEPS: usize = 500;
pub const DEFAULT_ACCUMULATION: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Literal `theta <- theta - lr * g`.
    Sgd,
    /// Moment-based update with decoupled weight decay.
    AdamW,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decay is applied to the weights directly, scaled by the current
    /// learning rate, never through the moments. Zero keeps "no gradient,
    /// no movement" exact.
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub accumulation: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: DEFAULT_WARMUP_STEPS,
            accumulation: DEFAULT_ACCUMULATION,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CoreError::InvalidParameter(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CoreError::InvalidParameter(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(CoreError::InvalidParameter("eps must be positive, decay non-negative".into()));
        }
        if self.accumulation == 0 {
            return Err(CoreError::InvalidParameter("accumulation window must be at least 1".into()));
        }
        Ok(())
    }

    /// Linear warmup: ramps from lr/warmup at the first step to the nominal
    /// rate at `warmup_steps`, constant afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Named gradients, one entry per trainable parameter.
pub type GradMap = BTreeMap<String, Mat>;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Moments {
    m: Mat,
    v: Mat,
}

/// The mutable training state: parameters, optimizer moments, and the step
/// counter driving warmup and bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub theta: BTreeMap<String, Mat>,
    pub cfg: OptimConfig,
    moments: BTreeMap<String, Moments>,
    /// Completed optimizer steps (not micro-steps).
    pub step: usize,
}

impl TrainState {
    pub fn new(theta: BTreeMap<String, Mat>, cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        if theta.is_empty() {
            return Err(CoreError::EmptyInput("no trainable parameters".into()));
        }
        Ok(Self { theta, cfg, moments: BTreeMap::new(), step: 0 })
    }

    pub fn param(&self, name: &str) -> Result<&Mat> {
        self.theta
            .get(name)
            .ok_or_else(|| CoreError::InvalidParameter(format!("unknown parameter {name}")))
    }

    fn check_cover(&self, grads: &GradMap) -> Result<()> {
        for name in grads.keys() {
            if !self.theta.contains_key(name) {
                return Err(CoreError::InvalidParameter(format!(
                    "gradient for frozen or unknown parameter {name}"
                )));
            }
        }
        for name in self.theta.keys() {
            if !grads.contains_key(name) {
                return Err(CoreError::InvalidParameter(format!("missing gradient for {name}")));
            }
        }
        Ok(())
    }

    /// One optimizer step over all of theta at the warmup-ramped rate.
    pub fn apply_grads(&mut self, grads: &GradMap) -> Result<()> {
        self.check_cover(grads)?;
        for (name, g) in grads {
            let p = self.theta.get(name).unwrap();
            p.check_same_shape(g)?;
            if !g.data().iter().all(|v| v.is_finite()) {
                return Err(CoreError::NonFinite(format!("gradient for {name}")));
            }
        }
        self.step += 1;
        let lr = self.cfg.lr_at(self.step);
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for (name, g) in grads {
                    let p = self.theta.get_mut(name).unwrap();
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::AdamW => {
                let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                let bc1 = 1.0 - b1.powi(self.step as i32);
                let bc2 = 1.0 - b2.powi(self.step as i32);
                for (name, g) in grads {
                    let p = self.theta.get_mut(name).unwrap();
                    let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                        m: Mat::zeros(p.rows(), p.cols()),
                        v: Mat::zeros(p.rows(), p.cols()),
                    });
                    for i in 0..p.data().len() {
                        let gv = g.data()[i];
                        let m = b1 * mom.m.data()[i] + (1.0 - b1) * gv;
                        let v = b2 * mom.v.data()[i] + (1.0 - b2) * gv * gv;
                        mom.m.data_mut()[i] = m;
                        mom.v.data_mut()[i] = v;
                        let update = (m / bc1) / ((v / bc2).sqrt() + self.cfg.eps);
                        let pv = &mut p.data_mut()[i];
                        *pv -= lr * (update + self.cfg.weight_decay * *pv);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Sums micro-step gradients and releases their mean every `window`
/// pushes, emulating a larger batch.
#[derive(Clone, Debug, Default)]
pub struct GradAccumulator {
    window: usize,
    pending: GradMap,
    count: usize,
}

impl GradAccumulator {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(CoreError::InvalidParameter("accumulation window must be at least 1".into()));
        }
        Ok(Self { window, pending: GradMap::new(), count: 0 })
    }

    /// Returns the averaged gradients once the window fills, `None` before.
    pub fn push(&mut self, grads: GradMap) -> Result<Option<GradMap>> {
        if self.pending.is_empty() && self.count == 0 {
            self.pending = grads;
        } else {
            if grads.len() != self.pending.len() || grads.keys().ne(self.pending.keys()) {
                return Err(CoreError::InvalidParameter(
                    "accumulated gradients must cover the same parameters each micro-step".into(),
                ));
            }
            for (name, g) in grads {
                let acc = self.pending.get_mut(&name).unwrap();
                *acc = acc.add(&g)?;
            }
        }
        self.count += 1;
        if self.count == self.window {
            let scale = 1.0 / self.window as f64;
            let mut out = GradMap::new();
            std::mem::swap(&mut out, &mut self.pending);
            self.count = 0;
            for g in out.values_mut() {
                *g = g.scale(scale);
            }
            Ok(Some(out))
        } else {
            Ok(None)
        }
    }

    pub fn pending_micro_steps(&self) -> usize {
        self.count
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(value: f64, cfg: OptimConfig) -> TrainState {
        let mut theta = BTreeMap::new();
        theta.insert("w".to_string(), Mat::from_vec(1, 1, vec![value]).unwrap());
        TrainState::new(theta, cfg).unwrap()
    }

    fn scalar_grad(value: f64) -> GradMap {
        let mut g = GradMap::new();
        g.insert("w".to_string(), Mat::from_vec(1, 1, vec![value]).unwrap());
        g
    }

    #[test]
    fn plain_sgd_matches_hand_update() {
        let cfg = OptimConfig { kind: OptimizerKind::Sgd, warmup_steps: 0, ..Default::default() };
        let mut st = scalar_state(1.0, cfg);
        st.apply_grads(&scalar_grad(2.0)).unwrap();
        let w = st.param("w").unwrap().get(0, 0);
        assert_eq!(w, 1.0 - 3e-5 * 2.0);
        assert!((w - 0.99994).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_for_both_modes() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::AdamW] {
            let cfg = OptimConfig { kind, warmup_steps: 0, ..Default::default() };
            let mut st = scalar_state(0.7, cfg);
            for _ in 0..3 {
                st.apply_grads(&scalar_grad(0.0)).unwrap();
            }
            assert_eq!(st.param("w").unwrap().get(0, 0), 0.7);
            assert_eq!(st.step, 3);
        }
    }

    #[test]
    fn gradient_cover_must_match_theta_exactly() {
        let mut st = scalar_state(1.0, OptimConfig::default());

        let mut extra = scalar_grad(1.0);
        extra.insert("frozen_base".to_string(), Mat::zeros(1, 1));
        assert!(st.apply_grads(&extra).is_err());

        assert!(st.apply_grads(&GradMap::new()).is_err());

        let mut nan = GradMap::new();
        nan.insert("w".to_string(), Mat::from_vec(1, 1, vec![f64::NAN]).unwrap());
        assert!(st.apply_grads(&nan).is_err());
        assert_eq!(st.param("w").unwrap().get(0, 0), 1.0);
    }

    #[test]
    fn warmup_ramps_linearly_to_nominal() {
        let cfg = OptimConfig::default();
        assert_eq!(cfg.lr_at(250), DEFAULT_LR / 2.0);
        assert_eq!(cfg.lr_at(500), DEFAULT_LR);
        assert_eq!(cfg.lr_at(5000), DEFAULT_LR);
        assert_eq!(cfg.lr_at(0), 0.0);
        assert!((cfg.lr_at(1) - DEFAULT_LR / 500.0).abs() < 1e-18);
    }

    #[test]
    fn adamw_matches_scalar_reference_loop() {
        let cfg = OptimConfig {
            kind: OptimizerKind::AdamW,
            lr: 1e-2,
            weight_decay: 0.1,
            warmup_steps: 0,
            ..Default::default()
        };
        let mut st = scalar_state(0.5, cfg);
        let grads = [0.3, -1.2, 0.05, 0.9, -0.4];

        // Independent reference: textbook update written out longhand.
        let (mut theta, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (k, &g) in grads.iter().enumerate() {
            let t = (k + 1) as f64;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powf(t));
            let v_hat = v / (1.0 - 0.999f64.powf(t));
            theta = theta - 1e-2 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.1 * theta);
        }

        for &g in &grads {
            st.apply_grads(&scalar_grad(g)).unwrap();
        }
        assert!((st.param("w").unwrap().get(0, 0) - theta).abs() < 1e-14);
    }

    #[test]
    fn decay_is_decoupled_from_the_moment_path() {
        // A huge gradient saturates the moment update at +/- 1; decay must
        // still scale with the raw weight value, not the gradient.
        let cfg = OptimConfig {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            weight_decay: 0.5,
            warmup_steps: 0,
            ..Default::default()
        };
        let mut st = scalar_state(100.0, cfg);
        st.apply_grads(&scalar_grad(1e9)).unwrap();
        let w = st.param("w").unwrap().get(0, 0);
        // Moment term contributes ~lr, decay contributes lr * 0.5 * 100.
        assert!((w - (100.0 - 1e-3 * (1.0 - 1e-8) - 1e-3 * 50.0)).abs() < 1e-9);
    }

    #[test]
    fn accumulator_averages_each_full_window() {
        let mut acc = GradAccumulator::new(4).unwrap();
        for i in 0..3 {
            assert!(acc.push(scalar_grad(i as f64)).unwrap().is_none());
        }
        let out = acc.push(scalar_grad(3.0)).unwrap().unwrap();
        assert_eq!(out["w"].get(0, 0), (0.0 + 1.0 + 2.0 + 3.0) / 4.0);
        assert_eq!(acc.pending_micro_steps(), 0);

        // The next window starts clean.
        for _ in 0..3 {
            assert!(acc.push(scalar_grad(8.0)).unwrap().is_none());
        }
        assert_eq!(acc.push(scalar_grad(8.0)).unwrap().unwrap()["w"].get(0, 0), 8.0);

        let mut mismatched = GradMap::new();
        mismatched.insert("other".to_string(), Mat::zeros(1, 1));
        acc.push(scalar_grad(1.0)).unwrap();
        assert!(acc.push(mismatched).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let bad_lr = OptimConfig { lr: 0.0, ..Default::default() };
        assert!(bad_lr.validate().is_err());
        let bad_beta = OptimConfig { beta1: 1.0, ..Default::default() };
        assert!(bad_beta.validate().is_err());
        let bad_acc = OptimConfig { accumulation: 0, ..Default::default() };
        assert!(bad_acc.validate().is_err());
        assert!(GradAccumulator::new(0).is_err());
    }
}
