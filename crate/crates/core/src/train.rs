//! The training driver: micro-steps over windows of consecutive frames,
//! gradient accumulation, warmup, per-step loss curves, and checkpoints
//! that carry exactly the trainable set.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{is_active, ActivationWindow, LossWeights};
use crate::denoiser::{DenoiserSnapshot, ToyDenoiser, TrainScope};
use crate::error::{CoreError, Result};
use crate::grid::{Grid, NoiseSpec};
use crate::mat::Mat;
use crate::optim::{GradAccumulator, GradMap, OptimConfig, TrainState};
use crate::pipeline::{Codec, FrameClip};
use crate::schedule::{add_noise, NoiseSchedule};
use crate::tape::Tape;
use crate::tokens::temporal_gate_open;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Micro-steps; the optimizer fires once per accumulation window.
    pub steps: usize,
    pub scope: TrainScope,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    /// Timesteps are sampled uniformly from this fraction-of-schedule
    /// window.
    pub window: ActivationWindow,
    /// Consecutive frames per micro-step; the temporal term needs at
    /// least 3.
    pub frames_per_step: usize,
    pub codec: Codec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            scope: TrainScope::AdapterOnly,
            optim: OptimConfig::default(),
            weights: LossWeights::default(),
            window: ActivationWindow::train_default(),
            frames_per_step: 4,
            codec: Codec::Pool2x,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the desk-scale runs: the defaults above describe a
    /// full-size job, while toy clips need a hotter schedule to move in a
    /// few hundred optimizer steps. The temporal weight is raised because
    /// the toy net's temporal term sits at ~1e-4 scale and would otherwise
    /// be swamped by the diffusion gradient.
    pub fn toy_profile() -> Self {
        Self {
            optim: OptimConfig { lr: 3e-3, warmup_steps: 50, ..OptimConfig::default() },
            frames_per_step: 3,
            weights: LossWeights { lambda_temporal: 10.0, lambda_diffusion: 0.01 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.weights.validate()?;
        if self.scope == TrainScope::Frozen {
            return Err(CoreError::InvalidParameter("nothing to train with a frozen scope".into()));
        }
        if self.weights.lambda_temporal > 0.0 && self.frames_per_step < 3 {
            return Err(CoreError::InvalidParameter(format!(
                "the temporal term needs at least 3 frames per step, got {}",
                self.frames_per_step
            )));
        }
        if self.frames_per_step == 0 {
            return Err(CoreError::InvalidParameter("frames_per_step must be positive".into()));
        }
        Ok(())
    }
}

/// One micro-step of the loss curve.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub t: usize,
    /// Rate the next optimizer step will use.
    pub lr: f64,
    pub temporal: f64,
    pub diffusion: f64,
    pub total: f64,
    /// Whether this micro-step completed an accumulation window.
    pub applied: bool,
}

/// Exactly the trainable set, plus the full toy weights when training
/// started from scratch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub theta: BTreeMap<String, Mat>,
    pub denoiser: Option<DenoiserSnapshot>,
    pub config: serde_json::Value,
    pub optimizer_steps: usize,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Load the trainable set into a model; full snapshots replace the
    /// model outright.
    pub fn apply_to(&self, d: &mut ToyDenoiser) -> Result<()> {
        if let Some(snap) = &self.denoiser {
            *d = ToyDenoiser::from_snapshot(snap.clone())?;
            return Ok(());
        }
        for (name, w) in d.weight_refs_mut() {
            if let Some(saved) = self.theta.get(name) {
                saved.check_same_shape(w)?;
                *w = saved.clone();
            }
        }
        d.trained = true;
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curves: Vec<StepLog>,
}

fn active_timesteps(t_total: usize, w: &ActivationWindow) -> Result<Vec<usize>> {
    let ts: Vec<usize> =
        (1..=t_total).filter(|&t| is_active(t, t_total, w).unwrap_or(false)).collect();
    if ts.is_empty() {
        return Err(CoreError::InvalidParameter(format!(
            "window [{}, {}] contains no timestep of a {t_total}-step schedule",
            w.lo, w.hi
        )));
    }
    Ok(ts)
}

fn theta_from(d: &ToyDenoiser, scope: TrainScope) -> BTreeMap<String, Mat> {
    let adapter_names =
        ["adapter_aq", "adapter_bq", "adapter_ak", "adapter_bk", "adapter_av", "adapter_bv"];
    d.weight_refs()
        .into_iter()
        .filter(|(name, _)| scope == TrainScope::Full || adapter_names.contains(name))
        .map(|(name, m)| (name.to_string(), m.clone()))
        .collect()
}

fn write_back(d: &mut ToyDenoiser, theta: &BTreeMap<String, Mat>) {
    for (name, w) in d.weight_refs_mut() {
        if let Some(updated) = theta.get(name) {
            *w = updated.clone();
        }
    }
}

/// Run the training loop, mutating `d` in place and returning the
/// checkpoint and per-step loss curves.
pub fn train_driver(
    d: &mut ToyDenoiser,
    clips: &[FrameClip<f64>],
    s: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(CoreError::EmptyInput("no training clips".into()));
    }
    if s.t_total() != d.cfg.t_total {
        return Err(CoreError::InvalidParameter(format!(
            "schedule has {} steps but the model expects {}",
            s.t_total(),
            d.cfg.t_total
        )));
    }

    // Encode every clip up front; training repeats over the same latents.
    let mut latents = Vec::with_capacity(clips.len());
    let mut controls = Vec::with_capacity(clips.len());
    for clip in clips {
        if clip.n_frames() < cfg.frames_per_step {
            return Err(CoreError::InvalidParameter(format!(
                "clip {} has {} frames, fewer than the {}-frame step window",
                clip.id,
                clip.n_frames(),
                cfg.frames_per_step
            )));
        }
        latents.push(cfg.codec.encode(&clip.frames)?);
        controls.push(match &clip.control {
            Some(c) => Some(cfg.codec.encode(&c.grid)?),
            None => None,
        });
    }

    let ts = active_timesteps(s.t_total(), &cfg.window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState::new(theta_from(d, cfg.scope), cfg.optim)?;
    let mut acc = GradAccumulator::new(cfg.optim.accumulation)?;
    let mut curves = Vec::with_capacity(cfg.steps);
    // Base weights stay at their pretrained values during adapter runs.
    let adapter_on = cfg.scope == TrainScope::AdapterOnly;

    for step in 1..=cfg.steps {
        let which = (step - 1) % clips.len();
        let z = &latents[which];
        let n_frames = z.shape().batch;
        let start = rng.gen_range(0..=n_frames - cfg.frames_per_step);
        let t = ts[rng.gen_range(0..ts.len())];

        let eps = Grid::<f64>::noise(z.shape(), &NoiseSpec::standard(rng.gen()));
        let x_t = add_noise(z, t, &eps, s)?;

        let mut tape = Tape::new();
        let vars = d.vars(&mut tape, cfg.scope);
        let mut features = Vec::with_capacity(cfg.frames_per_step);
        let mut diff_terms = Vec::with_capacity(cfg.frames_per_step);
        for f in start..start + cfg.frames_per_step {
            let tokens = d.input_tokens(&x_t, controls[which].as_ref(), f)?;
            let pred = d.forward_tape(&mut tape, &vars, tokens, t, None, adapter_on)?;
            let target = crate::denoiser::grid_item_tokens(&eps, f)?;
            let target = tape.leaf_const(target);
            diff_terms.push(tape.mse(pred.eps_tokens, target)?);
            features.push(pred.decoder_features);
        }

        let mut diff_sum = diff_terms[0];
        for &term in &diff_terms[1..] {
            diff_sum = tape.add(diff_sum, term)?;
        }
        let diffusion = tape.scale(diff_sum, 1.0 / cfg.frames_per_step as f64);

        let gate = temporal_gate_open(t, s.t_total());
        let use_temporal =
            gate && cfg.weights.lambda_temporal > 0.0 && cfg.frames_per_step >= 3;
        let temporal = if use_temporal {
            Some(crate::adapter::temporal_loss_tape(&mut tape, &features)?)
        } else {
            None
        };

        let weighted_diff = tape.scale(diffusion, cfg.weights.lambda_diffusion);
        let loss = match temporal {
            Some(lt) => {
                let weighted_t = tape.scale(lt, cfg.weights.lambda_temporal);
                tape.add(weighted_t, weighted_diff)?
            }
            None => weighted_diff,
        };

        let temporal_value = temporal.map(|v| tape.value(v).get(0, 0)).unwrap_or(0.0);
        let diffusion_value = tape.value(diffusion).get(0, 0);
        let total_value = tape.value(loss).get(0, 0);
        if !total_value.is_finite() {
            return Err(CoreError::TrainingAborted {
                step,
                reason: format!(
                    "non-finite loss (temporal {temporal_value}, diffusion {diffusion_value})"
                ),
            });
        }

        let grads = tape.backward(loss)?;
        let mut gmap = GradMap::new();
        for (name, var) in vars.trainable(cfg.scope) {
            gmap.insert(name.to_string(), grads.get(&tape, var));
        }

        let mut applied = false;
        if let Some(avg) = acc.push(gmap)? {
            state.apply_grads(&avg)?;
            write_back(d, &state.theta);
            applied = true;
        }

        curves.push(StepLog {
            step,
            t,
            lr: cfg.optim.lr_at(state.step + 1),
            temporal: temporal_value,
            diffusion: diffusion_value,
            total: total_value,
            applied,
        });
    }

    if cfg.steps > 0 {
        d.trained = true;
    }
    let checkpoint = Checkpoint {
        theta: state.theta.clone(),
        denoiser: (cfg.scope == TrainScope::Full).then(|| d.snapshot()),
        config: serde_json::to_value(cfg)?,
        optimizer_steps: state.step,
    };
    Ok(TrainOutcome { checkpoint, curves })
}

/// Mean of the `temporal` column over a step range, for convergence checks.
pub fn temporal_moving_average(curves: &[StepLog], from_step: usize, to_step: usize) -> Result<f64> {
    let vals: Vec<f64> = curves
        .iter()
        .filter(|l| l.step >= from_step && l.step <= to_step)
        .map(|l| l.temporal)
        .collect();
    if vals.is_empty() {
        return Err(CoreError::EmptyInput(format!("no steps logged in [{from_step}, {to_step}]")));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ToyDenoiserConfig;
    use crate::pipeline::{synthetic_clip, ShapeKind, SyntheticClipSpec};
    use crate::schedule::build_schedule;

    fn tiny_model() -> (ToyDenoiser, NoiseSchedule) {
        let cfg = ToyDenoiserConfig {
            height: 8,
            width: 8,
            d_feat: 8,
            d_cond: 0,
            t_total: 100,
            seed: 7,
            ..Default::default()
        };
        let s = build_schedule(100, 1e-4, 0.02).unwrap();
        (ToyDenoiser::init(cfg).unwrap(), s)
    }

    fn tiny_clip(seed: u64) -> FrameClip<f64> {
        let spec = SyntheticClipSpec {
            frames: 4,
            height: 8,
            width: 8,
            kind: ShapeKind::Square,
            start: (2.0, 2.0),
            velocity: (0.7, 0.4),
            half_size: 1.5,
            texture_noise: 0.02,
            seed,
            ..Default::default()
        };
        synthetic_clip(&spec).unwrap().clip
    }

    fn tiny_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            frames_per_step: 3,
            codec: Codec::Identity,
            optim: OptimConfig {
                lr: 3e-3,
                warmup_steps: 10,
                accumulation: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_step_run_checkpoints_the_initialization() {
        let (mut d, s) = tiny_model();
        let before = d.fingerprint();
        let out = train_driver(&mut d, &[tiny_clip(1)], &s, &tiny_cfg(0)).unwrap();
        assert!(out.curves.is_empty());
        assert_eq!(out.checkpoint.optimizer_steps, 0);
        assert_eq!(d.fingerprint(), before);
        assert!(!d.trained);
        for (name, m) in d.weight_refs() {
            if let Some(saved) = out.checkpoint.theta.get(name) {
                assert_eq!(saved.data(), m.data(), "{name} drifted");
            }
        }
    }

    #[test]
    fn adapter_training_leaves_base_weights_bit_identical() {
        let (mut d, s) = tiny_model();
        let base_before: Vec<(String, Vec<f64>)> = d
            .weight_refs()
            .iter()
            .filter(|(n, _)| !n.starts_with("adapter_"))
            .map(|(n, m)| (n.to_string(), m.data().to_vec()))
            .collect();

        let out = train_driver(&mut d, &[tiny_clip(2)], &s, &tiny_cfg(8)).unwrap();
        assert_eq!(out.curves.len(), 8);
        assert!(d.trained);

        for (name, m) in d.weight_refs() {
            if let Some((_, before)) = base_before.iter().find(|(n, _)| n == name) {
                assert_eq!(before, m.data(), "frozen weight {name} moved");
            }
        }
        // B factors left zero initialization.
        let moved = d.adapters.q.b.data().iter().any(|&v| v != 0.0)
            || d.adapters.k.b.data().iter().any(|&v| v != 0.0)
            || d.adapters.v.b.data().iter().any(|&v| v != 0.0);
        assert!(moved, "adapter factors never received an update");
        assert!(out.checkpoint.denoiser.is_none());
        assert_eq!(out.checkpoint.theta.len(), 6);
    }

    #[test]
    fn optimizer_fires_once_per_accumulation_window() {
        let (mut d, s) = tiny_model();
        let out = train_driver(&mut d, &[tiny_clip(3)], &s, &tiny_cfg(10)).unwrap();
        let applied: Vec<usize> =
            out.curves.iter().filter(|l| l.applied).map(|l| l.step).collect();
        assert_eq!(applied, vec![4, 8]);
        assert_eq!(out.checkpoint.optimizer_steps, 2);
        // Warmup rate recorded for the upcoming step.
        assert!((out.curves[0].lr - 3e-3 / 10.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_loss_aborts_with_the_offending_step() {
        let (mut d, s) = tiny_model();
        d.w.head.set(0, 0, f64::NAN);
        let err = train_driver(&mut d, &[tiny_clip(4)], &s, &tiny_cfg(6)).unwrap_err();
        match err {
            CoreError::TrainingAborted { step, .. } => assert_eq!(step, 1),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn full_scope_checkpoint_restores_an_identical_model() {
        let (mut d, s) = tiny_model();
        let cfg = TrainConfig { scope: TrainScope::Full, ..tiny_cfg(8) };
        let out = train_driver(&mut d, &[tiny_clip(5)], &s, &cfg).unwrap();

        let snap = out.checkpoint.denoiser.as_ref().unwrap();
        assert!(snap.trained);
        let restored = Checkpoint::from_json(&out.checkpoint.to_json().unwrap()).unwrap();
        let (mut fresh, _) = tiny_model();
        restored.apply_to(&mut fresh).unwrap();
        assert_eq!(fresh.fingerprint(), d.fingerprint());
    }

    #[test]
    fn adapter_checkpoint_applies_onto_a_fresh_model() {
        let (mut d, s) = tiny_model();
        let out = train_driver(&mut d, &[tiny_clip(6)], &s, &tiny_cfg(8)).unwrap();

        let (mut fresh, _) = tiny_model();
        out.checkpoint.apply_to(&mut fresh).unwrap();
        assert!(fresh.trained);
        assert_eq!(fresh.fingerprint(), d.fingerprint());
    }

    #[test]
    fn temporal_component_trends_down_on_a_toy_run() {
        let (mut d, s) = tiny_model();
        let clips = [tiny_clip(7), tiny_clip(8)];
        let out = train_driver(&mut d, &clips, &s, &tiny_cfg(160)).unwrap();
        let early = temporal_moving_average(&out.curves, 1, 40).unwrap();
        let late = temporal_moving_average(&out.curves, 121, 160).unwrap();
        assert!(
            late < early,
            "temporal loss did not decrease: early {early}, late {late}"
        );
    }

    #[test]
    fn driver_rejects_inconsistent_setups() {
        let (mut d, s) = tiny_model();
        assert!(train_driver(&mut d, &[], &s, &tiny_cfg(1)).is_err());

        let frozen = TrainConfig { scope: TrainScope::Frozen, ..tiny_cfg(1) };
        assert!(train_driver(&mut d, &[tiny_clip(9)], &s, &frozen).is_err());

        let short = TrainConfig { frames_per_step: 2, ..tiny_cfg(1) };
        assert!(train_driver(&mut d, &[tiny_clip(9)], &s, &short).is_err());

        let wrong_t = build_schedule(50, 1e-4, 0.02).unwrap();
        assert!(train_driver(&mut d, &[tiny_clip(9)], &wrong_t, &tiny_cfg(1)).is_err());
    }
}
