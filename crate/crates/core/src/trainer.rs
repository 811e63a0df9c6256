//! The optimization loop: sample a batch, evaluate the objective,
//! backpropagate, take an Adam step and refresh the EMA target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    cfm_loss, distill_loss, multisegment_loss, velocity_consistency_loss, LossOutput, LossReport,
    SegmentSchedule, Teacher,
};
use crate::nd::{AdamConfig, AdamState};
use crate::net::VelocityField;
use crate::paths::PathSpec;
use crate::rng::{stream_rng, Rng, Stream};

#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    Cfm,
    Consistency { dt: f64, alpha: f64 },
    MultiSegment(SegmentSchedule),
    Distill { dt: f64, alpha: f64 },
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match self {
            Objective::Cfm => Ok(()),
            Objective::Consistency { dt, alpha } | Objective::Distill { dt, alpha } => {
                SegmentSchedule::new(1, vec![1.0], *dt, *alpha).map(|_| ())
            }
            Objective::MultiSegment(s) => s.validate(),
        }
    }

    pub fn segments(&self) -> usize {
        match self {
            Objective::MultiSegment(s) => s.segments,
            _ => 1,
        }
    }
}

/// Learning-rate multiplier as a function of the step index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from 1 down to `floor` over `steps`, then flat.
    Cosine {
        steps: u64,
        floor: f64,
    },
}

impl LrSchedule {
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { steps, floor } => {
                let p = step.min(steps) as f64 / steps.max(1) as f64;
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub adam: AdamConfig,
    pub ema_decay: f64,
    pub batch: usize,
    pub lr_schedule: LrSchedule,
    /// Rescales the full gradient to at most this Euclidean norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            ema_decay: 0.999,
            batch: 256,
            lr_schedule: LrSchedule::Constant,
            grad_clip: None,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Invalid(format!(
                "EMA decay {} outside [0, 1]",
                self.ema_decay
            )));
        }
        if self.batch == 0 {
            return Err(Error::Invalid("batch must be at least 1".into()));
        }
        if let LrSchedule::Cosine { steps, floor } = self.lr_schedule {
            if steps == 0 || !(0.0..=1.0).contains(&floor) {
                return Err(Error::Invalid(format!(
                    "cosine schedule needs steps >= 1 and floor in [0, 1]: {:?}",
                    self.lr_schedule
                )));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Invalid(format!(
                    "gradient clip must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossReport,
    /// Euclidean norm of the full gradient before clipping.
    pub grad_norm: f64,
}

/// Owns the field being trained, its optimizer state and the data stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub field: VelocityField,
    pub objective: Objective,
    pub settings: TrainSettings,
    adam: AdamState,
    rng: Rng,
}

impl Trainer {
    /// Data batches come from the `Data` stream of `seed`.
    pub fn new(
        field: VelocityField,
        objective: Objective,
        settings: TrainSettings,
        seed: u64,
    ) -> Result<Self> {
        objective.validate()?;
        settings.validate()?;
        let adam = AdamState::new(settings.adam, field.params(crate::net::ParamSet::Online));
        Ok(Self {
            field,
            objective,
            settings,
            adam,
            rng: stream_rng(seed, Stream::Data),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Position of the data stream, in 32-bit words consumed.
    pub fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Restores optimizer state and stream position saved from an earlier run.
    pub fn resume(&mut self, adam: AdamState, rng_word_pos: u128) -> Result<()> {
        let params = self.field.params(crate::net::ParamSet::Online);
        if adam.m.len() != params.len()
            || adam
                .m
                .iter()
                .zip(params)
                .any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::Shape(
                "optimizer state does not match the network layout".into(),
            ));
        }
        self.adam = adam;
        self.rng.set_word_pos(rng_word_pos);
        Ok(())
    }

    fn loss(&mut self, path: &PathSpec, teacher: Option<Teacher<'_>>) -> Result<LossOutput> {
        let n = self.settings.batch;
        match (&self.objective, teacher) {
            (Objective::Cfm, _) => cfm_loss(&self.field, path, n, &mut self.rng),
            (Objective::Consistency { dt, alpha }, _) => {
                velocity_consistency_loss(&self.field, path, n, *dt, *alpha, &mut self.rng)
            }
            (Objective::MultiSegment(s), _) => {
                multisegment_loss(&self.field, path, s, n, &mut self.rng)
            }
            (Objective::Distill { dt, alpha }, Some(t)) => {
                distill_loss(&self.field, t, path, n, *dt, *alpha, &mut self.rng)
            }
            (Objective::Distill { .. }, None) => {
                Err(Error::Invalid("distillation needs a teacher".into()))
            }
        }
    }

    /// One optimization step. Parameters are left untouched if the loss or
    /// gradient is not finite.
    pub fn step(&mut self, path: &PathSpec, teacher: Option<Teacher<'_>>) -> Result<StepReport> {
        let out = self.loss(path, teacher)?;
        if !out.report.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {}",
                self.adam.step + 1
            )));
        }
        let grad_norm = out
            .grads
            .iter()
            .map(|g| g.squared_norm())
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient at step {}",
                self.adam.step + 1
            )));
        }
        let mut grads = out.grads;
        if let Some(clip) = self.settings.grad_clip {
            if grad_norm > clip {
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= clip / grad_norm);
                }
            }
        }
        self.adam.config.lr =
            self.settings.adam.lr * self.settings.lr_schedule.factor(self.adam.step);
        self.adam.step(self.field.online_mut(), &grads)?;
        self.field.ema_update(self.settings.ema_decay)?;
        Ok(StepReport {
            step: self.adam.step,
            loss: out.report,
            grad_norm,
        })
    }

    /// Runs `steps` steps, calling `observe` after each one.
    pub fn run(
        &mut self,
        path: &PathSpec,
        teacher: Option<Teacher<'_>>,
        steps: u64,
        mut observe: impl FnMut(&StepReport, &VelocityField) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let report = self.step(path, teacher)?;
            observe(&report, &self.field)?;
        }
        Ok(())
    }
}
