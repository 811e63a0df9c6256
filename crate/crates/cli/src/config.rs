//! Run configuration: one JSON document per run, unknown keys rejected.

use std::path::{Path, PathBuf};

use cfm_core::datasets::DistributionSpec;
use cfm_core::losses::{SegmentSchedule, WeightPreset};
use cfm_core::net::NetConfig;
use cfm_core::paths::{AffineMap, Coupling, PathKind, PathSpec};
use cfm_core::trainer::{Objective, TrainSettings};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Cfm,
    Consistency,
    Multisegment,
    Distill,
}

/// How training pairs `(x0, x1)` are formed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CouplingKind {
    /// `x0 ~ source`, `x1 ~ target` independently.
    Independent,
    /// `x1 = A x0 + b`; `target` is ignored for training.
    Affine { map: AffineMap },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub loss: LossKind,
    pub source: DistributionSpec,
    pub target: DistributionSpec,
    pub coupling: CouplingKind,
    pub path: PathKind,
    pub segments: usize,
    pub alpha: f64,
    pub dt: f64,
    pub weights: WeightPreset,
    pub net: NetConfig,
    pub train: TrainSettings,
    pub steps: u64,
    pub seed: u64,
    /// Metrics row and checkpoint every this many steps; 0 logs only at the end.
    pub eval_every: u64,
    pub eval_samples: usize,
    /// NFE of the sampler used for `w2_eval` and `energy_eval`.
    pub eval_nfe: usize,
    pub out_dir: PathBuf,
    /// Checkpoint of the flow-matching teacher (distill only).
    pub teacher: Option<PathBuf>,
    /// Start the student from the teacher's EMA weights (distill only).
    pub init_from_teacher: bool,
    /// Record elapsed time in the metrics CSV; off keeps reruns byte-identical.
    pub log_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Consistency,
            source: DistributionSpec::StandardGaussian { dim: 2 },
            target: DistributionSpec::eight_gaussians(),
            coupling: CouplingKind::Independent,
            path: PathKind::Linear,
            segments: 1,
            alpha: 1.0,
            dt: 0.01,
            weights: WeightPreset::Uniform,
            net: NetConfig::default(),
            train: TrainSettings::default(),
            steps: 20_000,
            seed: 0,
            eval_every: 1_000,
            eval_samples: 512,
            eval_nfe: 2,
            out_dir: PathBuf::from("runs/default"),
            teacher: None,
            init_from_teacher: false,
            log_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        self.path_spec()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.target
            .validate()
            .map_err(|e| CliError::Usage(format!("target: {e}")))?;
        self.net
            .validate()
            .map_err(|e| CliError::Usage(format!("net: {e}")))?;
        self.train
            .validate()
            .map_err(|e| CliError::Usage(format!("train: {e}")))?;
        self.objective()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if self.net.data_dim != self.source.dim() || self.target.dim() != self.source.dim() {
            return usage(format!(
                "dimensions disagree: net {}, source {}, target {}",
                self.net.data_dim,
                self.source.dim(),
                self.target.dim()
            ));
        }
        if self.eval_samples == 0 || self.eval_samples > cfm_core::metrics::MAX_EXACT_W2 {
            return usage(format!(
                "eval_samples must be in 1..={}",
                cfm_core::metrics::MAX_EXACT_W2
            ));
        }
        if self.eval_nfe == 0 {
            return usage("eval_nfe must be at least 1".into());
        }
        match self.loss {
            LossKind::Distill => {
                if self.segments != 1 {
                    return usage(format!(
                        "distillation uses a single segment, got segments = {}",
                        self.segments
                    ));
                }
                if self.teacher.is_none() {
                    return usage("distillation needs a teacher checkpoint".into());
                }
            }
            LossKind::Multisegment => {}
            _ if self.segments != 1 => {
                return usage(format!(
                    "segments = {} needs loss \"multisegment\"",
                    self.segments
                ));
            }
            _ => {}
        }
        if self.loss != LossKind::Distill && (self.teacher.is_some() || self.init_from_teacher) {
            return usage("teacher settings only apply to distillation".into());
        }
        Ok(())
    }

    pub fn coupling(&self) -> Coupling {
        match &self.coupling {
            CouplingKind::Independent => Coupling::Independent {
                source: self.source.clone(),
                target: self.target.clone(),
            },
            CouplingKind::Affine { map } => Coupling::Affine {
                source: self.source.clone(),
                map: map.clone(),
            },
        }
    }

    pub fn path_spec(&self) -> cfm_core::Result<PathSpec> {
        PathSpec::new(self.path.clone(), self.coupling())
    }

    pub fn objective(&self) -> cfm_core::Result<Objective> {
        let obj = match self.loss {
            LossKind::Cfm => Objective::Cfm,
            LossKind::Consistency => Objective::Consistency {
                dt: self.dt,
                alpha: self.alpha,
            },
            LossKind::Multisegment => Objective::MultiSegment(SegmentSchedule::with_preset(
                self.segments,
                self.weights,
                self.dt,
                self.alpha,
            )?),
            LossKind::Distill => Objective::Distill {
                dt: self.dt,
                alpha: self.alpha,
            },
        };
        obj.validate()?;
        Ok(obj)
    }
}
