//! Recovery of a consistent ground-truth velocity by training the
//! single-segment consistency loss on the matching deterministic coupling.

use super::AffineOracle;
use crate::datasets::DistributionSpec;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::losses::SegmentSchedule;
use crate::nd::NumArray;
use crate::net::{NetConfig, ParamSet, VelocityField};
use crate::paths::{Coupling, PathSpec};
use crate::trainer::{Objective, TrainSettings, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryConfig {
    pub net: NetConfig,
    pub settings: TrainSettings,
    pub dt: f64,
    pub alpha: f64,
    pub steps: u64,
    pub seed: u64,
    /// Test grid covers `[-w, w]^d`.
    pub box_half_width: f64,
    /// Grid points per axis.
    pub grid_points: usize,
    /// Times evenly spaced on `[0, t_max]`.
    pub time_points: usize,
    pub t_max: f64,
    /// Only grid points whose oracle preimage `x0` satisfies `‖x0‖ ≤ r` count.
    pub support_radius: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            settings: TrainSettings::default(),
            dt: 0.01,
            alpha: 1.0,
            steps: 20_000,
            seed: 0,
            box_half_width: 3.0,
            grid_points: 25,
            time_points: 12,
            t_max: 0.99,
            support_radius: 3.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RecoveryReport {
    /// Max grid error of the untrained EMA field.
    pub initial_error: f64,
    /// Max grid error of the trained EMA field.
    pub final_error: f64,
    pub grid_points_used: usize,
    pub steps: u64,
    pub final_field: VelocityField,
}

/// Grid of `(t, x)` points inside the data-supported region.
fn test_grid(oracle: &AffineOracle, cfg: &RecoveryConfig) -> Result<(Vec<f64>, NumArray)> {
    let d = oracle.dim();
    if cfg.grid_points < 2
        || cfg.time_points < 2
        || !(cfg.box_half_width > 0.0)
        || !(0.0..1.0).contains(&cfg.t_max)
    {
        return Err(Error::Invalid(format!(
            "recovery grid out of range: {cfg:?}"
        )));
    }
    let w = cfg.box_half_width;
    let axis: Vec<f64> = (0..cfg.grid_points)
        .map(|i| -w + 2.0 * w * i as f64 / (cfg.grid_points - 1) as f64)
        .collect();
    let mut ts = Vec::new();
    let mut rows = Vec::new();
    let cells = cfg.grid_points.pow(d as u32);
    for k in 0..cfg.time_points {
        let t = cfg.t_max * k as f64 / (cfg.time_points - 1) as f64;
        for mut c in 0..cells {
            let mut x = Vec::with_capacity(d);
            for _ in 0..d {
                x.push(axis[c % cfg.grid_points]);
                c /= cfg.grid_points;
            }
            let x0 = oracle.preimage(t, &x)?;
            if x0.iter().map(|v| v * v).sum::<f64>().sqrt() <= cfg.support_radius {
                ts.push(t);
                rows.push(x);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Invalid(
            "no grid point lies in the supported region".into(),
        ));
    }
    Ok((ts, NumArray::from_rows(&rows)?))
}

fn max_error(field: &dyn Field, oracle: &AffineOracle, t: &[f64], x: &NumArray) -> Result<f64> {
    let v = field.velocity(t, x)?;
    let u = oracle.velocity(t, x)?;
    let worst = v
        .iter_rows()
        .zip(u.iter_rows())
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    if !worst.is_finite() {
        return Err(Error::NonFinite("recovery error".into()));
    }
    Ok(worst)
}

/// Trains the K = 1 segment loss on `x1 = A x0 + b` with `x0 ~ N(0, I)` along
/// the linear path, then measures `max ‖v_θ⁻(t, x) − u(t, x)‖` on the grid.
pub fn corollary_recovery_test(
    oracle: &AffineOracle,
    cfg: &RecoveryConfig,
) -> Result<RecoveryReport> {
    let d = oracle.dim();
    if cfg.net.data_dim != d {
        return Err(Error::Shape(format!(
            "network dimension {} but oracle dimension {d}",
            cfg.net.data_dim
        )));
    }
    let (t, x) = test_grid(oracle, cfg)?;
    let path = PathSpec::linear(Coupling::Affine {
        source: DistributionSpec::StandardGaussian { dim: d },
        map: oracle.map(),
    });
    let field = VelocityField::init(cfg.net.clone(), cfg.seed)?;
    let initial_error = max_error(&field.view(ParamSet::Ema), oracle, &t, &x)?;
    let schedule = SegmentSchedule::new(1, vec![1.0], cfg.dt, cfg.alpha)?;
    let mut trainer = Trainer::new(
        field,
        Objective::MultiSegment(schedule),
        cfg.settings.clone(),
        cfg.seed,
    )?;
    trainer.run(&path, None, cfg.steps, |_, _| Ok(()))?;
    let final_error = max_error(&trainer.field.view(ParamSet::Ema), oracle, &t, &x)?;
    Ok(RecoveryReport {
        initial_error,
        final_error,
        grid_points_used: t.len(),
        steps: cfg.steps,
        final_field: trainer.field,
    })
}
