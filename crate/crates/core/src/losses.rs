//! Training objectives: conditional flow matching, velocity consistency,
//! multi-segment consistency and consistency distillation.
//!
//! Every consistency-type objective compares the online network at
//! `(t, x_t)` with the EMA network at `(t + Δt, x_{t+Δt})`. The EMA branch is
//! recorded behind a detach node, so its parameters never receive gradient;
//! the gradients reported for them are read off the tape, not assumed.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_time, Error, Result};
use crate::field::Field;
use crate::nd::{NumArray, Tape, Var};
use crate::net::{ParamSet, VelocityField};
use crate::paths::{conditional_velocities, path_points, tuples_at, PathSpec};
use crate::rng::{uniform, Rng};

/// Preset for the per-segment weights λ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightPreset {
    #[default]
    Uniform,
    /// `λ_i ∝ 1 + sin(π (i + ½) / K)`, normalized to mean one.
    MiddleWeighted,
}

impl WeightPreset {
    pub fn weights(self, segments: usize) -> Vec<f64> {
        match self {
            WeightPreset::Uniform => vec![1.0; segments],
            WeightPreset::MiddleWeighted => {
                let raw: Vec<f64> = (0..segments)
                    .map(|i| {
                        1.0 + (std::f64::consts::PI * (i as f64 + 0.5) / segments as f64).sin()
                    })
                    .collect();
                let mean = raw.iter().sum::<f64>() / segments as f64;
                raw.into_iter().map(|w| w / mean).collect()
            }
        }
    }
}

/// `K` equal segments of `[0, 1]` with weights `λ`, time gap `Δt` and
/// velocity-term weight `α`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSchedule {
    pub segments: usize,
    pub weights: Vec<f64>,
    pub dt: f64,
    pub alpha: f64,
}

impl SegmentSchedule {
    pub fn new(segments: usize, weights: Vec<f64>, dt: f64, alpha: f64) -> Result<Self> {
        let s = Self {
            segments,
            weights,
            dt,
            alpha,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_preset(segments: usize, preset: WeightPreset, dt: f64, alpha: f64) -> Result<Self> {
        Self::new(segments, preset.weights(segments), dt, alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(Error::Invalid("segment count must be at least 1".into()));
        }
        if self.weights.len() != self.segments
            || self.weights.iter().any(|w| !(*w > 0.0) || !w.is_finite())
        {
            return Err(Error::Invalid(format!(
                "need {} positive segment weights, got {:?}",
                self.segments, self.weights
            )));
        }
        if !(self.dt > 0.0) || !(1.0 / self.segments as f64 > self.dt) {
            return Err(Error::Invalid(format!(
                "Δt = {} does not fit inside segments of length 1/{}",
                self.dt, self.segments
            )));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Invalid(format!(
                "α must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn bounds(&self, i: usize) -> (f64, f64) {
        segment_bounds(i, self.segments)
    }
}

fn segment_bounds(i: usize, k: usize) -> (f64, f64) {
    (i as f64 / k as f64, (i + 1) as f64 / k as f64)
}

/// Segment containing `t`: `i = floor(t K)`, with `t = 1` in the last one.
pub fn segment_of(t: f64, k: usize) -> Result<(usize, f64, f64)> {
    check_time(t, 0.0, 1.0)?;
    if k == 0 {
        return Err(Error::Invalid("segment count must be at least 1".into()));
    }
    let i = ((t * k as f64).floor() as usize).min(k - 1);
    let (s, e) = segment_bounds(i, k);
    Ok((i, s, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// `f_term + α v_term` for consistency objectives; the mean squared
    /// regression error for CFM.
    pub total: f64,
    /// Weighted mean of `‖f_θ − f_θ⁻‖²`; zero for CFM.
    pub f_term: f64,
    /// Weighted mean of `‖v_θ − v_θ⁻‖²`; equals `total` for CFM.
    pub v_term: f64,
    /// The segment when every sample came from one, otherwise `None`.
    pub segment: Option<usize>,
    pub batch: usize,
    /// Unweighted contribution of each segment to the batch mean.
    pub segment_totals: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub report: LossReport,
    /// Gradient with respect to the online parameters θ.
    pub grads: Vec<NumArray>,
    /// Gradient reaching the EMA parameters θ⁻ (zero by construction).
    pub ema_grads: Vec<NumArray>,
    /// Gradient reaching the teacher parameters, distillation only.
    pub teacher_grads: Vec<NumArray>,
}

fn rows_const(tape: &mut Tape, n: usize, d: usize, per_row: impl Fn(usize) -> f64) -> Result<Var> {
    let data = (0..n)
        .flat_map(|i| std::iter::repeat_n(per_row(i), d))
        .collect();
    tape.constant(NumArray::new(vec![n, d], data)?)
}

/// `E_t E ‖v_θ(t, x_t) − u(t, x_t | x1)‖²` with `t ~ U[0, 1]`.
pub fn cfm_loss(
    field: &VelocityField,
    path: &PathSpec,
    batch: usize,
    rng: &mut Rng,
) -> Result<LossOutput> {
    if batch == 0 {
        return Err(Error::Invalid("batch must be at least 1".into()));
    }
    let (x0, x1) = path.coupling.sample_pair(batch, rng)?;
    let t: Vec<f64> = (0..batch).map(|_| uniform(rng, 0.0, 1.0)).collect();
    let x_t = path_points(&path.path, &x0, &x1, &t)?;
    let u = conditional_velocities(&path.path, &x0, &x1, &t)?;

    let mut tape = Tape::new();
    let (v, _) = field.record(&mut tape, ParamSet::Online, &t, &x_t)?;
    let u = tape.constant(u)?;
    let diff = tape.sub(v, u)?;
    let sq = tape.mul(diff, diff)?;
    let sum = tape.sum(sq)?;
    let loss = tape.scale(sum, 1.0 / batch as f64)?;
    let total = tape.value(loss).data()[0];
    if !total.is_finite() {
        return Err(Error::NonFinite("cfm loss".into()));
    }
    let grads = tape.backward(loss, NumArray::scalar(1.0))?;
    Ok(LossOutput {
        report: LossReport {
            total,
            f_term: 0.0,
            v_term: total,
            segment: Some(0),
            batch,
            segment_totals: vec![total],
        },
        grads: grads.params(),
        ema_grads: Vec::new(),
        teacher_grads: Vec::new(),
    })
}

/// Per-sample inputs of a consistency objective.
struct ConsistencyInputs<'a> {
    t: &'a [f64],
    x_t: &'a NumArray,
    x_next: &'a NumArray,
    seg: &'a [usize],
    segments: usize,
    weights: &'a [f64],
    dt: f64,
    alpha: f64,
}

/// Records `Σ_b w_b (‖f_θ − f_θ⁻‖² + α ‖v_θ − v_θ⁻‖²) / n` and differentiates it.
fn consistency_objective(
    field: &VelocityField,
    tape: &mut Tape,
    inp: ConsistencyInputs<'_>,
    teacher_leaves: Vec<Var>,
) -> Result<LossOutput> {
    let n = inp.t.len();
    let d = field.dim();
    let seg_end: Vec<f64> = inp
        .seg
        .iter()
        .map(|&i| segment_bounds(i, inp.segments).1)
        .collect();
    let t_next: Vec<f64> = inp.t.iter().map(|t| t + inp.dt).collect();

    let (v, _) = field.record(tape, ParamSet::Online, inp.t, inp.x_t)?;
    let (v_ema, ema_leaves) = field.record(tape, ParamSet::Ema, &t_next, inp.x_next)?;
    let v_ema = tape.detach(v_ema)?;

    let span = rows_const(tape, n, d, |i| seg_end[i] - inp.t[i])?;
    let span_next = rows_const(tape, n, d, |i| seg_end[i] - t_next[i])?;
    let x_t = tape.constant(inp.x_t.clone())?;
    let x_next = tape.constant(inp.x_next.clone())?;
    let step = tape.mul(span, v)?;
    let f = tape.add(x_t, step)?;
    let step_next = tape.mul(span_next, v_ema)?;
    let f_ema = tape.add(x_next, step_next)?;

    let weight = rows_const(tape, n, d, |i| inp.weights[inp.seg[i]] / n as f64)?;
    let df = tape.sub(f, f_ema)?;
    let df2 = tape.mul(df, df)?;
    let df2w = tape.mul(weight, df2)?;
    let f_term = tape.sum(df2w)?;
    let dv = tape.sub(v, v_ema)?;
    let dv2 = tape.mul(dv, dv)?;
    let dv2w = tape.mul(weight, dv2)?;
    let v_term = tape.sum(dv2w)?;
    let v_scaled = tape.scale(v_term, inp.alpha)?;
    let total = tape.add(f_term, v_scaled)?;

    let mut segment_totals = vec![0.0; inp.segments];
    let (df2, dv2) = (tape.value(df2), tape.value(dv2));
    for (i, &s) in inp.seg.iter().enumerate() {
        let row = |a: &NumArray| a.row(i).iter().sum::<f64>();
        segment_totals[s] += (row(df2) + inp.alpha * row(dv2)) / n as f64;
    }
    let first = inp.seg.first().copied();
    let segment = first.filter(|f| inp.seg.iter().all(|s| s == f));

    let report = LossReport {
        total: tape.value(total).data()[0],
        f_term: tape.value(f_term).data()[0],
        v_term: tape.value(v_term).data()[0],
        segment,
        batch: n,
        segment_totals,
    };
    let grads = tape.backward(total, NumArray::scalar(1.0))?;
    Ok(LossOutput {
        report,
        grads: grads.params(),
        ema_grads: ema_leaves.iter().map(|&l| grads.wrt(l)).collect(),
        teacher_grads: teacher_leaves.iter().map(|&l| grads.wrt(l)).collect(),
    })
}

fn check_gap(dt: f64, alpha: f64) -> Result<()> {
    if !(dt > 0.0 && dt < 1.0) {
        return Err(Error::Invalid(format!("Δt must lie in (0, 1), got {dt}")));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Invalid(format!("α must be positive, got {alpha}")));
    }
    Ok(())
}

/// Single-segment velocity consistency with `t ~ U[0, 1 − Δt]`.
pub fn velocity_consistency_loss(
    field: &VelocityField,
    path: &PathSpec,
    batch: usize,
    dt: f64,
    alpha: f64,
    rng: &mut Rng,
) -> Result<LossOutput> {
    check_gap(dt, alpha)?;
    if batch == 0 {
        return Err(Error::Invalid("batch must be at least 1".into()));
    }
    let (x0, x1) = path.coupling.sample_pair(batch, rng)?;
    let t = (0..batch).map(|_| uniform(rng, 0.0, 1.0 - dt)).collect();
    let tuples = tuples_at(&path.path, x0, x1, t, dt)?;
    let seg = vec![0; batch];
    consistency_objective(
        field,
        &mut Tape::new(),
        ConsistencyInputs {
            t: &tuples.t,
            x_t: &tuples.x_t,
            x_next: &tuples.x_next,
            seg: &seg,
            segments: 1,
            weights: &[1.0],
            dt,
            alpha,
        },
        Vec::new(),
    )
}

/// Multi-segment consistency. Each sample picks a segment uniformly, then
/// `t ~ U[i/K, (i+1)/K − Δt]`; the endpoint map targets `(i+1)/K`.
pub fn multisegment_loss(
    field: &VelocityField,
    path: &PathSpec,
    schedule: &SegmentSchedule,
    batch: usize,
    rng: &mut Rng,
) -> Result<LossOutput> {
    schedule.validate()?;
    if batch == 0 {
        return Err(Error::Invalid("batch must be at least 1".into()));
    }
    let k = schedule.segments;
    let (x0, x1) = path.coupling.sample_pair(batch, rng)?;
    let mut seg = Vec::with_capacity(batch);
    let mut t = Vec::with_capacity(batch);
    for _ in 0..batch {
        let i = if k > 1 { rng.random_range(0..k) } else { 0 };
        let (s, e) = schedule.bounds(i);
        seg.push(i);
        t.push(uniform(rng, s, e - schedule.dt));
    }
    let tuples = tuples_at(&path.path, x0, x1, t, schedule.dt)?;
    consistency_objective(
        field,
        &mut Tape::new(),
        ConsistencyInputs {
            t: &tuples.t,
            x_t: &tuples.x_t,
            x_next: &tuples.x_next,
            seg: &seg,
            segments: k,
            weights: &schedule.weights,
            dt: schedule.dt,
            alpha: schedule.alpha,
        },
        Vec::new(),
    )
}

/// The pretrained field a student is distilled from.
#[derive(Clone, Copy)]
pub enum Teacher<'a> {
    /// A trained network, evaluated with frozen parameters on the tape.
    Net(&'a VelocityField, ParamSet),
    /// Any field evaluated off the tape.
    Analytic(&'a dyn Field),
}

impl Teacher<'_> {
    fn dim(&self) -> usize {
        match self {
            Teacher::Net(f, _) => f.dim(),
            Teacher::Analytic(f) => f.dim(),
        }
    }
}

/// Consistency distillation with a single segment: the EMA branch is
/// evaluated at the teacher's one-step Euler prediction
/// `x̂ = x_t + Δt u_φ(t, x_t)`. `x_t` follows the teacher's training path.
pub fn distill_loss(
    student: &VelocityField,
    teacher: Teacher<'_>,
    path: &PathSpec,
    batch: usize,
    dt: f64,
    alpha: f64,
    rng: &mut Rng,
) -> Result<LossOutput> {
    check_gap(dt, alpha)?;
    if batch == 0 {
        return Err(Error::Invalid("batch must be at least 1".into()));
    }
    if teacher.dim() != student.dim() || path.dim() != student.dim() {
        return Err(Error::Shape(format!(
            "teacher dim {}, student dim {}, path dim {}",
            teacher.dim(),
            student.dim(),
            path.dim()
        )));
    }
    let (x0, x1) = path.coupling.sample_pair(batch, rng)?;
    let t: Vec<f64> = (0..batch).map(|_| uniform(rng, 0.0, 1.0 - dt)).collect();
    let x_t = path_points(&path.path, &x0, &x1, &t)?;

    let mut tape = Tape::new();
    let (u, teacher_leaves) = match teacher {
        Teacher::Net(net, set) => net.record_frozen(&mut tape, set, &t, &x_t)?,
        Teacher::Analytic(f) => (tape.constant(f.velocity(&t, &x_t)?)?, Vec::new()),
    };
    let u = tape.detach(u)?;
    let step = tape.scale(u, dt)?;
    let xt_leaf = tape.constant(x_t.clone())?;
    let x_hat = tape.add(xt_leaf, step)?;
    let x_hat = tape.value(x_hat).clone();

    let seg = vec![0; batch];
    consistency_objective(
        student,
        &mut tape,
        ConsistencyInputs {
            t: &t,
            x_t: &x_t,
            x_next: &x_hat,
            seg: &seg,
            segments: 1,
            weights: &[1.0],
            dt,
            alpha,
        },
        teacher_leaves,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::DistributionSpec;
    use crate::net::NetConfig;
    use crate::paths::{AffineMap, Coupling, PathKind};
    use crate::rng::{stream_rng, Stream};

    fn small_net(seed: u64) -> VelocityField {
        VelocityField::init(
            NetConfig {
                data_dim: 2,
                hidden: vec![16, 16],
                ..NetConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    /// Network whose output is the constant `c` (all weights zero).
    fn constant_net(c: &[f64]) -> VelocityField {
        let cfg = NetConfig {
            data_dim: c.len(),
            hidden: vec![4],
            ..NetConfig::default()
        };
        let mut f = VelocityField::init(cfg, 0).unwrap();
        let n = f.online_mut().len();
        for (i, p) in f.online_mut().iter_mut().enumerate() {
            let last_bias = i == n - 1;
            for (k, v) in p.data_mut().iter_mut().enumerate() {
                *v = if last_bias { c[k] } else { 0.0 };
            }
        }
        let online = f.params(ParamSet::Online).to_vec();
        f.ema_mut().clone_from_slice(&online);
        f
    }

    fn translation(b: Vec<f64>) -> PathSpec {
        let d = b.len();
        PathSpec::linear(Coupling::Affine {
            source: DistributionSpec::StandardGaussian { dim: d },
            map: AffineMap::identity_shift(b),
        })
    }

    fn eight() -> PathSpec {
        PathSpec::linear(Coupling::Independent {
            source: DistributionSpec::StandardGaussian { dim: 2 },
            target: DistributionSpec::eight_gaussians(),
        })
    }

    #[test]
    fn segment_lookup() {
        assert_eq!(segment_of(0.3, 4).unwrap(), (1, 0.25, 0.5));
        assert_eq!(segment_of(1.0, 4).unwrap().0, 3);
        assert_eq!(segment_of(0.77, 1).unwrap(), (0, 0.0, 1.0));
        assert!(segment_of(1.01, 4).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(SegmentSchedule::new(4, vec![1.0; 4], 0.01, 1.0).is_ok());
        assert!(SegmentSchedule::new(4, vec![1.0; 3], 0.01, 1.0).is_err());
        assert!(SegmentSchedule::new(4, vec![1.0, 0.0, 1.0, 1.0], 0.01, 1.0).is_err());
        assert!(SegmentSchedule::new(50, vec![1.0; 50], 0.02, 1.0).is_err());
        assert!(SegmentSchedule::new(2, vec![1.0; 2], 0.01, 0.0).is_err());
        let mid = WeightPreset::MiddleWeighted.weights(4);
        assert!(mid[1] > mid[0] && (mid.iter().sum::<f64>() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cfm_exact_fit_is_zero() {
        let b = vec![2.0, -1.0];
        let out = cfm_loss(
            &constant_net(&b),
            &translation(b.clone()),
            32,
            &mut stream_rng(1, Stream::Data),
        )
        .unwrap();
        assert!(out.report.total.abs() < 1e-24);
    }

    #[test]
    fn cfm_zero_field_is_squared_chord() {
        let b = vec![2.0, -1.0];
        let out = cfm_loss(
            &constant_net(&[0.0, 0.0]),
            &translation(b),
            32,
            &mut stream_rng(1, Stream::Data),
        )
        .unwrap();
        assert!((out.report.total - 5.0).abs() < 1e-12);
    }

    #[test]
    fn consistent_constant_field_has_zero_consistency_loss() {
        let c = vec![1.5, 0.5];
        let out = velocity_consistency_loss(
            &constant_net(&c),
            &translation(c.clone()),
            64,
            0.01,
            1.0,
            &mut stream_rng(2, Stream::Data),
        )
        .unwrap();
        assert!(out.report.total < 1e-26, "{}", out.report.total);
    }

    #[test]
    fn zero_field_loss_is_scaled_chord_length() {
        let path = eight();
        let dt = 0.05;
        let out = velocity_consistency_loss(
            &constant_net(&[0.0, 0.0]),
            &path,
            128,
            dt,
            1.0,
            &mut stream_rng(3, Stream::Data),
        )
        .unwrap();
        let (x0, x1) = path
            .coupling
            .sample_pair(128, &mut stream_rng(3, Stream::Data))
            .unwrap();
        let chord = x0
            .iter_rows()
            .zip(x1.iter_rows())
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (q - p).powi(2)).sum::<f64>())
            .sum::<f64>()
            / 128.0;
        assert!((out.report.total - dt * dt * chord).abs() < 1e-12 * chord);
        assert_eq!(out.report.v_term, 0.0);
    }

    #[test]
    fn ema_parameters_receive_no_gradient() {
        let mut f = small_net(4);
        f.online_mut()[0].data_mut()[0] += 0.3;
        let out = velocity_consistency_loss(
            &f,
            &eight(),
            32,
            0.01,
            1.0,
            &mut stream_rng(4, Stream::Data),
        )
        .unwrap();
        assert_eq!(out.ema_grads.len(), f.params(ParamSet::Ema).len());
        assert!(out
            .ema_grads
            .iter()
            .all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(out.grads.iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn total_is_f_plus_alpha_v() {
        let f = small_net(5);
        let out = velocity_consistency_loss(
            &f,
            &eight(),
            32,
            0.01,
            2.5,
            &mut stream_rng(5, Stream::Data),
        )
        .unwrap();
        let r = out.report;
        assert!((r.total - (r.f_term + 2.5 * r.v_term)).abs() < 1e-12 * r.total.max(1.0));
    }

    #[test]
    fn single_segment_reduces_to_velocity_consistency() {
        let f = small_net(6);
        let path = eight();
        let a =
            velocity_consistency_loss(&f, &path, 48, 0.01, 0.7, &mut stream_rng(6, Stream::Data))
                .unwrap();
        let sched = SegmentSchedule::new(1, vec![1.0], 0.01, 0.7).unwrap();
        let b = multisegment_loss(&f, &path, &sched, 48, &mut stream_rng(6, Stream::Data)).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn segment_weights_enter_linearly() {
        let f = small_net(7);
        let path = eight();
        let run = |w: Vec<f64>| {
            let s = SegmentSchedule::new(2, w, 0.01, 1.0).unwrap();
            multisegment_loss(&f, &path, &s, 64, &mut stream_rng(7, Stream::Data))
                .unwrap()
                .report
        };
        let base = run(vec![1.0, 1.0]);
        let doubled = run(vec![2.0, 1.0]);
        let expect = base.total + base.segment_totals[0];
        assert!((doubled.total - expect).abs() < 1e-12 * expect);
        assert!((base.segment_totals.iter().sum::<f64>() - base.total).abs() < 1e-12 * base.total);
    }

    #[test]
    fn piecewise_field_on_kinked_path_has_zero_loss() {
        // x1 = x0 + 2 through a waypoint at t = 0.5, chord slopes 1 then 3.
        let coupling = Coupling::Affine {
            source: DistributionSpec::StandardGaussian { dim: 1 },
            map: AffineMap::identity_shift(vec![2.0]),
        };
        let path = PathSpec::new(
            PathKind::Bent {
                knot: 0.5,
                shift: vec![-0.5],
            },
            coupling,
        )
        .unwrap();
        // v = 2 + tanh(1e8 (t − 0.5)): saturates to ±1 exactly outside a 1e-6 band.
        let cfg = NetConfig {
            data_dim: 1,
            hidden: vec![1],
            activation: crate::nd::Activation::Tanh,
            ..NetConfig::default()
        };
        let mut f = VelocityField::init(cfg, 0).unwrap();
        let raw_t = f.config().time_embedding.dim() - 1;
        for p in f.online_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        f.online_mut()[0].data_mut()[raw_t] = 1e8;
        f.online_mut()[1].data_mut()[0] = -0.5e8;
        f.online_mut()[2].data_mut()[0] = 1.0;
        f.online_mut()[3].data_mut()[0] = 2.0;
        let online = f.params(ParamSet::Online).to_vec();
        f.ema_mut().clone_from_slice(&online);
        let sched = SegmentSchedule::new(2, vec![1.0, 1.0], 0.01, 1.0).unwrap();
        let out =
            multisegment_loss(&f, &path, &sched, 256, &mut stream_rng(8, Stream::Data)).unwrap();
        assert!(out.report.total < 1e-20, "{}", out.report.total);
        assert!(out.report.segment_totals.iter().all(|s| *s < 1e-20));
    }

    #[test]
    fn distill_from_identical_consistent_teacher_is_zero() {
        let c = vec![0.5, -2.0];
        let student = constant_net(&c);
        let teacher = constant_net(&c);
        let out = distill_loss(
            &student,
            Teacher::Net(&teacher, ParamSet::Ema),
            &translation(c.clone()),
            32,
            0.01,
            1.0,
            &mut stream_rng(9, Stream::Data),
        )
        .unwrap();
        assert!(out.report.total < 1e-26);
    }

    #[test]
    fn analytic_teacher_against_zero_student() {
        // Zero student: f(t, x) = x and v = 0, so the loss is dt² |u|² per sample.
        let u = crate::field::ConstantField(vec![3.0, -4.0]);
        let student = constant_net(&[0.0, 0.0]);
        let dt = 0.02;
        let out = distill_loss(
            &student,
            Teacher::Analytic(&u),
            &eight(),
            64,
            dt,
            1.0,
            &mut stream_rng(14, Stream::Data),
        )
        .unwrap();
        let expected = dt * dt * 25.0;
        assert!(
            (out.report.total - expected).abs() < 1e-15,
            "{} vs {expected}",
            out.report.total
        );
        assert!(out.teacher_grads.is_empty());
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let student = small_net(10);
        let teacher = small_net(11);
        let out = distill_loss(
            &student,
            Teacher::Net(&teacher, ParamSet::Online),
            &eight(),
            32,
            0.01,
            1.0,
            &mut stream_rng(10, Stream::Data),
        )
        .unwrap();
        assert_eq!(
            out.teacher_grads.len(),
            teacher.params(ParamSet::Online).len()
        );
        assert!(out
            .teacher_grads
            .iter()
            .all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(out
            .ema_grads
            .iter()
            .all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn consistency_gradients_match_finite_differences() {
        // Perturb one online weight and compare the loss change on a fixed stream.
        let f = small_net(12);
        let path = eight();
        let out =
            velocity_consistency_loss(&f, &path, 16, 0.05, 1.0, &mut stream_rng(12, Stream::Data))
                .unwrap();
        let h = 1e-6;
        for (layer, idx) in [(0usize, 3usize), (2, 7), (5, 1)] {
            let eval = |delta: f64| {
                let mut g = f.clone();
                g.online_mut()[layer].data_mut()[idx] += delta;
                velocity_consistency_loss(
                    &g,
                    &path,
                    16,
                    0.05,
                    1.0,
                    &mut stream_rng(12, Stream::Data),
                )
                .unwrap()
                .report
                .total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = out.grads[layer].data()[idx];
            assert!(
                (fd - a).abs() / (fd.abs() + a.abs() + 1e-12) < 1e-5,
                "layer {layer}: {fd} vs {a}"
            );
        }
    }

    #[test]
    fn invalid_arguments() {
        let f = small_net(13);
        let mut rng = stream_rng(13, Stream::Data);
        assert!(velocity_consistency_loss(&f, &eight(), 8, 1.0, 1.0, &mut rng).is_err());
        assert!(velocity_consistency_loss(&f, &eight(), 8, 0.01, -1.0, &mut rng).is_err());
        assert!(cfm_loss(&f, &eight(), 0, &mut rng).is_err());
    }
}
