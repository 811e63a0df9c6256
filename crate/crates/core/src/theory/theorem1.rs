//! Small-Δt behaviour of the endpoint-consistency term with `θ⁻ = θ`.

use super::FlowMap;
use crate::datasets::{sample, DistributionSpec};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::nd::NumArray;
use crate::rng::{uniform, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingProbe {
    pub dts: Vec<f64>,
    pub batch: usize,
    pub t_min: f64,
    pub t_max: f64,
    /// Central-difference step for `∂_t v` and `u·∇_x v`.
    pub h: f64,
}

impl Default for ScalingProbe {
    fn default() -> Self {
        Self {
            dts: vec![0.1, 0.05, 0.025, 0.0125],
            batch: 512,
            t_min: 0.01,
            t_max: 0.9,
            h: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub dt: f64,
    /// `E‖f(t, x_t) − f(t + Δt, x_{t+Δt})‖²`.
    pub lhs: f64,
    /// `Δt² E‖v − u − (1 − t)(∂_t v + u·∇_x v)‖²`.
    pub rhs: f64,
    /// `lhs / rhs`, absent when both vanish.
    pub ratio: Option<f64>,
}

/// `rhs` below this is treated as zero.
const RHS_FLOOR: f64 = 1e-14;
/// `lhs` allowed alongside a vanishing `rhs`.
const LHS_FLOOR: f64 = 1e-12;

fn row_sq_norms(a: &NumArray) -> f64 {
    a.iter_rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / a.rows() as f64
}

/// Compares both sides of the small-Δt expansion on one fixed probe set:
/// `x0 ~ source`, `t ~ U[t_min, t_max]`, `x_t` and `x_{t+Δt}` on the exact
/// flow of `truth`. The same probes serve every Δt.
pub fn theorem1_scaling_probe(
    field: &dyn Field,
    truth: &dyn FlowMap,
    source: &DistributionSpec,
    probe: &ScalingProbe,
    rng: &mut Rng,
) -> Result<Vec<ScalingRow>> {
    let h = probe.h;
    let max_dt = probe.dts.iter().copied().fold(0.0, f64::max);
    if probe.batch == 0
        || !(h > 0.0)
        || probe.dts.iter().any(|d| !(*d > 0.0))
        || probe.t_min - h < 0.0
        || probe.t_max + max_dt.max(h) > 1.0
        || probe.t_min > probe.t_max
    {
        return Err(Error::Invalid(format!(
            "scaling probe out of range: {probe:?}"
        )));
    }
    if field.dim() != truth.dim() || source.dim() != truth.dim() {
        return Err(Error::Shape(
            "field, truth and source dimensions differ".into(),
        ));
    }
    let n = probe.batch;
    let d = field.dim();
    let x0 = sample(source, n, rng)?;
    let t: Vec<f64> = (0..n)
        .map(|_| uniform(rng, probe.t_min, probe.t_max))
        .collect();
    let mut rows = Vec::with_capacity(n);
    for (i, ti) in t.iter().enumerate() {
        rows.push(truth.transport(0.0, x0.row(i), *ti)?);
    }
    let x_t = NumArray::from_rows(&rows)?;

    let v = field.velocity(&t, &x_t)?;
    let u = truth.velocity(&t, &x_t)?;
    let shift = |s: f64| t.iter().map(|ti| ti + s).collect::<Vec<f64>>();
    let dv_dt = field
        .velocity(&shift(h), &x_t)?
        .zip_map(&field.velocity(&shift(-h), &x_t)?, |a, b| {
            (a - b) / (2.0 * h)
        })?;
    let mut up = x_t.clone();
    up.axpy(h, &u);
    let mut down = x_t.clone();
    down.axpy(-h, &u);
    let du = field
        .velocity(&t, &up)?
        .zip_map(&field.velocity(&t, &down)?, |a, b| (a - b) / (2.0 * h))?;
    let mut bracket = Vec::with_capacity(n * d);
    for i in 0..n {
        for k in 0..d {
            let j = i * d + k;
            bracket
                .push(v.data()[j] - u.data()[j] - (1.0 - t[i]) * (dv_dt.data()[j] + du.data()[j]));
        }
    }
    let bracket = row_sq_norms(&NumArray::new(vec![n, d], bracket)?);

    let mut out = Vec::with_capacity(probe.dts.len());
    for &dt in &probe.dts {
        let mut next = Vec::with_capacity(n);
        for (i, ti) in t.iter().enumerate() {
            next.push(truth.transport(*ti, x_t.row(i), ti + dt)?);
        }
        let x_next = NumArray::from_rows(&next)?;
        let t_next = shift(dt);
        let v_next = field.velocity(&t_next, &x_next)?;
        let mut diff = Vec::with_capacity(n * d);
        for i in 0..n {
            for k in 0..d {
                let j = i * d + k;
                let f_now = x_t.data()[j] + (1.0 - t[i]) * v.data()[j];
                let f_next = x_next.data()[j] + (1.0 - t_next[i]) * v_next.data()[j];
                diff.push(f_now - f_next);
            }
        }
        let lhs = row_sq_norms(&NumArray::new(vec![n, d], diff)?);
        let rhs = dt * dt * bracket;
        let ratio = if rhs >= RHS_FLOOR {
            Some(lhs / rhs)
        } else if lhs <= LHS_FLOOR {
            None
        } else {
            return Err(Error::Invalid(format!(
                "degenerate probe at Δt = {dt}: rhs {rhs:e} vanishes but lhs is {lhs:e}"
            )));
        };
        out.push(ScalingRow {
            dt,
            lhs,
            rhs,
            ratio,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ConstantField;
    use crate::net::{NetConfig, ParamSet, VelocityField};
    use crate::rng::{stream_rng, Stream};
    use crate::theory::AffineOracle;

    fn gaussian() -> DistributionSpec {
        DistributionSpec::StandardGaussian { dim: 2 }
    }

    #[test]
    fn consistent_field_matching_truth_vanishes() {
        let o = AffineOracle::new(vec![vec![1.5, 0.3], vec![-0.2, 0.8]], vec![1.0, -0.5]).unwrap();
        let rows = theorem1_scaling_probe(
            &o,
            &o,
            &gaussian(),
            &ScalingProbe::default(),
            &mut stream_rng(1, Stream::Probe),
        )
        .unwrap();
        for r in rows {
            assert!(r.lhs / (r.dt * r.dt) < 1e-12, "{r:?}");
            assert!(r.ratio.is_none());
        }
    }

    #[test]
    fn constant_mismatch_has_unit_ratio() {
        let v = ConstantField(vec![1.0, 2.0]);
        let u = ConstantField(vec![-0.5, 0.0]);
        let rows = theorem1_scaling_probe(
            &v,
            &u,
            &gaussian(),
            &ScalingProbe::default(),
            &mut stream_rng(2, Stream::Probe),
        )
        .unwrap();
        for r in rows {
            assert!((r.ratio.unwrap() - 1.0).abs() < 1e-9, "{r:?}");
            assert!((r.rhs - r.dt * r.dt * 6.25).abs() < 1e-12);
        }
    }

    #[test]
    fn random_network_ratio_approaches_one() {
        let o = AffineOracle::new(vec![vec![1.5, 0.3], vec![-0.2, 0.8]], vec![1.0, -0.5]).unwrap();
        let net = VelocityField::init(NetConfig::default(), 17).unwrap();
        let rows = theorem1_scaling_probe(
            &net.view(ParamSet::Online),
            &o,
            &gaussian(),
            &ScalingProbe::default(),
            &mut stream_rng(3, Stream::Probe),
        )
        .unwrap();
        let gaps: Vec<f64> = rows
            .iter()
            .map(|r| (r.ratio.unwrap() - 1.0).abs())
            .collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{rows:?}");
        assert!(gaps[3] < 0.05, "{rows:?}");
    }

    #[test]
    fn rejects_out_of_range_probe() {
        let v = ConstantField(vec![1.0, 2.0]);
        let bad = ScalingProbe {
            t_max: 0.95,
            ..ScalingProbe::default()
        };
        assert!(theorem1_scaling_probe(
            &v,
            &v,
            &gaussian(),
            &bad,
            &mut stream_rng(0, Stream::Probe)
        )
        .is_err());
    }
}
