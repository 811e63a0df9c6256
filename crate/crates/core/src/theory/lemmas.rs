//! Trajectory consistency (both conditions), the material-derivative PDE
//! and the continuity equation, checked on analytic fields.

use super::{AffineOracle, FlowMap};
use crate::error::{Error, Result};
use crate::field::{check_batch, ConstantField, Field, FnField};
use crate::nd::NumArray;
use crate::sampler::{record_trajectory, uniform_grid};

#[derive(Clone, Debug, PartialEq)]
pub struct Lemma1Report {
    /// Max over trajectory time pairs of `‖v(t, γ(t)) − v(s, γ(s))‖`.
    pub cond1_residual: f64,
    /// Max over pairs of `‖[γ(t) + (1−t) v(t, γ(t))] − [γ(s) + (1−s) v(s, γ(s))]‖`.
    pub cond2_residual: f64,
    pub tol: f64,
    /// Both residuals below `tol`.
    pub consistent: bool,
    /// Both below or both at/above `tol`.
    pub equivalent: bool,
}

fn max_pair_distance(points: &[Vec<f64>]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, p) in points.iter().enumerate() {
        for q in &points[i + 1..] {
            let d: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.max(d);
        }
    }
    best.sqrt()
}

/// Integrates `field` from each start with `steps` Euler steps over `[0, 1]`
/// and measures both consistency conditions along the recorded states.
/// Euler is exact on straight trajectories, so consistent fields incur only
/// rounding error.
pub fn verify_lemma1(
    field: &dyn Field,
    starts: &NumArray,
    steps: usize,
    tol: f64,
) -> Result<Lemma1Report> {
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let traj = record_trajectory(field, starts, &uniform_grid(steps + 1)?)?;
    let velocities: Vec<NumArray> = traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(t, s)| field.velocity(&vec![*t; s.rows()], s))
        .collect::<Result<_>>()?;
    let (mut c1, mut c2) = (0.0f64, 0.0f64);
    for i in 0..starts.rows() {
        let v: Vec<Vec<f64>> = velocities.iter().map(|v| v.row(i).to_vec()).collect();
        let f: Vec<Vec<f64>> = traj
            .times
            .iter()
            .zip(&traj.states)
            .zip(&v)
            .map(|((t, s), vi)| {
                s.row(i)
                    .iter()
                    .zip(vi)
                    .map(|(x, vv)| x + (1.0 - t) * vv)
                    .collect()
            })
            .collect();
        c1 = c1.max(max_pair_distance(&v));
        c2 = c2.max(max_pair_distance(&f));
    }
    let (b1, b2) = (c1 < tol, c2 < tol);
    Ok(Lemma1Report {
        cond1_residual: c1,
        cond2_residual: c2,
        tol,
        consistent: b1 && b2,
        equivalent: b1 == b2,
    })
}

/// A non-affine consistent field: straight trajectories
/// `γ(t) = x0 + t c(x0)` with `c(x0)_i = k_i tanh(x0_i)`.
#[derive(Clone, Debug)]
pub struct TanhConsistentField {
    pub gains: Vec<f64>,
}

impl TanhConsistentField {
    /// Solves `z + t k tanh(z) = x` per coordinate by Newton's method.
    pub fn preimage(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        x.iter()
            .zip(&self.gains)
            .map(|(&xi, &k)| {
                let mut z = xi;
                for _ in 0..100 {
                    let th = z.tanh();
                    let g = z + t * k * th - xi;
                    let step = g / (1.0 + t * k * (1.0 - th * th));
                    z -= step;
                    if step.abs() <= 4.0 * f64::EPSILON * (1.0 + z.abs()) {
                        return Ok(z);
                    }
                }
                Err(Error::Invalid(format!(
                    "Newton solve did not converge at t = {t}, x = {xi}"
                )))
            })
            .collect()
    }

    fn direction(&self, x0: &[f64]) -> Vec<f64> {
        x0.iter()
            .zip(&self.gains)
            .map(|(z, k)| k * z.tanh())
            .collect()
    }
}

impl Field for TanhConsistentField {
    fn dim(&self) -> usize {
        self.gains.len()
    }

    fn velocity(&self, t: &[f64], x: &NumArray) -> Result<NumArray> {
        check_batch(self.dim(), t, x)?;
        let mut data = Vec::with_capacity(x.len());
        for (ti, xi) in t.iter().zip(x.iter_rows()) {
            data.extend(self.direction(&self.preimage(*ti, xi)?));
        }
        NumArray::new(vec![t.len(), self.dim()], data)
    }
}

impl FlowMap for TanhConsistentField {
    fn transport(&self, t: f64, x: &[f64], s: f64) -> Result<Vec<f64>> {
        let x0 = self.preimage(t, x)?;
        Ok(x0
            .iter()
            .zip(self.direction(&x0))
            .map(|(z, c)| z + s * c)
            .collect())
    }
}

pub struct AnalyticCase {
    pub name: &'static str,
    pub field: Box<dyn Field>,
    pub consistent: bool,
}

fn oracle(a: [[f64; 2]; 2], b: [f64; 2]) -> Box<dyn Field> {
    Box::new(
        AffineOracle::new(a.iter().map(|r| r.to_vec()).collect(), b.to_vec())
            .expect("valid family oracle"),
    )
}

fn closure(f: impl Fn(f64, &[f64]) -> Vec<f64> + 'static) -> Box<dyn Field> {
    Box::new(FnField::new(2, f))
}

/// Twenty 2D fields, ten consistent and ten not.
pub fn analytic_family() -> Vec<AnalyticCase> {
    let case = |name, field, consistent| AnalyticCase {
        name,
        field,
        consistent,
    };
    vec![
        case(
            "zero",
            Box::new(ConstantField(vec![0.0, 0.0])) as Box<dyn Field>,
            true,
        ),
        case("constant", Box::new(ConstantField(vec![1.0, -2.0])), true),
        case(
            "translation",
            oracle([[1.0, 0.0], [0.0, 1.0]], [2.0, 2.0]),
            true,
        ),
        case(
            "scaling",
            oracle([[2.0, 0.0], [0.0, 2.0]], [0.0, 0.0]),
            true,
        ),
        case(
            "anisotropic",
            oracle([[0.5, 0.0], [0.0, 3.0]], [1.0, -1.0]),
            true,
        ),
        case(
            "shear-map",
            oracle([[1.0, 1.0], [0.0, 1.0]], [0.0, 1.0]),
            true,
        ),
        case(
            "rotation-map",
            oracle([[0.0, -1.0], [1.0, 0.0]], [0.5, 0.0]),
            true,
        ),
        case(
            "symmetric-map",
            oracle([[2.0, 0.5], [0.5, 1.0]], [-1.0, 0.0]),
            true,
        ),
        case(
            "contraction-map",
            oracle([[0.2, 0.0], [0.0, 0.2]], [0.0, 0.0]),
            true,
        ),
        case(
            "tanh-straight",
            Box::new(TanhConsistentField {
                gains: vec![1.0, 0.5],
            }),
            true,
        ),
        case("time-linear", closure(|t, _| vec![t, 0.0]), false),
        case("growth", closure(|_, x| vec![x[0], x[1]]), false),
        case(
            "decay",
            closure(|_, x| vec![-0.5 * x[0], -0.5 * x[1]]),
            false,
        ),
        case("rotation", closure(|_, x| vec![-x[1], x[0]]), false),
        case(
            "oscillating",
            closure(|t, _| vec![(3.0 * t).sin(), (2.0 * t).cos()]),
            false,
        ),
        case(
            "swirl",
            closure(|_, x| vec![x[1].tanh(), -x[0].tanh()]),
            false,
        ),
        case(
            "accelerating-shift",
            closure(|t, _| vec![1.0 + 0.5 * t, 1.0]),
            false,
        ),
        case(
            "decelerating",
            closure(|t, _| vec![1.0 - t, 2.0 * (1.0 - t)]),
            false,
        ),
        case("time-shear", closure(|t, x| vec![t * x[1], 0.0]), false),
        case(
            "sine-coupled",
            closure(|_, x| vec![x[1].sin(), x[0].sin()]),
            false,
        ),
    ]
}

/// Fixed probes for the PDE check: times in `[0.05, 0.85]` and points on two
/// rings away from the origin.
pub fn lemma_probe_points() -> (Vec<f64>, NumArray) {
    let mut t = Vec::new();
    let mut rows = Vec::new();
    for (k, ti) in [0.05, 0.25, 0.45, 0.65, 0.85].iter().enumerate() {
        for j in 0..8 {
            let a = (j as f64 + 0.37 * k as f64) * std::f64::consts::FRAC_PI_4;
            let r = if j % 2 == 0 { 1.0 } else { 1.7 };
            t.push(*ti);
            rows.push([r * a.cos(), r * a.sin()]);
        }
    }
    (t, NumArray::from_rows(&rows).expect("probe rows"))
}

/// Eight unit-circle starting points for trajectory checks.
pub fn lemma_starts() -> NumArray {
    let rows: Vec<[f64; 2]> = (0..8)
        .map(|j| {
            let a = j as f64 * std::f64::consts::FRAC_PI_4 + 0.2;
            [a.cos(), a.sin()]
        })
        .collect();
    NumArray::from_rows(&rows).expect("start rows")
}

/// Density of `γ(t)` for `x0 ~ N(μ0, σ0²)` under the 1D map `x1 = a x0 + b`:
/// `N(m_t μ0 + t b, (m_t σ0)²)` with `m_t = 1 − t + t a`.
pub fn affine_pushforward_density(
    a: f64,
    b: f64,
    mu0: f64,
    sigma0: f64,
) -> impl Fn(f64, f64) -> f64 {
    move |t, x| {
        let m = 1.0 - t + t * a;
        let mean = m * mu0 + t * b;
        let sd = m.abs() * sigma0;
        let z = (x - mean) / sd;
        (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuityReport {
    pub max_residual: f64,
    pub points: usize,
}

/// Max over the grid of `|∂_t p + ∂_x (u p)|` by central differences.
pub fn continuity_residual_1d(
    density: impl Fn(f64, f64) -> f64,
    velocity: impl Fn(f64, f64) -> f64,
    grid: &[(f64, f64)],
    h: f64,
) -> Result<ContinuityReport> {
    if !(h > 0.0) {
        return Err(Error::Invalid(format!(
            "difference step must be positive, got {h}"
        )));
    }
    let mut worst: f64 = 0.0;
    for &(t, x) in grid {
        let dp_dt = (density(t + h, x) - density(t - h, x)) / (2.0 * h);
        let flux = |y: f64| velocity(t, y) * density(t, y);
        let dflux_dx = (flux(x + h) - flux(x - h)) / (2.0 * h);
        let r = (dp_dt + dflux_dx).abs();
        if !r.is_finite() {
            return Err(Error::NonFinite(format!(
                "continuity residual at t = {t}, x = {x}"
            )));
        }
        worst = worst.max(r);
    }
    Ok(ContinuityReport {
        max_residual: worst,
        points: grid.len(),
    })
}

/// Continuity check for the 1D oracle `x1 = a x0 + b` with a Gaussian source,
/// on 19 times in `[0.05, 0.95]` and 101 points within 4 sd of the mean.
pub fn continuity_check_1d(
    a: f64,
    b: f64,
    mu0: f64,
    sigma0: f64,
    h: f64,
) -> Result<ContinuityReport> {
    let o = AffineOracle::new(vec![vec![a]], vec![b])?;
    let mut grid = Vec::new();
    for i in 0..19 {
        let t = 0.05 + 0.05 * i as f64;
        let m = 1.0 - t + t * a;
        let (mean, sd) = (m * mu0 + t * b, m.abs() * sigma0);
        grid.extend((0..101).map(|j| (t, mean + sd * (-4.0 + 0.08 * j as f64))));
    }
    let u = |t: f64, x: f64| o.velocity_point(t, &[x]).map(|v| v[0]).unwrap_or(f64::NAN);
    continuity_residual_1d(affine_pushforward_density(a, b, mu0, sigma0), u, &grid, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::consistency_residual;

    fn starts() -> NumArray {
        lemma_starts()
    }

    #[test]
    fn oracle_passes_both_conditions() {
        let o = AffineOracle::new(vec![vec![1.5, 0.2], vec![-0.4, 0.7]], vec![1.0, 2.0]).unwrap();
        let r = verify_lemma1(&o, &starts(), 256, 1e-8).unwrap();
        assert!(r.cond1_residual < 1e-8 && r.cond2_residual < 1e-8, "{r:?}");
        assert!(r.consistent && r.equivalent);
    }

    #[test]
    fn time_linear_field_fails_both() {
        let f = FnField::new(2, |t, _| vec![t, 0.0]);
        let r = verify_lemma1(&f, &starts(), 256, 1e-8).unwrap();
        assert!(r.cond1_residual > 0.1 && r.cond2_residual > 0.1, "{r:?}");
        assert!(!r.consistent && r.equivalent);
    }

    #[test]
    fn constant_field_is_exact() {
        let r = verify_lemma1(&ConstantField(vec![0.5, -0.25]), &starts(), 64, 1e-8).unwrap();
        assert_eq!(r.cond1_residual, 0.0);
        assert!(r.cond2_residual < 1e-15);
    }

    #[test]
    fn family_has_no_mixed_quadrant() {
        let (t, x) = lemma_probe_points();
        for case in analytic_family() {
            let r = verify_lemma1(case.field.as_ref(), &starts(), 256, 1e-8).unwrap();
            let pde = consistency_residual(case.field.as_ref(), &t, &x, 1e-4)
                .unwrap()
                .value;
            if case.consistent {
                assert!(r.consistent, "{}: {r:?}", case.name);
                assert!(pde < 1e-6, "{}: {pde}", case.name);
            } else {
                assert!(
                    r.cond1_residual > 1e-2 && r.cond2_residual > 1e-2,
                    "{}: {r:?}",
                    case.name
                );
                assert!(pde > 1e-2, "{}: {pde}", case.name);
            }
            assert!(r.equivalent, "{}", case.name);
        }
    }

    #[test]
    fn tanh_field_trajectories_are_straight() {
        let f = TanhConsistentField {
            gains: vec![1.0, 0.5],
        };
        let x0 = [0.8, -1.3];
        let x = f.transport(0.0, &x0, 0.6).unwrap();
        let back = f.preimage(0.6, &x).unwrap();
        assert!((back[0] - x0[0]).abs() < 1e-14 && (back[1] - x0[1]).abs() < 1e-14);
    }

    #[test]
    fn continuity_holds_for_affine_pushforward() {
        for (a, b) in [(2.0, 0.0), (0.5, 1.0), (3.0, -2.0)] {
            let r = continuity_check_1d(a, b, 0.3, 1.0, 1e-5).unwrap();
            assert!(r.max_residual < 1e-4, "a = {a}: {r:?}");
        }
    }

    #[test]
    fn continuity_detects_wrong_velocity() {
        let o = AffineOracle::new(vec![vec![2.0]], vec![0.0]).unwrap();
        let grid: Vec<(f64, f64)> = (0..21).map(|j| (0.5, -3.0 + 0.3 * j as f64)).collect();
        let wrong = |t: f64, x: f64| o.velocity_point(t, &[x]).unwrap()[0] + 0.3;
        let r = continuity_residual_1d(
            affine_pushforward_density(2.0, 0.0, 0.0, 1.0),
            wrong,
            &grid,
            1e-5,
        )
        .unwrap();
        assert!(r.max_residual > 1e-2);
    }
}
