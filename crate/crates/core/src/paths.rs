//! Couplings of `(p0, p1)` and conditional interpolation paths.
//!
//! Time runs from `t = 0` (noise, `x0`) to `t = 1` (data, `x1`). A training
//! tuple always evaluates `x_t` and `x_{t+Δt}` on the same `(x0, x1)` pair.

use serde::{Deserialize, Serialize};

use crate::datasets::{sample, DistributionSpec};
use crate::error::{check_time, Error, Result};
use crate::nd::NumArray;
use crate::rng::{uniform, Rng};

/// `x ↦ A x + b` with `A` stored as rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineMap {
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl AffineMap {
    pub fn new(matrix: Vec<Vec<f64>>, offset: Vec<f64>) -> Result<Self> {
        let m = Self { matrix, offset };
        m.validate()?;
        Ok(m)
    }

    pub fn identity_shift(offset: Vec<f64>) -> Self {
        let d = offset.len();
        let matrix = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { matrix, offset }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.offset.len();
        if d == 0 || self.matrix.len() != d || self.matrix.iter().any(|r| r.len() != d) {
            return Err(Error::Shape(format!(
                "affine map needs a square {d}x{d} matrix matching the offset"
            )));
        }
        if self
            .matrix
            .iter()
            .flatten()
            .chain(&self.offset)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("affine map".into()));
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .iter()
            .zip(&self.offset)
            .map(|(row, b)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Coupling {
    /// `x0 ~ source` and `x1 ~ target` drawn independently.
    Independent {
        source: DistributionSpec,
        target: DistributionSpec,
    },
    /// `x0 ~ source`, `x1 = A x0 + b`.
    Affine {
        source: DistributionSpec,
        map: AffineMap,
    },
}

impl Coupling {
    pub fn dim(&self) -> usize {
        match self {
            Coupling::Independent { source, .. } | Coupling::Affine { source, .. } => source.dim(),
        }
    }

    pub fn source(&self) -> &DistributionSpec {
        match self {
            Coupling::Independent { source, .. } | Coupling::Affine { source, .. } => source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Coupling::Independent { source, target } => {
                source.validate()?;
                target.validate()?;
                if source.dim() != target.dim() {
                    return Err(Error::Shape(format!(
                        "source dim {} vs target dim {}",
                        source.dim(),
                        target.dim()
                    )));
                }
            }
            Coupling::Affine { source, map } => {
                source.validate()?;
                map.validate()?;
                if map.dim() != source.dim() {
                    return Err(Error::Shape(format!(
                        "affine map dim {} vs source dim {}",
                        map.dim(),
                        source.dim()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Draws `n` coupled pairs: all sources first, then all targets.
    pub fn sample_pair(&self, n: usize, rng: &mut Rng) -> Result<(NumArray, NumArray)> {
        self.validate()?;
        match self {
            Coupling::Independent { source, target } => {
                let x0 = sample(source, n, rng)?;
                let x1 = sample(target, n, rng)?;
                Ok((x0, x1))
            }
            Coupling::Affine { source, map } => {
                let x0 = sample(source, n, rng)?;
                let mut data = Vec::with_capacity(x0.len());
                for r in x0.iter_rows() {
                    data.extend(map.apply(r));
                }
                let x1 = NumArray::new(x0.shape().to_vec(), data)?;
                Ok((x0, x1))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PathKind {
    /// `x_t = (1 − t) x0 + t x1`.
    Linear,
    /// `x_t = cos(πt/2) x0 + sin(πt/2) x1`.
    Trig,
    /// Piecewise-linear through the waypoint `(1 − τ) x0 + τ x1 + shift` at
    /// time `τ = knot`. Used to build kinked conditional trajectories.
    Bent { knot: f64, shift: Vec<f64> },
}

impl PathKind {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if let PathKind::Bent { knot, shift } = self {
            if !(*knot > 0.0 && *knot < 1.0) {
                return Err(Error::Invalid(format!(
                    "bent path knot {knot} must lie in (0, 1)"
                )));
            }
            if shift.len() != dim {
                return Err(Error::Shape(format!(
                    "bent path shift of dim {} for data dim {dim}",
                    shift.len()
                )));
            }
        }
        Ok(())
    }

    fn waypoint(knot: f64, shift: &[f64], x0: f64, x1: f64, k: usize) -> f64 {
        (1.0 - knot) * x0 + knot * x1 + shift[k]
    }

    /// Interpolant at time `t` for one pair.
    pub fn point(&self, x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
        check_time(t, 0.0, 1.0)?;
        Ok(match self {
            PathKind::Linear => x0
                .iter()
                .zip(x1)
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect(),
            PathKind::Trig => {
                let (s, c) = (std::f64::consts::FRAC_PI_2 * t).sin_cos();
                x0.iter().zip(x1).map(|(a, b)| c * a + s * b).collect()
            }
            PathKind::Bent { knot, shift } => x0
                .iter()
                .zip(x1)
                .enumerate()
                .map(|(k, (&a, &b))| {
                    let w = Self::waypoint(*knot, shift, a, b, k);
                    if t < *knot {
                        a + (t / knot) * (w - a)
                    } else {
                        w + ((t - knot) / (1.0 - knot)) * (b - w)
                    }
                })
                .collect(),
        })
    }

    /// Time derivative of [`PathKind::point`] (right derivative at a kink).
    pub fn velocity(&self, x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
        check_time(t, 0.0, 1.0)?;
        Ok(match self {
            PathKind::Linear => x0.iter().zip(x1).map(|(a, b)| b - a).collect(),
            PathKind::Trig => {
                let h = std::f64::consts::FRAC_PI_2;
                let (s, c) = (h * t).sin_cos();
                x0.iter()
                    .zip(x1)
                    .map(|(a, b)| h * (-s * a + c * b))
                    .collect()
            }
            PathKind::Bent { knot, shift } => x0
                .iter()
                .zip(x1)
                .enumerate()
                .map(|(k, (&a, &b))| {
                    let w = Self::waypoint(*knot, shift, a, b, k);
                    if t < *knot {
                        (w - a) / knot
                    } else {
                        (b - w) / (1.0 - knot)
                    }
                })
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    pub path: PathKind,
    pub coupling: Coupling,
}

impl PathSpec {
    pub fn new(path: PathKind, coupling: Coupling) -> Result<Self> {
        let spec = Self { path, coupling };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear(coupling: Coupling) -> Self {
        Self {
            path: PathKind::Linear,
            coupling,
        }
    }

    pub fn dim(&self) -> usize {
        self.coupling.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.coupling.validate()?;
        self.path.validate(self.dim())
    }
}

/// Batched training tuples drawn on shared `(x0, x1)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub t: Vec<f64>,
    pub dt: f64,
    pub x0: NumArray,
    pub x1: NumArray,
    pub x_t: NumArray,
    /// `x_{t+Δt}` on the same pair as `x_t`.
    pub x_next: NumArray,
    /// Conditional velocity at `(t, x_t)`.
    pub u_cond: NumArray,
}

fn map_rows(
    x0: &NumArray,
    x1: &NumArray,
    t: &[f64],
    mut f: impl FnMut(&[f64], &[f64], f64) -> Result<Vec<f64>>,
) -> Result<NumArray> {
    let mut data = Vec::with_capacity(x0.len());
    for ((a, b), &ti) in x0.iter_rows().zip(x1.iter_rows()).zip(t) {
        data.extend(f(a, b, ti)?);
    }
    NumArray::new(x0.shape().to_vec(), data)
}

/// Batched interpolant, one time per row.
pub fn path_points(path: &PathKind, x0: &NumArray, x1: &NumArray, t: &[f64]) -> Result<NumArray> {
    check_pairs(x0, x1, t)?;
    map_rows(x0, x1, t, |a, b, ti| path.point(a, b, ti))
}

/// Batched conditional velocity, one time per row.
pub fn conditional_velocities(
    path: &PathKind,
    x0: &NumArray,
    x1: &NumArray,
    t: &[f64],
) -> Result<NumArray> {
    check_pairs(x0, x1, t)?;
    map_rows(x0, x1, t, |a, b, ti| path.velocity(a, b, ti))
}

fn check_pairs(x0: &NumArray, x1: &NumArray, t: &[f64]) -> Result<()> {
    x0.same_shape(x1, "path endpoints")?;
    let (n, _) = x0.expect_2d("path endpoints")?;
    if n != t.len() {
        return Err(Error::Shape(format!("{n} pairs with {} times", t.len())));
    }
    Ok(())
}

/// Builds training tuples for given pairs and per-row times.
pub fn tuples_at(
    path: &PathKind,
    x0: NumArray,
    x1: NumArray,
    t: Vec<f64>,
    dt: f64,
) -> Result<TrainBatch> {
    let t_next: Vec<f64> = t.iter().map(|ti| ti + dt).collect();
    let x_t = path_points(path, &x0, &x1, &t)?;
    let x_next = path_points(path, &x0, &x1, &t_next)?;
    let u_cond = conditional_velocities(path, &x0, &x1, &t)?;
    Ok(TrainBatch {
        t,
        dt,
        x0,
        x1,
        x_t,
        x_next,
        u_cond,
    })
}

/// Draws `n` pairs, then `t ~ U[start, end − Δt]` per row.
pub fn sample_train_tuple(
    spec: &PathSpec,
    (start, end): (f64, f64),
    dt: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<TrainBatch> {
    if !(dt > 0.0) || !(end - start - dt > 1e-12) {
        return Err(Error::Invalid(format!(
            "degenerate segment [{start}, {end}] for Δt = {dt}"
        )));
    }
    let (x0, x1) = spec.coupling.sample_pair(n, rng)?;
    let t = (0..n).map(|_| uniform(rng, start, end - dt)).collect();
    tuples_at(&spec.path, x0, x1, t, dt)
}
