//! Few-step Euler transport from noise to data.

use crate::error::{Error, Result};
use crate::field::{velocity_shared, CountingField, Field};
use crate::nd::NumArray;

/// States of a batch on an increasing time grid from 0 to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<NumArray>,
    /// Batched field evaluations performed; each one costs every sample one NFE.
    pub nfe: usize,
}

impl Trajectory {
    pub fn endpoint(&self) -> &NumArray {
        self.states
            .last()
            .expect("trajectory has at least two states")
    }

    pub fn batch(&self) -> usize {
        self.states[0].rows()
    }

    /// The path of sample `i` as one point per grid time.
    pub fn path_of(&self, i: usize) -> Vec<&[f64]> {
        self.states.iter().map(|s| s.row(i)).collect()
    }
}

/// `n` equally spaced times from 0 to 1 inclusive.
pub fn uniform_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Invalid(format!(
            "a time grid needs at least 2 points, got {n}"
        )));
    }
    Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    let ok = grid.len() >= 2
        && grid[0] == 0.0
        && grid[grid.len() - 1] == 1.0
        && grid.windows(2).all(|w| w[1] > w[0]);
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(
            "time grid must increase strictly from 0 to 1".into(),
        ))
    }
}

fn euler_step(field: &dyn Field, t: f64, h: f64, x: &mut NumArray) -> Result<()> {
    let v = velocity_shared(field, t, x)?;
    x.axpy(h, &v);
    if !x.is_finite() {
        return Err(Error::NonFinite(format!(
            "sampler state after step at t = {t}"
        )));
    }
    Ok(())
}

fn check_start(field: &dyn Field, x0: &NumArray) -> Result<()> {
    let (_, d) = x0.expect_2d("sampler start")?;
    if d != field.dim() {
        return Err(Error::Shape(format!(
            "field of dim {} given points of dim {d}",
            field.dim()
        )));
    }
    Ok(())
}

/// One evaluation per segment at its left endpoint:
/// `x_{(i+1)/K} = x_{i/K} + v(i/K, x_{i/K}) / K`.
pub fn sample_segment_jumps(field: &dyn Field, x0: &NumArray, k: usize) -> Result<NumArray> {
    check_start(field, x0)?;
    if k == 0 {
        return Err(Error::Invalid("segment count must be at least 1".into()));
    }
    let h = 1.0 / k as f64;
    let mut x = x0.clone();
    for i in 0..k {
        euler_step(field, i as f64 / k as f64, h, &mut x)?;
    }
    Ok(x)
}

/// `m` Euler steps of size `1 / (K m)` inside each of the `K` segments.
pub fn sample_euler(field: &dyn Field, x0: &NumArray, k: usize, m: usize) -> Result<NumArray> {
    check_start(field, x0)?;
    if k == 0 || m == 0 {
        return Err(Error::Invalid(format!(
            "need K >= 1 and m >= 1, got K = {k}, m = {m}"
        )));
    }
    let steps = k * m;
    let h = 1.0 / steps as f64;
    let mut x = x0.clone();
    for s in 0..steps {
        euler_step(field, s as f64 / steps as f64, h, &mut x)?;
    }
    Ok(x)
}

/// Euler integration between consecutive grid times, keeping every state.
pub fn record_trajectory(field: &dyn Field, x0: &NumArray, grid: &[f64]) -> Result<Trajectory> {
    check_start(field, x0)?;
    check_grid(grid)?;
    let counter = CountingField::new(field);
    let mut states = Vec::with_capacity(grid.len());
    let mut x = x0.clone();
    states.push(x.clone());
    for w in grid.windows(2) {
        euler_step(&counter, w[0], w[1] - w[0], &mut x)?;
        states.push(x.clone());
    }
    Ok(Trajectory {
        times: grid.to_vec(),
        states,
        nfe: counter.calls(),
    })
}

/// Samples with an NFE count reported by a call counter.
pub fn sample_counted(
    field: &dyn Field,
    x0: &NumArray,
    k: usize,
    m: usize,
) -> Result<(NumArray, usize)> {
    let counter = CountingField::new(field);
    let x = sample_euler(&counter, x0, k, m)?;
    Ok((x, counter.calls()))
}
