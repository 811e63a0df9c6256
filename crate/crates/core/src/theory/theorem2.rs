//! Pointwise minimizer of the segment loss on tabulated 1D trajectories and
//! its error recursion.
//!
//! With `θ⁻ = θ` and `v_θ(t, x_t)` free per grid point, the stationarity
//! condition at grid time `t_k` reads
//! `(T − t_k)(x_k + (T − t_k) v_k − x_{k+1} − (T − t_{k+1}) v_{k+1}) + α (v_k − v_{k+1}) = 0`
//! with the terminal value pinned to the oracle, `v_N = v*_N`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{normal, uniform, Rng};

/// Trajectories tabulated on `S, S + Δt, ..., T = S + N Δt`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridProblem {
    pub start: f64,
    pub dt: f64,
    pub steps: usize,
    pub alpha: f64,
    /// One row of `steps + 1` states per trajectory.
    pub trajectories: Vec<Vec<f64>>,
    /// `v*(T, x_T)` per trajectory; the chord slope is undefined there.
    pub terminal_velocity: Vec<f64>,
}

impl GridProblem {
    pub fn new(
        start: f64,
        dt: f64,
        alpha: f64,
        trajectories: Vec<Vec<f64>>,
        terminal_velocity: Vec<f64>,
    ) -> Result<Self> {
        let steps = trajectories
            .first()
            .map_or(0, |r| r.len().saturating_sub(1));
        let p = Self {
            start,
            dt,
            steps,
            alpha,
            trajectories,
            terminal_velocity,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.trajectories.iter().any(|r| r.len() != self.steps + 1) {
            return Err(Error::Shape(
                "every trajectory needs the same number (>= 2) of states".into(),
            ));
        }
        if self.terminal_velocity.len() != self.trajectories.len() {
            return Err(Error::Shape("one terminal velocity per trajectory".into()));
        }
        if !(self.dt > 0.0) || !(self.alpha > 0.0) {
            return Err(Error::Invalid(format!(
                "need Δt > 0 and α > 0, got {} and {}",
                self.dt, self.alpha
            )));
        }
        let all = self
            .trajectories
            .iter()
            .flatten()
            .chain(&self.terminal_velocity);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid problem values".into()));
        }
        Ok(())
    }

    pub fn time(&self, k: usize) -> f64 {
        self.start + k as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.steps)
    }

    /// `v*_k = (x_T − x_k) / (T − t_k)` for `k < N`, the terminal value at `N`.
    pub fn oracle(&self, j: usize) -> Vec<f64> {
        let x = &self.trajectories[j];
        let end = self.end();
        let mut v: Vec<f64> = (0..self.steps)
            .map(|k| (x[self.steps] - x[k]) / (end - self.time(k)))
            .collect();
        v.push(self.terminal_velocity[j]);
        v
    }

    /// Random-walk trajectories with an unrelated terminal velocity, so the
    /// oracle is inconsistent at every step.
    pub fn random(
        rng: &mut Rng,
        trajectories: usize,
        steps: usize,
        dt: f64,
        alpha: f64,
    ) -> Result<Self> {
        let start = uniform(rng, 0.0, 1.0 - steps as f64 * dt).max(0.0);
        let mut rows = Vec::with_capacity(trajectories);
        let mut terminal = Vec::with_capacity(trajectories);
        for _ in 0..trajectories {
            let mut x = vec![normal(rng)];
            let drift = normal(rng);
            for _ in 0..steps {
                let last = *x.last().expect("non-empty");
                x.push(last + dt * (drift + rng.random_range(-2.0..2.0)));
            }
            rows.push(x);
            terminal.push(normal(rng));
        }
        Self::new(start, dt, alpha, rows, terminal)
    }

    /// Straight trajectories `x_k = x_0 + (t_k − S) c` with `v*_N = c`.
    pub fn consistent(
        rng: &mut Rng,
        trajectories: usize,
        steps: usize,
        dt: f64,
        alpha: f64,
    ) -> Result<Self> {
        let mut rows = Vec::with_capacity(trajectories);
        let mut terminal = Vec::with_capacity(trajectories);
        for _ in 0..trajectories {
            let (x0, c) = (normal(rng), normal(rng));
            rows.push((0..=steps).map(|k| x0 + k as f64 * dt * c).collect());
            terminal.push(c);
        }
        Self::new(0.0, dt, alpha, rows, terminal)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem2Report {
    /// `v_k − v*_k` from the backward solve of the stationarity condition.
    pub solved_error: Vec<Vec<f64>>,
    /// The same errors from a simultaneous dense solve.
    pub direct_error: Vec<Vec<f64>>,
    /// Errors predicted by the closed-form recursion.
    pub recursion_error: Vec<Vec<f64>>,
    /// Max `|solved − recursion|`.
    pub max_discrepancy: f64,
    /// Max `|direct − recursion|`.
    pub max_direct_discrepancy: f64,
}

fn backward_solve(p: &GridProblem, j: usize) -> Vec<f64> {
    let x = &p.trajectories[j];
    let end = p.end();
    let n = p.steps;
    let mut v = vec![0.0; n + 1];
    v[n] = p.terminal_velocity[j];
    for k in (0..n).rev() {
        let gap = end - p.time(k);
        let gap_next = end - p.time(k + 1);
        v[k] = (gap * (x[k + 1] - x[k]) + (gap * gap_next + p.alpha) * v[k + 1])
            / (gap * gap + p.alpha);
    }
    v
}

fn dense_solve(p: &GridProblem, j: usize) -> Result<Vec<f64>> {
    let x = &p.trajectories[j];
    let end = p.end();
    let n = p.steps;
    let pinned = p.terminal_velocity[j];
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for k in 0..n {
        let gap = end - p.time(k);
        let gap_next = end - p.time(k + 1);
        let couple = gap * gap_next + p.alpha;
        m[(k, k)] = gap * gap + p.alpha;
        rhs[k] = gap * (x[k + 1] - x[k]);
        if k + 1 < n {
            m[(k, k + 1)] = -couple;
        } else {
            rhs[k] += couple * pinned;
        }
    }
    let v = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("stationarity system".into()))?;
    let mut v: Vec<f64> = v.iter().copied().collect();
    v.push(pinned);
    Ok(v)
}

fn recursion(p: &GridProblem, oracle: &[f64]) -> Vec<f64> {
    let end = p.end();
    let n = p.steps;
    let mut e = vec![0.0; n + 1];
    for k in (0..n).rev() {
        let gap = end - p.time(k);
        let denom = gap * gap + p.alpha;
        e[k] = p.alpha / denom * (oracle[k + 1] - oracle[k])
            + ((gap - p.dt) * gap + p.alpha) / denom * e[k + 1];
    }
    e
}

/// Solves the pinned stationarity condition twice (backward recursion and
/// dense linear solve) and compares the resulting errors `v − v*` against the
/// closed-form error recursion.
pub fn theorem2_grid_oracle(problem: &GridProblem) -> Result<Theorem2Report> {
    problem.validate()?;
    let mut report = Theorem2Report {
        solved_error: Vec::new(),
        direct_error: Vec::new(),
        recursion_error: Vec::new(),
        max_discrepancy: 0.0,
        max_direct_discrepancy: 0.0,
    };
    for j in 0..problem.trajectories.len() {
        let oracle = problem.oracle(j);
        let err = |v: Vec<f64>| {
            v.iter()
                .zip(&oracle)
                .map(|(a, b)| a - b)
                .collect::<Vec<f64>>()
        };
        let solved = err(backward_solve(problem, j));
        let direct = err(dense_solve(problem, j)?);
        let predicted = recursion(problem, &oracle);
        for k in 0..=problem.steps {
            report.max_discrepancy = report.max_discrepancy.max((solved[k] - predicted[k]).abs());
            report.max_direct_discrepancy = report
                .max_direct_discrepancy
                .max((direct[k] - predicted[k]).abs());
        }
        report.solved_error.push(solved);
        report.direct_error.push(direct);
        report.recursion_error.push(predicted);
    }
    if !report.max_discrepancy.is_finite() || !report.max_direct_discrepancy.is_finite() {
        return Err(Error::NonFinite("grid oracle errors".into()));
    }
    Ok(report)
}
