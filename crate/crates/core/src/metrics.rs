//! Sample-quality and flow-geometry metrics.

use serde::Serialize;

use crate::error::{check_time, Error, Result};
use crate::field::Field;
use crate::nd::NumArray;
use crate::sampler::Trajectory;

/// Largest point set accepted by [`wasserstein2_exact`].
pub const MAX_EXACT_W2: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub n: usize,
    pub details: Option<Vec<f64>>,
}

impl MetricReport {
    fn new(name: &str, value: f64, n: usize, details: Option<Vec<f64>>) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("metric {name}")));
        }
        Ok(Self {
            name: name.to_string(),
            value,
            n,
            details,
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sets(a: &NumArray, b: &NumArray) -> Result<(usize, usize)> {
    let (n, d) = a.expect_2d("metric set A")?;
    let (m, e) = b.expect_2d("metric set B")?;
    if d != e {
        return Err(Error::Shape(format!("point sets of dim {d} and {e}")));
    }
    if n == 0 || m == 0 {
        return Err(Error::Invalid("metric needs non-empty point sets".into()));
    }
    Ok((n, m))
}

/// Minimum-cost perfect matching of a square `n x n` row-major cost matrix.
/// Returns `col[i]`, the column matched to row `i`.
pub fn optimal_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::Shape(format!(
            "cost matrix of {} entries for n = {n}",
            cost.len()
        )));
    }
    // Shortest augmenting paths with row/column potentials, 1-based with a
    // virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|u| *u = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            if !delta.is_finite() {
                return Err(Error::NonFinite("assignment cost".into()));
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        col[owner[j] - 1] = j - 1;
    }
    Ok(col)
}

/// Exact 2-Wasserstein distance between two equal-size empirical measures.
pub fn wasserstein2_exact(a: &NumArray, b: &NumArray) -> Result<f64> {
    let (n, m) = check_sets(a, b)?;
    if n != m {
        return Err(Error::Shape(format!(
            "wasserstein2_exact needs equal sizes, got {n} and {m}"
        )));
    }
    if n > MAX_EXACT_W2 {
        return Err(Error::Invalid(format!(
            "wasserstein2_exact is capped at n = {MAX_EXACT_W2}, got {n}"
        )));
    }
    let mut cost = Vec::with_capacity(n * n);
    for ra in a.iter_rows() {
        cost.extend(b.iter_rows().map(|rb| sq_dist(ra, rb)));
    }
    let col = optimal_assignment(&cost, n)?;
    let total: f64 = col.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    let w = (total / n as f64).sqrt();
    MetricReport::new("w2", w, n, None).map(|r| r.value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EnergyForm {
    /// Within-set means over distinct pairs.
    #[default]
    Unbiased,
    /// Within-set means over all ordered pairs, including the diagonal.
    VStatistic,
}

fn mean_pair_distance(a: &NumArray, b: &NumArray) -> f64 {
    let mut s = 0.0;
    for ra in a.iter_rows() {
        for rb in b.iter_rows() {
            s += sq_dist(ra, rb).sqrt();
        }
    }
    s / (a.rows() * b.rows()) as f64
}

fn mean_within_distance(a: &NumArray, form: EnergyForm) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += sq_dist(a.row(i), a.row(j)).sqrt();
        }
    }
    let pairs = match form {
        EnergyForm::Unbiased if n < 2 => return 0.0,
        EnergyForm::Unbiased => (n * (n - 1)) as f64,
        EnergyForm::VStatistic => (n * n) as f64,
    };
    2.0 * s / pairs
}

/// `2 E‖a − b‖ − E‖a − a′‖ − E‖b − b′‖`.
pub fn energy_distance(a: &NumArray, b: &NumArray, form: EnergyForm) -> Result<f64> {
    check_sets(a, b)?;
    let value = 2.0 * mean_pair_distance(a, b)
        - mean_within_distance(a, form)
        - mean_within_distance(b, form);
    MetricReport::new("energy", value, a.rows(), None).map(|r| r.value)
}

/// Normalized deviation of each trajectory from its endpoint chord, averaged
/// over the batch. Per-sample values are in `details`.
pub fn straightness(traj: &Trajectory) -> Result<MetricReport> {
    let g = traj.times.len();
    if g < 3 || traj.states.len() != g {
        return Err(Error::Invalid(format!(
            "straightness needs >= 3 grid points with states, got {g}"
        )));
    }
    let (t0, t1) = (traj.times[0], traj.times[g - 1]);
    let n = traj.batch();
    let mut per = Vec::with_capacity(n);
    for i in 0..n {
        let path = traj.path_of(i);
        let (start, end) = (path[0], path[g - 1]);
        let chord = sq_dist(start, end);
        let mut dev = 0.0;
        for j in 1..g - 1 {
            let s = (traj.times[j] - t0) / (t1 - t0);
            dev += path[j]
                .iter()
                .zip(start.iter().zip(end))
                .map(|(x, (a, b))| (x - (a + s * (b - a))).powi(2))
                .sum::<f64>();
        }
        dev /= (g - 2) as f64;
        if chord == 0.0 {
            if dev == 0.0 {
                per.push(0.0);
                continue;
            }
            return Err(Error::Invalid(format!(
                "trajectory {i} returns to its start; chord has zero length"
            )));
        }
        per.push(dev / chord);
    }
    let mean = per.iter().sum::<f64>() / n as f64;
    MetricReport::new("straightness", mean, n, Some(per))
}

/// Mean over probes of `‖v(t + h, x + h v(t, x)) − v(t, x)‖² / h²`, a
/// forward-difference estimate of the squared material derivative
/// `‖∂_t v + v·∇_x v‖²`.
pub fn consistency_residual(
    field: &dyn Field,
    t: &[f64],
    x: &NumArray,
    h: f64,
) -> Result<MetricReport> {
    if !(h > 0.0) {
        return Err(Error::Invalid(format!(
            "residual step must be positive, got {h}"
        )));
    }
    for &ti in t {
        check_time(ti, 0.0, 1.0 - h)?;
    }
    let n = x.rows();
    let v = field.velocity(t, x)?;
    let mut moved = x.clone();
    moved.axpy(h, &v);
    let t_next: Vec<f64> = t.iter().map(|ti| ti + h).collect();
    let v_next = field.velocity(&t_next, &moved)?;
    let per: Vec<f64> = (0..n)
        .map(|i| sq_dist(v.row(i), v_next.row(i)) / (h * h))
        .collect();
    let mean = if n == 0 {
        0.0
    } else {
        per.iter().sum::<f64>() / n as f64
    };
    MetricReport::new("consistency_residual", mean, n, Some(per))
}
