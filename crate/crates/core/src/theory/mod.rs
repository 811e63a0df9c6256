//! Numerical counterparts of the consistency results: analytic oracles and
//! the checks built on them.

mod corollary;
mod lemmas;
mod suites;
mod theorem1;
mod theorem2;

pub use corollary::{corollary_recovery_test, RecoveryConfig, RecoveryReport};
pub use lemmas::{
    affine_pushforward_density, analytic_family, continuity_check_1d, continuity_residual_1d,
    lemma_probe_points, lemma_starts, verify_lemma1, AnalyticCase, ContinuityReport, Lemma1Report,
    TanhConsistentField,
};
pub use suites::{corollary_config, run_suite, CheckRow, Suite};
pub use theorem1::{theorem1_scaling_probe, ScalingProbe, ScalingRow};
pub use theorem2::{theorem2_grid_oracle, GridProblem, Theorem2Report};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::field::{check_batch, ConstantField, Field};
use crate::nd::NumArray;
use crate::paths::AffineMap;

/// A field whose exact flow map is known in closed form.
pub trait FlowMap: Field {
    /// Transports `x` from time `t` to time `s` along the field's flow.
    fn transport(&self, t: f64, x: &[f64], s: f64) -> Result<Vec<f64>>;
}

impl FlowMap for ConstantField {
    fn transport(&self, t: f64, x: &[f64], s: f64) -> Result<Vec<f64>> {
        Ok(x.iter()
            .zip(&self.0)
            .map(|(xi, c)| xi + (s - t) * c)
            .collect())
    }
}

/// Points on the grid used to certify that `M_t` stays invertible.
const VALIDITY_GRID: usize = 10_001;

/// Ground-truth consistent field for the deterministic coupling
/// `x1 = A x0 + b`: trajectories `γ(t) = M_t x0 + t b` with
/// `M_t = (1 − t) I + t A`, velocity `u(t, x) = (A − I) M_t⁻¹ (x − t b) + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineOracle {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl AffineOracle {
    pub fn new(matrix: Vec<Vec<f64>>, offset: Vec<f64>) -> Result<Self> {
        Self::from_map(&AffineMap::new(matrix, offset)?)
    }

    pub fn from_map(map: &AffineMap) -> Result<Self> {
        map.validate()?;
        let d = map.dim();
        let flat: Vec<f64> = map.matrix.iter().flatten().copied().collect();
        let oracle = Self {
            a: DMatrix::from_row_slice(d, d, &flat),
            b: DVector::from_vec(map.offset.clone()),
        };
        if !oracle.is_valid() {
            return Err(Error::Singular(format!(
                "M_t = (1 - t) I + t A is singular for some t in [0, 1]; A = {:?}",
                map.matrix
            )));
        }
        Ok(oracle)
    }

    pub fn translation(offset: Vec<f64>) -> Self {
        let d = offset.len();
        Self {
            a: DMatrix::identity(d, d),
            b: DVector::from_vec(offset),
        }
    }

    pub fn map(&self) -> AffineMap {
        let d = self.dim();
        AffineMap {
            matrix: (0..d)
                .map(|i| (0..d).map(|j| self.a[(i, j)]).collect())
                .collect(),
            offset: self.b.iter().copied().collect(),
        }
    }

    pub fn m_t(&self, t: f64) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::identity(d, d) * (1.0 - t) + &self.a * t
    }

    /// `det M_t` keeps one sign and stays away from zero on a fine grid.
    pub fn is_valid(&self) -> bool {
        let dets: Vec<f64> = (0..VALIDITY_GRID)
            .map(|i| {
                self.m_t(i as f64 / (VALIDITY_GRID - 1) as f64)
                    .determinant()
            })
            .collect();
        let sign = dets[0].signum();
        dets.iter().all(|d| d.signum() == sign && d.abs() > 1e-9)
    }

    /// `γ(t) = M_t x0 + t b`.
    pub fn trajectory(&self, x0: &[f64], t: f64) -> Vec<f64> {
        let y = self.m_t(t) * DVector::from_column_slice(x0) + &self.b * t;
        y.iter().copied().collect()
    }

    /// The start point `x0` whose trajectory passes through `x` at time `t`.
    pub fn preimage(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let rhs = DVector::from_column_slice(x) - &self.b * t;
        let x0 = self
            .m_t(t)
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular(format!("M_t is singular at t = {t}")))?;
        Ok(x0.iter().copied().collect())
    }

    /// `u(t, x) = (A − I) M_t⁻¹ (x − t b) + b`.
    pub fn velocity_point(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let x0 = DVector::from_vec(self.preimage(t, x)?);
        let d = self.dim();
        let u = (&self.a - DMatrix::identity(d, d)) * x0 + &self.b;
        Ok(u.iter().copied().collect())
    }
}

impl Field for AffineOracle {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn velocity(&self, t: &[f64], x: &NumArray) -> Result<NumArray> {
        check_batch(self.dim(), t, x)?;
        let mut data = Vec::with_capacity(x.len());
        for (ti, xi) in t.iter().zip(x.iter_rows()) {
            data.extend(self.velocity_point(*ti, xi)?);
        }
        NumArray::new(vec![t.len(), self.dim()], data)
    }
}

impl FlowMap for AffineOracle {
    fn transport(&self, t: f64, x: &[f64], s: f64) -> Result<Vec<f64>> {
        Ok(self.trajectory(&self.preimage(t, x)?, s))
    }
}
