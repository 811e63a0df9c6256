//! The velocity-field abstraction shared by learned networks and analytic
//! reference fields.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::nd::NumArray;

/// A batched map `(t, x) -> v(t, x)` on `[0, 1] x R^d`.
///
/// `t` holds one time per row of the `[n, d]` array `x`.
pub trait Field {
    fn dim(&self) -> usize;
    fn velocity(&self, t: &[f64], x: &NumArray) -> Result<NumArray>;
}

pub(crate) fn check_batch(dim: usize, t: &[f64], x: &NumArray) -> Result<()> {
    let (n, d) = x.expect_2d("field input")?;
    if d != dim || n != t.len() {
        return Err(Error::Shape(format!(
            "field of dim {dim} given {n}x{d} points with {} times",
            t.len()
        )));
    }
    Ok(())
}

/// Velocity at a single point.
pub fn velocity_at(field: &dyn Field, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let x = NumArray::new(vec![1, x.len()], x.to_vec())?;
    Ok(field.velocity(&[t], &x)?.into_data())
}

/// Velocity of every row at a shared time.
pub fn velocity_shared(field: &dyn Field, t: f64, x: &NumArray) -> Result<NumArray> {
    field.velocity(&vec![t; x.rows()], x)
}

/// Straight-flow endpoint map `x + (T - t) v(t, x)`.
pub fn flow_endpoint(field: &dyn Field, t: f64, x: &NumArray, seg_end: f64) -> Result<NumArray> {
    if t > seg_end {
        return Err(Error::Invalid(format!(
            "endpoint time {seg_end} precedes t = {t}"
        )));
    }
    let v = velocity_shared(field, t, x)?;
    let mut out = x.clone();
    out.axpy(seg_end - t, &v);
    Ok(out)
}

/// `v(t, x) = c` everywhere.
#[derive(Clone, Debug)]
pub struct ConstantField(pub Vec<f64>);

impl Field for ConstantField {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn velocity(&self, t: &[f64], x: &NumArray) -> Result<NumArray> {
        check_batch(self.dim(), t, x)?;
        let rows: Vec<&[f64]> = vec![&self.0; t.len()];
        if rows.is_empty() {
            return Ok(NumArray::zeros(&[0, self.dim()]));
        }
        NumArray::from_rows(&rows)
    }
}

/// Pointwise closure field, handy for analytic test problems.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64]) -> Vec<f64>> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64]) -> Vec<f64>> Field for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, t: &[f64], x: &NumArray) -> Result<NumArray> {
        check_batch(self.dim, t, x)?;
        let mut data = Vec::with_capacity(x.len());
        for (ti, xi) in t.iter().zip(x.iter_rows()) {
            let v = (self.f)(*ti, xi);
            if v.len() != self.dim {
                return Err(Error::Shape(
                    "closure field returned wrong dimension".into(),
                ));
            }
            data.extend(v);
        }
        NumArray::new(vec![t.len(), self.dim], data)?.ensure_finite("closure field")
    }
}

/// Wraps a field and counts batched evaluations.
pub struct CountingField<'a> {
    inner: &'a dyn Field,
    calls: Cell<usize>,
}

impl<'a> CountingField<'a> {
    pub fn new(inner: &'a dyn Field) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl Field for CountingField<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn velocity(&self, t: &[f64], x: &NumArray) -> Result<NumArray> {
        self.calls.set(self.calls.get() + 1);
        self.inner.velocity(t, x)
    }
}
