//! Wengert-list reverse-mode differentiation.
//!
//! Values are computed eagerly while the graph is recorded, so a freshly
//! built tape is always ready for `backward`. Changing a leaf with
//! [`Tape::set_leaf`] marks the tape stale until [`Tape::recompute`] or
//! [`Tape::forward`] replays it.

use super::array::{Activation, NumArray};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    /// Trainable leaf; the payload is its position in [`Tape::params`].
    Param(usize),
    Const,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(LeafKind),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Act(Var, Activation),
    Scale(Var, f64),
    SumAll(Var),
    /// Identity in the forward pass, blocks gradient flow in the backward pass.
    Detach(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Act(..) => "activation",
            Op::Scale(..) => "scale",
            Op::SumAll(..) => "sum",
            Op::Detach(..) => "detach",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: NumArray,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
    stale: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaves in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &NumArray {
        &self.nodes[v.0].value
    }

    pub fn leaf_kind(&self, v: Var) -> Option<LeafKind> {
        match self.nodes[v.0].op {
            Op::Leaf(k) => Some(k),
            _ => None,
        }
    }

    fn push_leaf(&mut self, kind: LeafKind, value: NumArray) -> Result<Var> {
        let value = value.ensure_finite("leaf")?;
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            value,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: NumArray) -> Result<Var> {
        self.push_leaf(LeafKind::Input, value)
    }

    pub fn param(&mut self, value: NumArray) -> Result<Var> {
        let v = self.push_leaf(LeafKind::Param(self.params.len()), value)?;
        self.params.push(v);
        Ok(v)
    }

    pub fn constant(&mut self, value: NumArray) -> Result<Var> {
        self.push_leaf(LeafKind::Const, value)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddBias(x, bias))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        self.push(Op::Act(x, act))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(x, s))
    }

    /// Sum of all elements as a `[1]` array.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SumAll(x))
    }

    pub fn detach(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Detach(x))
    }

    fn eval(&self, op: &Op) -> Result<NumArray> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = match op {
            Op::Leaf(_) => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) => val(a).zip_map(val(b), |x, y| x + y)?,
            Op::Sub(a, b) => val(a).zip_map(val(b), |x, y| x - y)?,
            Op::Mul(a, b) => val(a).zip_map(val(b), |x, y| x * y)?,
            Op::MatMul(a, b) => val(a).matmul(val(b))?,
            Op::AddBias(x, b) => val(x).add_bias(val(b))?,
            Op::Act(x, act) => act.forward(val(x)),
            Op::Scale(x, s) => val(x).map(|v| v * s),
            Op::SumAll(x) => NumArray::scalar(val(x).sum()),
            Op::Detach(x) => val(x).clone(),
        };
        out.ensure_finite(op.name())
    }

    /// Replaces the value of a leaf. The tape is stale until recomputed.
    pub fn set_leaf(&mut self, v: Var, value: NumArray) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf(_)) {
            return Err(Error::Invalid(format!("node {} is not a leaf", v.0)));
        }
        node.value.same_shape(&value, "set_leaf")?;
        node.value = value;
        self.stale = true;
        Ok(())
    }

    /// Replays every recorded operation on the current leaf values.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf(_)) {
                if !self.nodes[i].value.is_finite() {
                    return Err(Error::NonFinite("leaf".into()));
                }
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        self.stale = false;
        Ok(())
    }

    /// Sets the given leaves, replays the graph and returns `output`.
    pub fn forward(&mut self, inputs: &[(Var, NumArray)], output: Var) -> Result<NumArray> {
        for (v, value) in inputs {
            self.set_leaf(*v, value.clone())?;
        }
        self.recompute()?;
        Ok(self.value(output).clone())
    }

    /// Reverse sweep from `root` seeded with `seed` (same shape as `root`).
    pub fn backward(&self, root: Var, seed: NumArray) -> Result<Gradients> {
        if self.stale {
            return Err(Error::BackwardBeforeForward);
        }
        self.value(root).same_shape(&seed, "backward seed")?;
        let mut grads: Vec<Option<NumArray>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = &self.nodes[i].op;
            let val = |v: &Var| &self.nodes[v.0].value;
            match op {
                Op::Leaf(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, 1.0);
                    accumulate(&mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g, 1.0);
                    accumulate(&mut grads, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(b), |x, y| x * y)?;
                    let gb = g.zip_map(val(a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, &ga, 1.0);
                    accumulate(&mut grads, *b, &gb, 1.0);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(val(b))?;
                    let gb = val(a).matmul_tn(&g)?;
                    accumulate(&mut grads, *a, &ga, 1.0);
                    accumulate(&mut grads, *b, &gb, 1.0);
                }
                Op::AddBias(x, b) => {
                    let gb = g.sum_rows(val(b).shape());
                    accumulate(&mut grads, *x, &g, 1.0);
                    accumulate(&mut grads, *b, &gb, 1.0);
                }
                Op::Act(x, act) => {
                    let gx = g.zip_map(val(x), |gv, xv| gv * act.derivative(xv))?;
                    accumulate(&mut grads, *x, &gx, 1.0);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, &g, *s),
                Op::SumAll(x) => {
                    let gx = NumArray::filled(val(x).shape(), g.data()[0]);
                    accumulate(&mut grads, *x, &gx, 1.0);
                }
                Op::Detach(_) => {}
            }
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite("backward".into()));
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.clone(),
        })
    }
}

fn accumulate(grads: &mut [Option<NumArray>], v: Var, g: &NumArray, alpha: f64) {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(alpha, g),
        slot @ None => {
            *slot = Some(if alpha == 1.0 {
                g.clone()
            } else {
                g.map(|x| alpha * x)
            });
        }
    }
}

/// Result of a reverse sweep. Leaves that the root does not depend on (or
/// only reaches through a detach) report zero gradients.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<NumArray>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> NumArray {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => NumArray::zeros(&self.shapes[v.0]),
        }
    }

    /// True when some gradient actually reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        matches!(self.grads.get(v.0), Some(Some(_)))
    }

    /// Gradients of the trainable leaves, in registration order.
    pub fn params(&self) -> Vec<NumArray> {
        self.params.iter().map(|&p| self.wrt(p)).collect()
    }
}

/// Max relative discrepancy between the tape's parameter gradients of a
/// scalar `root` and central differences with step `h`.
pub fn check_gradient_fd(tape: &mut Tape, root: Var, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    if tape.value(root).len() != 1 {
        return Err(Error::Shape("gradient check needs a scalar root".into()));
    }
    tape.recompute()?;
    let analytic = tape.backward(root, NumArray::scalar(1.0))?.params();
    let params = tape.params().to_vec();
    let mut worst: f64 = 0.0;
    for (p, grad) in params.iter().zip(&analytic) {
        let original = tape.value(*p).clone();
        for i in 0..original.len() {
            let mut probe = original.clone();
            probe.data_mut()[i] = original.data()[i] + h;
            let up = tape.forward(&[(*p, probe.clone())], root)?.data()[0];
            probe.data_mut()[i] = original.data()[i] - h;
            let down = tape.forward(&[(*p, probe)], root)?.data()[0];
            let central = (up - down) / (2.0 * h);
            if !central.is_finite() {
                return Err(Error::NonFinite("finite difference".into()));
            }
            let a = grad.data()[i];
            let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
            worst = worst.max(rel);
        }
        tape.set_leaf(*p, original)?;
    }
    tape.recompute()?;
    Ok(worst)
}
