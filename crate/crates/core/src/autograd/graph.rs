use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

use super::ops::{backward_op, forward_op, Conv2dSpec, Op, RayLayout, RunningStats};
use super::Tensor;

static TAPES_ALLOCATED: AtomicUsize = AtomicUsize::new(0);

/// Total number of [`Tape`]s constructed by this process.
pub fn tapes_allocated() -> usize {
    TAPES_ALLOCATED.load(Ordering::SeqCst)
}

/// A computation builder. Network code is written once against this trait and
/// runs either eagerly (no gradient bookkeeping) or on a [`Tape`].
pub trait Graph {
    type Node: Clone;

    /// Introduces a leaf value. `requires_grad` is ignored by evaluators that
    /// do not record.
    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Self::Node;

    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Tensor;

    fn apply(&mut self, op: Op, inputs: &[&Self::Node]) -> Result<Self::Node>;

    fn constant(&mut self, value: Tensor) -> Self::Node {
        self.leaf(value, false)
    }

    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::MatMul, &[a, b])
    }
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Add, &[a, b])
    }
    fn mul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Mul, &[a, b])
    }
    fn sub(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        let nb = self.neg(b)?;
        self.add(a, &nb)
    }
    fn concat(&mut self, parts: &[&Self::Node], axis: usize) -> Result<Self::Node> {
        self.apply(Op::Concat { axis }, parts)
    }
    fn relu(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Relu, &[a])
    }
    fn sigmoid(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Sigmoid, &[a])
    }
    fn softplus(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Softplus, &[a])
    }
    fn exp(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Exp, &[a])
    }
    fn neg(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Neg, &[a])
    }
    fn square(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Square, &[a])
    }
    fn sum(&mut self, a: &Self::Node, axis: Option<usize>) -> Result<Self::Node> {
        self.apply(Op::Sum { axis }, &[a])
    }
    fn mean(&mut self, a: &Self::Node, axis: Option<usize>) -> Result<Self::Node> {
        self.apply(Op::Mean { axis }, &[a])
    }
    fn slice(&mut self, a: &Self::Node, axis: usize, start: usize, end: usize) -> Result<Self::Node> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }
    fn reshape(&mut self, a: &Self::Node, shape: &[usize]) -> Result<Self::Node> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[a])
    }
    fn conv2d(
        &mut self,
        x: &Self::Node,
        weight: &Self::Node,
        bias: &Self::Node,
        spec: Conv2dSpec,
    ) -> Result<Self::Node> {
        self.apply(Op::Conv2d(spec), &[x, weight, bias])
    }
    fn batchnorm2d(
        &mut self,
        x: &Self::Node,
        gamma: &Self::Node,
        beta: &Self::Node,
        running: Option<Arc<RunningStats>>,
    ) -> Result<Self::Node> {
        self.apply(Op::BatchNorm2d { running }, &[x, gamma, beta])
    }
    fn composite(&mut self, sigma: &Self::Node, rgb: &Self::Node, layout: Arc<RayLayout>) -> Result<Self::Node> {
        self.apply(Op::Composite(layout), &[sigma, rgb])
    }
}

/// Immediate evaluation with no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type Node = Tensor;

    fn leaf(&mut self, value: Tensor, _requires_grad: bool) -> Tensor {
        value
    }

    fn value<'a>(&'a self, node: &'a Tensor) -> &'a Tensor {
        node
    }

    fn apply(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        forward_op(&op, inputs)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Record {
    value: Tensor,
    requires_grad: bool,
    op: Option<(Op, Vec<usize>)>,
}

/// Reverse-mode recording. Records are appended in evaluation order, so every
/// record's inputs precede it.
#[derive(Debug)]
pub struct Tape {
    records: Vec<Record>,
    /// Sign pattern of every ReLU input, recorded only when enabled.
    kinks: Option<Vec<bool>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        TAPES_ALLOCATED.fetch_add(1, Ordering::SeqCst);
        Tape {
            records: Vec::new(),
            kinks: None,
        }
    }

    /// A tape that also records which side of zero each ReLU input lies on.
    /// Two evaluations with equal patterns lie in the same smooth piece.
    pub fn with_kink_tracking() -> Self {
        let mut t = Tape::new();
        t.kinks = Some(Vec::new());
        t
    }

    pub fn kink_pattern(&self) -> Option<&[bool]> {
        self.kinks.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Op names in recording order, leaves reported as `"leaf"`.
    pub fn op_trace(&self) -> Vec<&'static str> {
        self.records
            .iter()
            .map(|r| r.op.as_ref().map_or("leaf", |(op, _)| op.name()))
            .collect()
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = &self.records[loss.0].value;
        if value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        let seed = Tensor::new(value.shape().to_vec(), vec![1.0])?;
        self.backward_with(&[(loss, seed)])
    }

    /// Backpropagates from arbitrary output seeds. Gradients accumulate
    /// additively where the graph branches.
    pub fn backward_with(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.records.len()];
        let mut last = 0;
        for (var, g) in seeds {
            if g.shape() != self.records[var.0].value.shape() {
                return Err(Error::shape("backward seed shape mismatch"));
            }
            accumulate(&mut grads[var.0], g.clone())?;
            last = last.max(var.0);
        }
        for idx in (0..=last).rev() {
            let rec = &self.records[idx];
            let Some((op, inputs)) = &rec.op else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let input_values: Vec<&Tensor> = inputs.iter().map(|&i| &self.records[i].value).collect();
            let input_grads = backward_op(op, &input_values, &rec.value, &g)?;
            for (&i, ig) in inputs.iter().zip(input_grads) {
                if self.records[i].requires_grad {
                    accumulate(&mut grads[i], ig)?;
                }
            }
            // keep the gradient of interior nodes available to callers
            grads[idx] = Some(g);
        }
        let mut map = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                map.insert(i, g);
            }
        }
        Ok(Gradients { grads: map })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl Graph for Tape {
    type Node = Var;

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.records.push(Record {
            value,
            requires_grad,
            op: None,
        });
        Var(self.records.len() - 1)
    }

    fn value<'a>(&'a self, node: &'a Var) -> &'a Tensor {
        &self.records[node.0].value
    }

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var> {
        let out = {
            let values: Vec<&Tensor> = inputs.iter().map(|v| &self.records[v.0].value).collect();
            if let (Some(kinks), Op::Relu) = (self.kinks.as_mut(), &op) {
                kinks.extend(values[0].data().iter().map(|&x| x > 0.0));
            }
            forward_op(&op, &values)?
        };
        let requires_grad = inputs.iter().any(|v| self.records[v.0].requires_grad);
        let op = requires_grad.then(|| (op, inputs.iter().map(|v| v.0).collect()));
        self.records.push(Record {
            value: out,
            requires_grad,
            op,
        });
        Ok(Var(self.records.len() - 1))
    }
}

/// Gradients from one backward pass, keyed by tape position.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var.0)
    }

    /// Gradient for `var`, zero-filled (shaped like `like`) when unreachable.
    pub fn wrt(&self, var: Var, like: &Tensor) -> Tensor {
        self.grads.get(&var.0).cloned().unwrap_or_else(|| like.zeros_like())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let sq = tape.square(&x).unwrap();
        let loss = tape.sum(&sq, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.sigmoid(&x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!((grads.get(x).unwrap().item().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![3]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let unused = tape.leaf(Tensor::ones(vec![2]), true);
        let loss = tape.square(&x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        let like = Tensor::ones(vec![2]);
        assert_eq!(grads.wrt(unused, &like).data(), &[0.0, 0.0]);
    }

    #[test]
    fn branches_accumulate() {
        // loss = x*x + x  ->  2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5), true);
        let xx = tape.mul(&x, &x).unwrap();
        let loss = tape.add(&xx, &x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(x).unwrap().item().unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn eager_matches_tape_values() {
        let a = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let mut eager = Eager;
        let ea = eager.constant(a.clone());
        let e = eager.softplus(&ea).unwrap();
        let mut tape = Tape::new();
        let ta = tape.leaf(a, true);
        let t = tape.softplus(&ta).unwrap();
        assert_eq!(e, *tape.value(&t));
    }
}
