use std::borrow::Cow;

use super::kernels::{self, ConvParams};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, p: ConvParams },
    Relu(Var),
    Add(Var, Var),
    PixelShuffle(Var, usize),
    L1 { pred: Var, target: Var },
    Mse { pred: Var, target: Var },
    Sum(Var),
    WeightedSum(Var, Tensor),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep. Leaves may borrow their tensors,
/// which lets a network's parameters take part without being copied.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf; tracked when the tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), t.requires_grad(), Op::Leaf)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn frozen(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), false, Op::Leaf)
    }

    /// Owned leaf; tracked when the tensor has `requires_grad` set.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(Cow::Owned(t), rg, Op::Leaf)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Consumes the tape and returns one recorded value.
    pub fn into_value(mut self, v: Var) -> Tensor {
        self.nodes.swap_remove(v.0).value.into_owned()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, p: ConvParams) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), self.value(b), p)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(Cow::Owned(out), rg, Op::Conv2d { x, w, b, p }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(Cow::Owned(out), rg, Op::Relu(x))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = kernels::add(self.value(x), self.value(y))?;
        let rg = self.any_grad(&[x, y]);
        Ok(self.push(Cow::Owned(out), rg, Op::Add(x, y)))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = kernels::pixel_shuffle(self.value(x), r)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Cow::Owned(out), rg, Op::PixelShuffle(x, r)))
    }

    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let v = kernels::l1_loss(self.value(pred), self.value(target))?;
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Cow::Owned(Tensor::scalar(v)), rg, Op::L1 { pred, target }))
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let v = kernels::mse_loss(self.value(pred), self.value(target))?;
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Cow::Owned(Tensor::scalar(v)), rg, Op::Mse { pred, target }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.any_grad(&[x]);
        self.push(Cow::Owned(Tensor::scalar(v as f32)), rg, Op::Sum(x))
    }

    /// `Σ x ⊙ weights` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        kernels::same_shape("weighted_sum", self.value(x), &weights)?;
        let v: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Cow::Owned(Tensor::scalar(v as f32)), rg, Op::WeightedSum(x, weights)))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients of every tracked node reachable from `loss` are returned;
    /// contributions from multiple uses of a node are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape.numel() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, p } => {
                    let need = [self.requires_grad(*x), self.requires_grad(*w), self.requires_grad(*b)];
                    let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, *p, need)?;
                    if let Some(d) = cg.dx {
                        accumulate(&mut grads, *x, d);
                    }
                    if let Some(d) = cg.dw {
                        accumulate(&mut grads, *w, d);
                    }
                    if let Some(d) = cg.db {
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Relu(x) => {
                    let d = kernels::relu_backward(self.value(*x).data(), &g);
                    accumulate(&mut grads, *x, d);
                }
                Op::Add(x, y) => {
                    if self.requires_grad(*x) && self.requires_grad(*y) {
                        accumulate(&mut grads, *x, g.clone());
                        accumulate(&mut grads, *y, g);
                    } else if self.requires_grad(*x) {
                        accumulate(&mut grads, *x, g);
                    } else {
                        accumulate(&mut grads, *y, g);
                    }
                }
                Op::PixelShuffle(x, r) => {
                    let d = kernels::pixel_shuffle_backward(&g, self.value(*x).shape(), *r);
                    accumulate(&mut grads, *x, d);
                }
                Op::L1 { pred, target } => {
                    let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                    if self.requires_grad(*pred) {
                        accumulate(&mut grads, *pred, kernels::l1_loss_backward(p, t, g[0]));
                    }
                    if self.requires_grad(*target) {
                        accumulate(&mut grads, *target, kernels::l1_loss_backward(t, p, g[0]));
                    }
                }
                Op::Mse { pred, target } => {
                    let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                    if self.requires_grad(*pred) {
                        accumulate(&mut grads, *pred, kernels::mse_loss_backward(p, t, g[0]));
                    }
                    if self.requires_grad(*target) {
                        accumulate(&mut grads, *target, kernels::mse_loss_backward(t, p, g[0]));
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::WeightedSum(x, w) => {
                    let d = w.data().iter().map(|&v| v * g[0]).collect();
                    accumulate(&mut grads, *x, d);
                }
            }
        }
        // Only leaf gradients survive the sweep; interior buffers were consumed.
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, d: Vec<f32>) {
    super::check_finite("backward", &d);
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the leaf is untracked or unreachable.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Adds the gradient of `v` (if any) into `t`'s grad buffer, creating a zero
    /// buffer first so unreachable parameters still end up with zeros.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if t.grad().is_none() {
            t.zero_grad();
        }
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::from_fn([1, 2, 2, 2], |_, c, y, x| (c + y + x) as f32).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn reused_node_accumulates() {
        let x = Tensor::full([1, 1, 1, 3], 2.0).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let y = tape.add(v, v).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn unreachable_leaf_keeps_zero_grad() {
        let x = Tensor::full([1, 1, 1, 3], 2.0).with_requires_grad(true);
        let mut unused = Tensor::full([1, 1, 1, 2], 1.0).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let u = tape.input(unused.clone());
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert!(g.get(u).is_none());
        g.accumulate_into(u, &mut unused).unwrap();
        assert_eq!(unused.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::full([1, 1, 1, 3], 2.0).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let r = tape.relu(v);
        assert!(matches!(tape.backward(r), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn add_gradient_reaches_both_inputs() {
        let x = Tensor::full([1, 1, 2, 2], 1.0).with_requires_grad(true);
        let y = Tensor::full([1, 1, 2, 2], -1.0).with_requires_grad(true);
        let mut tape = Tape::new();
        let (vx, vy) = (tape.leaf(&x), tape.leaf(&y));
        let z = tape.add(vx, vy).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(vx).unwrap(), &[1.0; 4]);
        assert_eq!(g.get(vy).unwrap(), &[1.0; 4]);
    }
}
