//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its output value and the ids of its
//! inputs. Inputs always precede the node that consumes them, so walking the
//! nodes backwards visits them in reverse topological order.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Pointwise { x: Var, w: Var, b: Var },
    Spatial { x: Var, k: Var },
    Temporal { x: Var, k: Var },
    ShiftedSubtract { cur: Var, pre: Var },
    Add { a: Var, b: Var },
    Relu { x: Var },
    MeanPool2 { x: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize> },
    SampleL1 { x: Var, weights: Vec<T> },
    Sum { x: Var },
    Project { x: Var, probe: Tensor<T> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records executed operations for a single forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients of one scalar with respect to every node that influenced it.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter. Binding the same parameter twice returns the same
    /// node, so shared weights accumulate gradient from every use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.bound.insert(id, v);
        v
    }

    pub fn conv_pointwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::conv_pointwise(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Pointwise { x, w, b }))
    }

    pub fn conv_channelwise_spatial(&mut self, x: Var, k: Var) -> Result<Var> {
        let out = ops::conv_channelwise_spatial(self.value(x), self.value(k))?;
        Ok(self.push(out, Op::Spatial { x, k }))
    }

    pub fn conv_channelwise_temporal(&mut self, x: Var, k: Var) -> Result<Var> {
        let out = ops::conv_channelwise_temporal(self.value(x), self.value(k))?;
        Ok(self.push(out, Op::Temporal { x, k }))
    }

    pub fn shifted_subtract(&mut self, cur: Var, pre: Var) -> Result<Var> {
        let out = ops::shifted_subtract(self.value(cur), self.value(pre))?;
        Ok(self.push(out, Op::ShiftedSubtract { cur, pre }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu { x })
    }

    pub fn mean_pool2(&mut self, x: Var) -> Result<Var> {
        let out = ops::mean_pool2(self.value(x))?;
        Ok(self.push(out, Op::MeanPool2 { x }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::GlobalAvgPool { x }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let out = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `sum_b weights[b] * ||x_b||_1`
    pub fn weighted_sample_l1(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let out = ops::weighted_sample_l1(self.value(x), weights)?;
        Ok(self.push(
            out,
            Op::SampleL1 {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = ops::sum_all(self.value(x));
        self.push(out, Op::Sum { x })
    }

    /// `sum(x * probe)` for a constant `probe` of the same shape.
    pub fn project(&mut self, x: Var, probe: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != probe.shape() {
            return Err(Error::dim(
                "project",
                format!("probe {:?} vs value {:?}", probe.shape(), xv.shape()),
            ));
        }
        let s = xv.data().iter().zip(probe.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::Project {
                x,
                probe: probe.clone(),
            },
        ))
    }

    /// Hash of the on/off pattern of every ReLU and the sign pattern of every
    /// L1 input on the tape. Finite-difference probes compare it to detect
    /// steps that cross a kink.
    pub fn relu_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu { x } => {
                    for &v in self.value(x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::SampleL1 { x, .. } => {
                    for &v in self.value(x).data() {
                        (v.partial_cmp(&T::zero())).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Gradient(format!(
                "loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                &Op::Pointwise { x, w, b } => {
                    let (dx, dw, db) =
                        ops::conv_pointwise_backward(self.value(x), self.value(w), self.value(b), &g)?;
                    acc(&mut grads, x, dx);
                    acc(&mut grads, w, dw);
                    acc(&mut grads, b, db);
                }
                &Op::Spatial { x, k } => {
                    let (dx, dk) = ops::conv_channelwise_spatial_backward(self.value(x), self.value(k), &g)?;
                    acc(&mut grads, x, dx);
                    acc(&mut grads, k, dk);
                }
                &Op::Temporal { x, k } => {
                    let (dx, dk) = ops::conv_channelwise_temporal_backward(self.value(x), self.value(k), &g)?;
                    acc(&mut grads, x, dx);
                    acc(&mut grads, k, dk);
                }
                &Op::ShiftedSubtract { cur, pre } => {
                    let (dc, dp) = ops::shifted_subtract_backward(&g)?;
                    acc(&mut grads, cur, dc);
                    acc(&mut grads, pre, dp);
                }
                &Op::Add { a, b } => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.clone());
                }
                &Op::Relu { x } => {
                    let dx = ops::relu_backward(self.value(x), &g);
                    acc(&mut grads, x, dx);
                }
                &Op::MeanPool2 { x } => {
                    let dx = ops::mean_pool2_backward(self.value(x).shape(), &g)?;
                    acc(&mut grads, x, dx);
                }
                &Op::GlobalAvgPool { x } => {
                    let dx = ops::global_avg_pool_backward(self.value(x).shape(), &g)?;
                    acc(&mut grads, x, dx);
                }
                &Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(x), self.value(w), self.value(b), &g)?;
                    acc(&mut grads, x, dx);
                    acc(&mut grads, w, dw);
                    acc(&mut grads, b, db);
                }
                Op::SoftmaxCe { logits, labels } => {
                    let dl = ops::softmax_cross_entropy_backward(self.value(*logits), labels, g.item())?;
                    acc(&mut grads, *logits, dl);
                }
                Op::SampleL1 { x, weights } => {
                    let dx = ops::weighted_sample_l1_backward(self.value(*x), weights, g.item())?;
                    acc(&mut grads, *x, dx);
                }
                &Op::Sum { x } => {
                    let dx = Tensor::filled(self.value(x).shape(), g.item());
                    acc(&mut grads, x, dx);
                }
                Op::Project { x, probe } => {
                    let gv = g.item();
                    acc(&mut grads, *x, probe.map(|p| p * gv));
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradient of every bound parameter into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = grads.grads.get(i).and_then(Option::as_ref) {
                    store.accumulate_grad(id, g)?;
                }
            }
        }
        Ok(())
    }

    /// [`Tape::backward`] followed by [`Tape::accumulate_param_grads`].
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        self.accumulate_param_grads(&grads, store)?;
        Ok(grads)
    }
}
