//! Dense float64 tensors with tape-free reverse-mode differentiation.
//!
//! Every tracked tensor keeps handles to the tensors it was computed from
//! together with a closure that maps the output gradient to input gradients.
//! [`Tensor::backward`] walks that graph in reverse topological order.

mod conv;
mod gemm;
pub mod gradcheck;
mod ops;

pub use conv::{avg_pool2, conv2d, global_avg_pool, upsample2, ConvParams};
pub(crate) use gemm::{gemm_nn, gemm_nt, gemm_tn};
pub use gradcheck::{finite_diff_check, finite_diff_check_many, record_branch, GradCheckReport};

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Maps the output gradient to one optional gradient per input. The second
/// argument flags which inputs actually need a gradient.
pub type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Cheaply clonable handle to an immutable tensor value.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("dims must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} holds {n} values but {} were given", data.len())));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), (0..n).map(&mut f).collect(), false, None)
    }

    /// A fresh leaf with the same values that records gradients.
    pub fn requires_grad(self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    /// A fresh untracked leaf with the same values.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Builds the result of a differentiable operation. When no input is
    /// tracked the backward closure is dropped immediately.
    pub fn from_op(shape: Vec<usize>, data: Vec<f64>, inputs: Vec<Tensor>, backward: BackwardFn) -> Self {
        let tracked = inputs.iter().any(|t| t.0.requires_grad);
        let node = tracked.then(|| Node { inputs, backward });
        Self::build(shape, data, tracked, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.0.requires_grad
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn accumulate_grad(&self, g: Vec<f64>) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        }
    }

    /// Accumulates d(self)/d(x) into every tracked ancestor `x`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.is_tracked() {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate_grad(vec![1.0]);
        for t in order.iter().rev() {
            let Some(node) = &t.0.node else { continue };
            let Some(g) = t.grad() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(Tensor::is_tracked).collect();
            let grads = (node.backward)(&g, &needs);
            debug_assert_eq!(grads.len(), node.inputs.len());
            for ((input, grad), need) in node.inputs.iter().zip(grads).zip(needs) {
                if let (true, Some(grad)) = (need, grad) {
                    debug_assert_eq!(grad.len(), input.numel());
                    input.accumulate_grad(grad);
                }
            }
        }
        Ok(())
    }

    /// Tracked tensors reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // (tensor, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.0.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in &node.inputs {
                    if input.is_tracked() && !seen.contains(&input.0.id) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

pub fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}
