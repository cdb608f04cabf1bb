//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations that
//! receive at least one input with `requires_grad` record a backward closure
//! ([`GradFn`]) on their output; [`Tensor::backward`] walks that graph in
//! reverse topological order and accumulates gradients into leaf tensors.

mod conv;
mod elementwise;
mod norm;
mod param;
mod reduce;
mod resize;
mod structural;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{MorphError, Result};

pub use conv::{conv3d, ConvSpec};
pub use elementwise::Activation;
pub(crate) use elementwise::sigmoid as sigmoid_f64;
pub use norm::layer_norm;
pub use param::{Constraint, Parameter};
pub use reduce::{pairwise_sum, Reduction};
pub use resize::{resample_linear, trilinear_resize, trilinear_resize_to};
pub use structural::{concat, forward_diff};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Backward rule of a recorded operation.
pub(crate) trait GradFn: Send + Sync {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> Vec<&Tensor>;
    /// Gradients with respect to each entry of `inputs()`, `None` when the
    /// input does not need one.
    fn backward(&self, out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<[f64]>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    grad_fn: Option<Box<dyn GradFn>>,
}

/// Dense row-major `f64` tensor participating in a differentiation graph.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.name()))
            .finish()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<[f64]>, requires_grad: bool, grad_fn: Option<Box<dyn GradFn>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::checked(shape, data, false)
    }

    /// Leaf tensor that collects gradients.
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::checked(shape, data, true)
    }

    fn checked(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(crate::error::shape_err("Tensor::new", "numel", n, data.len()));
        }
        Ok(Self::build(shape.to_vec(), data.into(), requires_grad, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![0.0; n].into(), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![value; n].into(), false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![1], vec![value].into(), false, None)
    }

    /// Records the output of an operation. The backward rule is dropped when
    /// no input requires a gradient.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, grad_fn: Box<dyn GradFn>) -> Self {
        let requires_grad = grad_fn.inputs().iter().any(|t| t.requires_grad());
        let grad_fn = if requires_grad { Some(grad_fn) } else { None };
        Self::build(shape, data.into(), requires_grad, grad_fn)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), Arc::clone(&self.0.data), false, None)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name())
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// reachable leaf with `requires_grad`; call [`Tensor::zero_grad`] (or
    /// [`Parameter::zero_grad`]) between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(MorphError::InvalidArgument(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.0.id, vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let grads = f.backward(node, &g);
                    for (input, gi) in f.inputs().into_iter().zip(grads) {
                        let Some(gi) = gi else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(gi.len(), input.numel(), "grad shape from {}", f.name());
                        match pending.get_mut(&input.0.id) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(input.0.id, gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the gradient-carrying part of the graph.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(f) = &node.0.grad_fn {
                for input in f.inputs().into_iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.0.id) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Number of recorded operations reachable from this tensor (diagnostics).
    pub fn graph_size(&self) -> usize {
        self.topological_order().iter().filter(|t| t.op_name().is_some()).count()
    }
}

/// Maximum relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with step `h`.
///
/// The error per element is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_at(f, x, shape, h, None)
}

/// Like [`grad_check`] but only probes the listed element indices.
pub fn grad_check_at<F>(f: F, x: &[f64], shape: &[usize], h: f64, indices: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(MorphError::InvalidArgument("grad_check", "h must be positive".into()));
    }
    let leaf = Tensor::leaf(shape, x.to_vec())?;
    let y = f(&leaf)?;
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |xs: Vec<f64>| -> Result<f64> { Ok(f(&Tensor::new(shape, xs)?)?.item()) };
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut worst: f64 = 0.0;
    for &i in idx {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
