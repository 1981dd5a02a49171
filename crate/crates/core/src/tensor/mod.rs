//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a reference-counted graph node. Leaf tensors created with
//! [`Tensor::param`] hold learnable values and accumulate gradients; every op
//! in [`ops`] produces a new node that remembers its parents and a backward
//! closure, but only when at least one parent requires a gradient. Frozen
//! parameters (`requires_grad == false`) therefore behave as constants.
//!
//! Gradients of intermediate nodes live only for the duration of a
//! [`Tensor::backward`] call. Leaf gradients accumulate across calls until
//! [`Tensor::zero_grad`] is invoked.

mod adam;
mod gradcheck;
pub mod kernels;
mod ops;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_many};
pub use ops::{conv_out_len, MaskMode};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{PalError, Result};

/// Floating-point element type. Training runs in `f32`; gradient and oracle
/// tests run in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

/// Numeric precision selectable at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = PalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(PalError::Config(format!("unknown precision {other:?}"))),
        }
    }
}

type BackwardFn<F> = Box<dyn Fn(&[F], &[F]) -> Vec<Option<Vec<F>>>>;

struct Op<F: Real> {
    parents: Vec<Tensor<F>>,
    /// Receives (grad of output, output values); returns one optional
    /// gradient per parent.
    backward: BackwardFn<F>,
}

struct Node<F: Real> {
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    grad: RefCell<Option<Vec<F>>>,
    requires_grad: Cell<bool>,
    op: Option<Op<F>>,
}

/// Handle to a node of the gradient graph. Cloning is cheap and shares the
/// node.
pub struct Tensor<F: Real>(Rc<Node<F>>);

impl<F: Real> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .field("dtype", &F::NAME)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Tensor<F> {
    /// Constant tensor. Fails when the data length disagrees with the shape.
    pub fn new(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(PalError::Dimension(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Learnable leaf tensor.
    pub fn param(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![F::zero(); numel(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self::leaf(vec![value; numel(shape)], shape.to_vec(), false)
    }

    pub fn scalar(value: F) -> Self {
        Self::leaf(vec![value], Vec::new(), false)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| F::of(v)).collect(), shape)
    }

    fn leaf(data: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            op: None,
        }))
    }

    /// Installs a custom differentiable node. `backward` receives the output
    /// gradient and the output values and returns one optional gradient per
    /// parent, each with that parent's element count.
    ///
    /// When no parent requires a gradient the result is a plain constant and
    /// `backward` is dropped unused.
    pub fn from_op(
        data: Vec<F>,
        shape: Vec<usize>,
        parents: Vec<Tensor<F>>,
        backward: impl Fn(&[F], &[F]) -> Vec<Option<Vec<F>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        if !parents.iter().any(Tensor::requires_grad) {
            return Self::leaf(data, shape, false);
        }
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(true),
            op: Some(Op {
                parents,
                backward: Box::new(backward),
            }),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    /// Extent of axis `i`; negative counts from the end.
    pub fn dim(&self, i: isize) -> usize {
        let r = self.rank() as isize;
        let idx = if i < 0 { r + i } else { i };
        self.0.shape[idx as usize]
    }

    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Only meaningful for leaves; graph nodes
    /// downstream are not recomputed.
    pub fn data_mut(&self) -> RefMut<'_, Vec<F>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Toggles gradient tracking on a leaf. Disabling also drops any gradient
    /// already accumulated.
    pub fn set_requires_grad(&self, flag: bool) {
        assert!(self.0.op.is_none(), "requires_grad can only be set on leaves");
        self.0.requires_grad.set(flag);
        if !flag {
            *self.0.grad.borrow_mut() = None;
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<F>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Constant copy of the values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    pub fn same_node(&self, other: &Tensor<F>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn accumulate_grad(&self, g: &[F]) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Nodes reachable from `self` through gradient-carrying edges, in
    /// topological order (parents before children).
    fn topo_order(&self) -> Vec<Tensor<F>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<F>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.key()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.0.op {
                for p in &op.parents {
                    if p.requires_grad() && !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate; calling
    /// twice without [`Tensor::zero_grad`] doubles them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(PalError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<F>> = HashMap::new();
        pending.insert(self.key(), vec![F::one()]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.key()) else {
                continue;
            };
            match &node.0.op {
                None => node.accumulate_grad(&g),
                Some(op) => {
                    let out = node.0.data.borrow();
                    let parent_grads = (op.backward)(&g, &out);
                    debug_assert_eq!(parent_grads.len(), op.parents.len());
                    for (p, pg) in op.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match pending.get_mut(&p.key()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(pg) {
                                    *a += b;
                                }
                            }
                            None => {
                                pending.insert(p.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Zeroes the gradients of every tensor in `params`.
pub fn zero_grads<F: Real>(params: &[Tensor<F>]) {
    for p in params {
        p.zero_grad();
    }
}
