//! A small reverse-mode autodiff engine over dynamic-rank `f64` arrays.
//!
//! Graphs are built dynamically: every op returns a new [`Var`] holding its
//! output plus a backward closure. `backward()` walks the tape in reverse
//! creation order and accumulates gradients into leaves. Everything is
//! single-threaded and f64, so runs are bit-reproducible on one machine.

mod conv;
mod ops;

pub use ops::*;

use ndarray::ArrayD;
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<usize> = Cell::new(0);
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[Var]) -> Vec<Option<ArrayD<f64>>>>;

pub(crate) struct Node {
    id: usize,
    data: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// A node in the autodiff graph. Cheap to clone (shared reference).
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    pub fn leaf(data: ArrayD<f64>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn constant(data: ArrayD<f64>) -> Self {
        Self::leaf(data, false)
    }

    pub(crate) fn from_op(data: ArrayD<f64>, parents: Vec<Var>, backward: BackwardFn) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        Var(Rc::new(Node {
            id: next_id(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward: if requires_grad { Some(backward) } else { None },
        }))
    }

    pub fn data(&self) -> Ref<'_, ArrayD<f64>> {
        self.0.data.borrow()
    }

    /// Replace the stored value in place (parameter updates).
    pub fn set_data(&self, data: ArrayD<f64>) {
        *self.0.data.borrow_mut() = data;
    }

    pub fn map_data(&self, f: impl FnOnce(&mut ArrayD<f64>)) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.data.borrow().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    fn accumulate_grad(&self, g: ArrayD<f64>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Run reverse-mode accumulation from this node, seeding with ones.
    pub fn backward(&self) {
        let seed = ArrayD::ones(self.0.data.borrow().raw_dim());
        self.backward_with(seed);
    }

    pub fn backward_with(&self, seed: ArrayD<f64>) {
        assert_eq!(
            seed.shape(),
            self.0.data.borrow().shape(),
            "backward seed shape mismatch"
        );
        if !self.0.requires_grad {
            return;
        }
        // Collect the reachable subgraph, then process in reverse creation
        // order; ids are monotone so this is a valid topological order.
        let mut reachable: HashMap<usize, Var> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if reachable.insert(v.0.id, v.clone()).is_none() {
                for p in &v.0.parents {
                    if p.0.requires_grad {
                        stack.push(p.clone());
                    }
                }
            }
        }
        let mut order: Vec<Var> = reachable.into_values().collect();
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        self.accumulate_grad(seed);
        for v in order {
            let Some(backward) = v.0.backward.as_ref() else {
                continue;
            };
            let grad_out = v.0.grad.borrow().clone();
            let Some(grad_out) = grad_out else { continue };
            let parent_grads = backward(&grad_out, &v.0.parents);
            assert_eq!(parent_grads.len(), v.0.parents.len());
            for (p, g) in v.0.parents.iter().zip(parent_grads) {
                if let Some(g) = g {
                    if p.0.requires_grad {
                        p.accumulate_grad(g);
                    }
                }
            }
        }
    }

    /// Scalar value of a 1-element var.
    pub fn scalar(&self) -> f64 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "scalar() on non-scalar var");
        *d.iter().next().unwrap()
    }
}
