//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value and a closure that maps the output gradient onto the gradients of
//! its inputs. Nodes are appended in topological order, so the backward pass is
//! a single reverse sweep over the tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{ParamId, ParamStore, Tensor};
use super::{NumericsError, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// One forward pass worth of recorded operations.
pub struct Graph {
    tape: RefCell<Tape>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            tape: RefCell::new(Tape::default()),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; no node requires a gradient.
    pub fn inference() -> Self {
        Self {
            tape: RefCell::new(Tape::default()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    /// Differentiable leaf that is not tied to a parameter store.
    pub fn leaf(&self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(value, rg, None)
    }

    /// Binds a stored parameter to this graph. Repeated calls return the same
    /// leaf; frozen parameters become constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.tape.borrow().params.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let rg = self.grad_enabled && !p.frozen;
        let v = self.push(p.value.clone(), rg, None);
        self.tape.borrow_mut().params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.tape.borrow().nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.tape.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tape.borrow().nodes[v.0].requires_grad
    }

    pub(crate) fn push(&self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var(id)
    }

    /// Records a custom operation. `backward` receives the output gradient and
    /// must accumulate into the gradients of `inputs` through the sink.
    pub fn custom_op<F>(&self, output: Tensor, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &mut GradSink) + 'static,
    {
        let rg = self.grad_enabled && inputs.iter().any(|&v| self.requires_grad(v));
        if rg {
            self.push(output, true, Some(Box::new(backward)))
        } else {
            self.push(output, false, None)
        }
    }

    /// Runs the reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let tape = self.tape.borrow();
        let n = loss.0 + 1;
        let loss_node = &tape.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(NumericsError::NotScalar(loss_node.value.shape().to_vec()));
        }
        let mut sink = GradSink {
            slots: (0..n).map(|_| None).collect(),
            requires: tape.nodes[..n].iter().map(|nd| nd.requires_grad).collect(),
            shapes: tape.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect(),
        };
        if loss_node.requires_grad {
            sink.slots[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(bw) = tape.nodes[i].backward.as_ref() else {
                continue;
            };
            let Some(g) = sink.slots[i].take() else {
                continue;
            };
            let gt = Tensor::new(sink.shapes[i].clone(), g).expect("grad shape");
            bw(&gt, &mut sink);
            sink.slots[i] = Some(gt.into_data());
        }
        let params = tape.params.clone();
        Ok(Gradients {
            grads: sink
                .slots
                .into_iter()
                .zip(sink.shapes)
                .map(|(g, s)| g.map(|d| Tensor::new(s, d).expect("grad shape")))
                .collect(),
            params,
        })
    }
}

/// Write access to input gradients during the backward sweep.
pub struct GradSink {
    slots: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl GradSink {
    /// Mutable gradient buffer of `v`, zero-initialised on first access.
    /// Returns `None` when `v` does not require a gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.requires[v.0] {
            return None;
        }
        let len: usize = self.shapes[v.0].iter().product();
        Some(self.slots[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    /// Adds parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort();
        for id in ids {
            let Some(g) = self.param(id) else { continue };
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            match p.grad.as_mut() {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
    }
}
