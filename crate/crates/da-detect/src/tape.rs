//! Reverse-mode automatic differentiation on f64 arrays.
//!
//! A [`Tape`] records a computation as a flat list of nodes in topological
//! order (parents always precede children). [`Tape::backward`] walks the
//! list in reverse from a scalar root and accumulates gradients per node.
//! Multiple backward passes over one recorded forward graph are allowed and
//! independent, which is what the dual-optimizer training step relies on:
//! both loss gradients are evaluated at the same pre-step weights before
//! either optimizer moves.
//!
//! No graph mutation happens during backward (`&self`), and every op is
//! evaluated in a fixed sequential order, so results are bit-reproducible.

use ndarray::ArrayD;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Value(pub(crate) usize);

/// Backward function of one node: given the tape, the node's own handle and
/// its upstream gradient, accumulate contributions into parent slots.
pub(crate) type BackFn = Box<dyn Fn(&Tape, Value, &ArrayD<f64>, &mut Gradients)>;

struct Node {
    value: ArrayD<f64>,
    back: Option<BackFn>,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input or parameter leaf. Leaves have no backward function;
    /// their accumulated gradient is read off the [`Gradients`] after a pass.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Value {
        self.push(value, None)
    }

    pub(crate) fn push_op(&mut self, value: ArrayD<f64>, back: BackFn) -> Value {
        self.push(value, Some(back))
    }

    fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> Value {
        let id = self.nodes.len();
        self.nodes.push(Node { value, back });
        Value(id)
    }

    pub fn value(&self, v: Value) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar convenience accessor; panics if the node is not a single element.
    pub fn scalar(&self, v: Value) -> f64 {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "node is not a scalar");
        *a.iter().next().unwrap()
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; nodes the
    /// root does not depend on have no entry.
    pub fn backward(&self, root: Value) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads = Gradients {
            slots: vec![None; self.nodes.len()],
        };
        let seed = ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0);
        grads.slots[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if grads.slots[i].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[i].back {
                // Parents always have smaller indices, so taking the slot out
                // while the node's backward runs is safe.
                let gi = grads.slots[i].take().expect("checked above");
                back(self, Value(i), &gi, &mut grads);
                grads.slots[i] = Some(gi);
            }
        }
        grads
    }
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to node `v`, if the root
    /// depends on it.
    pub fn get(&self, v: Value) -> Option<&ArrayD<f64>> {
        self.slots[v.0].as_ref()
    }

    /// Accumulate a contribution into the slot for `v`.
    pub(crate) fn accumulate(&mut self, v: Value, contrib: ArrayD<f64>) {
        match &mut self.slots[v.0] {
            Some(existing) => *existing += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }
}
