use std::collections::HashMap;

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    back: Option<BackFn>,
    param: Option<usize>,
    needs_grad: bool,
}

/// Gradients keyed by parameter id, as registered via [`Tape::param`].
#[derive(Debug, Default)]
pub struct Grads {
    pub by_param: HashMap<usize, Tensor>,
}

impl Grads {
    pub fn scale(&mut self, c: f64) {
        for g in self.by_param.values_mut() {
            g.scale_assign(c);
        }
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (k, g) in &other.by_param {
            match self.by_param.get_mut(k) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.by_param.insert(*k, g.clone());
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for g in self.by_param.values() {
            for v in g.data() {
                acc += v * v;
            }
        }
        acc.sqrt()
    }
}

/// Record of one forward pass; owns all intermediate values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Leaf with no gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            back: None,
            param: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf registered as a trainable parameter.
    pub fn param(&mut self, value: Tensor, param_id: usize) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            back: None,
            param: Some(param_id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Interior node. `back` receives the upstream gradient and must return
    /// one gradient tensor per parent, in order.
    pub fn push(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        back: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            back: if needs_grad { Some(Box::new(back)) } else { None },
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Reverse sweep from a scalar root. Returns parameter gradients.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Grads::default();
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(pid) = node.param {
                match out.by_param.get_mut(&pid) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.by_param.insert(pid, g);
                    }
                }
                continue;
            }
            if let Some(back) = &node.back {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    if !self.nodes[p.0].needs_grad {
                        continue;
                    }
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        out
    }
}
