use crate::error::{Error, Result};
use crate::tensor::{check_finite, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Computes parent gradients from the output gradient. The flag slice says
/// which parents need one; entries for the others may be `None`.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Real> {
    value: Tensor<S>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
}

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every parent index is smaller
/// than its child's and a reverse sweep over indices is a reverse topological
/// order.
pub struct Tape<S: Real = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(
        &mut self,
        op: &str,
        value: Tensor<S>,
        parents: &[Var],
        backward: BackwardFn<S>,
    ) -> Result<Var> {
        check_finite(&value, op)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss. The tape is left untouched, so calling
    /// this twice yields identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                grads[p] = Some(match grads[p].take() {
                    None => pg,
                    Some(acc) => acc.zip_map(&pg, |a, b| a + b)?,
                });
            }
        }
        Ok(Gradients {
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads,
        })
    }
}

/// Gradients of leaf values after a backward sweep.
pub struct Gradients<S: Real> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when unreached.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<S> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => match self.shapes.get(v.0) {
                Some(shape) => Tensor::zeros(shape),
                None => panic!("variable {v:?} does not belong to this tape"),
            },
        }
    }
}
