use crate::ad::{AdError, Tensor};
use crate::scalar::Real;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reverse rule of a recorded primitive.
///
/// Receives the parent values, the node's own value and the adjoint flowing
/// into it; returns one optional adjoint per parent (`None` = no contribution).
pub trait Backward<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Leaf,
    Constant,
    Op,
}

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    kind: Kind,
    needs_grad: bool,
}

/// Append-only record of primitive operations.
///
/// Parents always precede children, so the backward sweep is a plain reverse
/// walk over creation order.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the tape can record a fresh forward pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            kind: Kind::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a value that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            kind: Kind::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_const(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        self.nodes[v.0].kind == Kind::Leaf
    }

    /// Records the result of an operation together with its reverse rule.
    ///
    /// Fails with [`AdError::NonFinite`] when the value contains NaN/Inf.
    pub fn push(
        &mut self,
        op: Box<dyn Backward<T>>,
        parents: &[Var],
        value: Tensor<T>,
    ) -> Result<Var, AdError> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(AdError::NonFinite {
                node: id,
                op: op.name(),
                pass: "forward",
            });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            op: Some(op),
            kind: Kind::Op,
            needs_grad,
        });
        Ok(Var(id))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AdError> {
        self.backward_seeded(loss, None)
    }

    /// Reverse sweep with an explicit output adjoint (defaults to ones for scalars).
    pub fn backward_seeded(
        &self,
        output: Var,
        seed: Option<Tensor<T>>,
    ) -> Result<Gradients<T>, AdError> {
        let out = &self.nodes[output.0];
        let seed = match seed {
            Some(s) => {
                if s.shape() != out.value.shape() {
                    return Err(AdError::ShapeMismatch(format!(
                        "seed {:?} vs output {:?}",
                        s.shape(),
                        out.value.shape()
                    )));
                }
                s
            }
            None => {
                if out.value.len() != 1 {
                    return Err(AdError::NonScalar(out.value.shape().to_vec()));
                }
                Tensor::filled(out.value.shape(), T::one())
            }
        };
        let mut adj: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = adj[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = op.backward(&inputs, &node.value, &g)?;
            adj[i] = Some(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].needs_grad {
                    continue;
                }
                if pg.shape() != self.nodes[p].value.shape() {
                    return Err(AdError::ShapeMismatch(format!(
                        "{} produced adjoint {:?} for parent {:?}",
                        op.name(),
                        pg.shape(),
                        self.nodes[p].value.shape()
                    )));
                }
                if !pg.is_finite() {
                    return Err(AdError::NonFinite {
                        node: i,
                        op: op.name(),
                        pass: "backward",
                    });
                }
                match &mut adj[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    /// Gradient of scalar `f` with respect to each of `inputs`.
    ///
    /// Inputs must be leaves; constants are rejected as detached.
    pub fn grad(&self, f: Var, inputs: &[Var]) -> Result<Vec<Tensor<T>>, AdError> {
        for &x in inputs {
            if self.nodes[x.0].kind != Kind::Leaf {
                return Err(AdError::Detached(x.0));
            }
        }
        let grads = self.backward(f)?;
        Ok(inputs
            .iter()
            .map(|&x| grads.or_zeros(x, self.value(x).shape()))
            .collect())
    }
}

/// Adjoints produced by a reverse sweep.
pub struct Gradients<T> {
    adjoints: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.adjoints.get_mut(v.0).and_then(|a| a.take())
    }

    pub fn or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
