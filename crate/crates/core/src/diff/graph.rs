use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named trainable array with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub requires_grad: bool,
}

impl DiffTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(DiffTensor {
            name: name.into(),
            shape,
            grad: vec![0.0; n],
            values,
            requires_grad: true,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Owns every trainable tensor of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<DiffTensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, tensor: DiffTensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(&tensor.name),
            "duplicate parameter name {}",
            tensor.name
        );
        let id = ParamId(self.tensors.len());
        self.by_name.insert(tensor.name.clone(), id);
        self.tensors.push(tensor);
        id
    }

    pub fn get(&self, id: ParamId) -> &DiffTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffTensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &DiffTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut DiffTensor> {
        self.tensors.iter_mut()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(DiffTensor::zero_grad);
    }

    /// Adds the gradients of every parameter leaf in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for &(pid, node) in &grads.params {
            let t = &mut self.tensors[pid.0];
            if !t.requires_grad {
                continue;
            }
            if let Some(g) = &grads.grads[node] {
                for (a, b) in t.grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}

/// Upstream gradient of a node, and one optional mutable gradient buffer per
/// parent (`None` for parents that do not require a gradient).
pub type BackwardFn = Box<dyn Fn(&[f64], &mut [Option<&mut [f64]>])>;

struct Node {
    shape: Vec<usize>,
    value: Rc<[f64]>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the tape is
/// acyclic by construction and a reverse sweep is a valid topological order.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: Vec<(ParamId, usize)>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            params: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// A graph that records values only; `backward` on it yields no gradients.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Rc<[f64]>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        check_shape(&shape, values.len())?;
        Ok(self.leaf(shape, values.into(), false))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(vec![], Rc::from(vec![x]), false)
    }

    /// A differentiable leaf that is not a parameter (gradient checks, probes).
    pub fn input(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        check_shape(&shape, values.len())?;
        Ok(self.leaf(shape, values.into(), true))
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.leaf(t.shape.clone(), t.values.clone().into(), t.requires_grad);
        self.params.push((id, v.0));
        self.param_nodes.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn value_rc(&self, v: Var) -> Rc<[f64]> {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "item() on a non-scalar node");
        val[0]
    }

    /// Appends a computed node. `backward` is dropped when no parent needs a
    /// gradient or the graph is in no-grad mode.
    pub fn push<F>(&mut self, shape: Vec<usize>, value: Vec<f64>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&[f64], &mut [Option<&mut [f64]>]) + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let (parents, backward): (Vec<usize>, Option<BackwardFn>) = if requires_grad {
            (parents.iter().map(|p| p.0).collect(), Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        self.nodes.push(Node {
            shape,
            value: value.into(),
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable node derived from other values (indices, masks).
    pub fn detached(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.leaf(shape, value.into(), false)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::NotScalar(loss_node.shape.clone()));
        }
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let (lower, upper) = grads.split_at_mut(i);
            let Some(out) = upper[0].as_deref() else {
                continue;
            };
            let parents = &node.parents;
            let mut bufs: Vec<Option<Vec<f64>>> = Vec::with_capacity(parents.len());
            for (k, &p) in parents.iter().enumerate() {
                let pn = &self.nodes[p];
                if !pn.requires_grad {
                    bufs.push(None);
                } else if parents[..k].contains(&p) {
                    bufs.push(Some(vec![0.0; pn.value.len()]));
                } else {
                    bufs.push(Some(
                        lower[p].take().unwrap_or_else(|| vec![0.0; pn.value.len()]),
                    ));
                }
            }
            {
                let mut slots: Vec<Option<&mut [f64]>> =
                    bufs.iter_mut().map(|b| b.as_deref_mut()).collect();
                backward(out, &mut slots);
            }
            for k in (0..parents.len()).rev() {
                let p = parents[k];
                let Some(buf) = bufs[k].take() else { continue };
                match parents[..k].iter().position(|&q| q == p) {
                    Some(first) => {
                        let dst = bufs[first].as_mut().expect("first occurrence buffer");
                        for (a, b) in dst.iter_mut().zip(&buf) {
                            *a += b;
                        }
                    }
                    None => lower[p] = Some(buf),
                }
            }
            if i != loss.0 {
                upper[0] = None;
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n == len {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "shape {shape:?} needs {n} values, got {len}"
        )))
    }
}

/// Result of [`Graph::backward`]: gradients of leaves reachable from the loss.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when it received no contribution.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf with zeros filled in.
    pub fn get_or_zeros(&self, g: &Graph, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; g.value(v).len()])
    }
}
