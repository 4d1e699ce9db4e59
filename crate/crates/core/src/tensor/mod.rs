//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients. All math is f64 so the
//! analytic gradients can be checked against central finite differences at
//! tight tolerances. Execution is single-threaded per tape; data parallelism
//! happens one tape per shard (see [`crate::parallel`]).

mod conv;
pub(crate) mod elementwise;
mod linalg;
mod norm;
mod reduce;
mod shape_ops;


pub use elementwise::randn;

use ndarray::{ArrayD, IxDyn};

pub type Arr = ArrayD<f64>;

/// Context handed to a gradient closure: parent values, the node's own
/// forward value, and the incoming gradient.
pub struct GradCtx<'a> {
    pub parents: &'a [&'a Arr],
    pub value: &'a Arr,
    pub grad: &'a Arr,
}

type GradFn = Box<dyn Fn(GradCtx) -> Vec<Arr> + Send + Sync>;

struct Node {
    value: Arr,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
    requires_grad: bool,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Identifies a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors plus a trainability flag (frozen tensors are
/// stored and checkpointed but skipped by optimizers).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        self.add_with(name, value, true)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        self.add_with(name, value, false)
    }

    fn add_with(&mut self, name: impl Into<String>, value: Arr, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Arr)> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (ParamId(i), n.as_str(), &self.values[i]))
    }

    /// Total number of scalar parameters (trainable only).
    pub fn n_scalars(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, t)| **t)
            .map(|(v, _)| v.len())
            .sum()
    }

    /// Overwrite values from another store with identical layout.
    pub fn copy_from(&mut self, other: &ParamStore) {
        assert_eq!(self.names, other.names, "parameter layout mismatch");
        self.values.clone_from(&other.values);
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
pub type ParamGrads = Vec<Option<Arr>>;

/// Gradients for every node of a tape, indexed by `Var`.
pub struct NodeGrads {
    grads: Vec<Option<Arr>>,
}

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// (node index, parameter) for every `param` leaf pushed on this tape.
    param_uses: Vec<(usize, ParamId)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    // Every node value is kept in standard layout so ops may rely on
    // contiguous slices.
    fn canonical(value: Arr) -> Arr {
        if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        }
    }

    pub(crate) fn push(
        &mut self,
        value: Arr,
        parents: Vec<usize>,
        grad_fn: Option<GradFn>,
    ) -> Var {
        let requires_grad =
            grad_fn.is_some() && parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value: Self::canonical(value),
            parents,
            grad_fn,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.nodes.push(Node {
            value: Self::canonical(value),
            parents: vec![],
            grad_fn: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(ndarray::arr0(x).into_dyn())
    }

    /// A differentiable leaf bound to a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            parents: vec![],
            grad_fn: None,
            requires_grad: store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_uses.push((v.0, id));
        v
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Forward value of a 0-d (scalar) node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        assert!(a.len() == 1, "scalar_value on non-scalar node");
        *a.iter().next().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse pass from a scalar root. Returns gradients for every node that
    /// participates in the root's value and requires a gradient.
    pub fn backward(&self, root: Var) -> NodeGrads {
        let root_val = &self.nodes[root.0].value;
        assert!(root_val.len() == 1, "backward root must be scalar");
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(IxDyn(root_val.shape())));

        for id in (0..=root.0).rev() {
            if self.nodes[id].grad_fn.is_none() {
                continue;
            }
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let parent_vals: Vec<&Arr> = node
                .parents
                .iter()
                .map(|&p| &self.nodes[p].value)
                .collect();
            let ctx = GradCtx {
                parents: &parent_vals,
                value: &node.value,
                grad: &g,
            };
            let parent_grads = (node.grad_fn.as_ref().unwrap())(ctx);
            assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                assert_eq!(
                    pg.shape(),
                    self.nodes[p].value.shape(),
                    "gradient shape mismatch for node {p}"
                );
                let pg = Self::canonical(pg);
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        NodeGrads { grads }
    }

    /// Collect per-parameter gradients (summing over repeated uses).
    pub fn param_grads(&self, node_grads: &NodeGrads, n_params: usize) -> ParamGrads {
        let mut out: ParamGrads = (0..n_params).map(|_| None).collect();
        for &(node, id) in &self.param_uses {
            if let Some(g) = node_grads.grads[node].as_ref() {
                match &mut out[id.0] {
                    Some(acc) => *acc += g,
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

/// Accumulate `src` gradients into `dst` in place (used for sharded batches;
/// accumulation order is the caller's shard order, so results are
/// deterministic for a fixed shard size regardless of thread count).
pub fn accumulate_grads(dst: &mut ParamGrads, src: ParamGrads) {
    assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        match (d.as_mut(), s) {
            (Some(acc), Some(g)) => *acc += &g,
            (None, Some(g)) => *d = Some(g),
            _ => {}
        }
    }
}

/// Scale every gradient in place.
pub fn scale_grads(grads: &mut ParamGrads, factor: f64) {
    for g in grads.iter_mut().flatten() {
        g.mapv_inplace(|x| x * factor);
    }
}
