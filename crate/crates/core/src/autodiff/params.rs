use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which side of the reversal node a group sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupRole {
    Backbone,
    Srm,
}

#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<ParamId>,
    pub role: GroupRole,
    pub lr_scale: f64,
}

/// Owns every learnable tensor of a model, partitioned into groups.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    group_of: Vec<usize>,
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_group(&mut self, name: &str, role: GroupRole, lr_scale: f64) -> usize {
        assert!(lr_scale >= 0.0, "lr_scale must be nonnegative");
        self.groups.push(ParamGroup {
            name: name.to_string(),
            params: Vec::new(),
            role,
            lr_scale,
        });
        self.groups.len() - 1
    }

    pub fn add(&mut self, name: impl Into<String>, group: usize, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.tensors.push(tensor.with_grad());
        self.names.push(name);
        self.group_of.push(group);
        self.groups[group].params.push(id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group_of(&self, id: ParamId) -> &ParamGroup {
        &self.groups[self.group_of[id.0]]
    }

    pub fn set_lr_scale(&mut self, group: &str, scale: f64) -> Result<()> {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.name == group)
            .ok_or_else(|| Error::invalid(format!("no parameter group {group}")))?;
        g.lr_scale = scale;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Inserts every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t)).collect())
    }

    /// Accumulates graph gradients into each parameter's `grad` slot.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Copy of every gradient slot (zeros where absent), in parameter order.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

/// Graph handles of a [`ParamStore`] bound into one forward pass.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Binds parameters to caller-supplied vars, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
