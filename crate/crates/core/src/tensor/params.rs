use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// The five disjoint roles a trainable tensor can play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Backbone producing descriptors (θ).
    Backbone,
    /// Discriminative task head (γ).
    DiscHead,
    /// VAE encoder emitting mean and log-variance (β^e).
    VaeEncoder,
    /// Feature decoder reconstructing descriptors from the latent (β^r).
    FeatureDecoder,
    /// Generative task head on the latent (β^t).
    GenHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Backbone,
        ParamGroup::DiscHead,
        ParamGroup::VaeEncoder,
        ParamGroup::FeatureDecoder,
        ParamGroup::GenHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::DiscHead => "disc_head",
            ParamGroup::VaeEncoder => "vae_encoder",
            ParamGroup::FeatureDecoder => "feature_decoder",
            ParamGroup::GenHead => "gen_head",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown parameter group `{s}`")))
    }
}

/// A set of parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const EMPTY: GroupSet = GroupSet(0);
    pub const THETA: GroupSet = GroupSet(1);
    pub const GAMMA: GroupSet = GroupSet(2);
    /// β = β^e ∪ β^r ∪ β^t.
    pub const BETA: GroupSet = GroupSet(4 | 8 | 16);
    pub const ALL: GroupSet = GroupSet(31);

    pub fn of(groups: &[ParamGroup]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, group: ParamGroup) -> bool {
        self.0 & group.bit() != 0
    }

    pub fn union(self, other: GroupSet) -> GroupSet {
        GroupSet(self.0 | other.0)
    }

    pub fn is_disjoint(self, other: GroupSet) -> bool {
        self.0 & other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = ParamGroup> {
        ParamGroup::ALL.into_iter().filter(move |g| self.contains(*g))
    }
}

impl From<ParamGroup> for GroupSet {
    fn from(g: ParamGroup) -> Self {
        GroupSet(g.bit())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Owner of every trainable tensor of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            group,
            tensor: tensor.with_requires_grad(true),
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, groups: GroupSet) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| groups.contains(p.group))
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of scalar parameters in the given groups.
    pub fn count(&self, groups: GroupSet) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(p.group))
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }
}

/// Gradients keyed by parameter, as produced by a group-filtered backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn insert(&mut self, id: ParamId, grad: Vec<f64>) {
        self.grads.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    /// Combines gradient sets over disjoint parameters.
    pub fn merge(mut self, other: Gradients) -> Result<Gradients> {
        for (id, g) in other.grads {
            if self.grads.insert(id, g).is_some() {
                return Err(Error::invalid(format!(
                    "parameter {} present in both gradient sets",
                    id.0
                )));
            }
        }
        Ok(self)
    }

    /// Adds every gradient into the matching tensor of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in &self.grads {
            store.get_mut(*id).tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Flattens gradients of the given ids, in id order, into one vector.
    pub fn flatten(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter()
            .flat_map(|id| self.grads.get(id).cloned().unwrap_or_default())
            .collect()
    }
}
