//! Named parameter storage shared by every learnable module.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Which part of the system a parameter belongs to; freezing works per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Spatiotemporal semantic encoder (ζ).
    Semantic,
    /// JSC encoder blocks (θ).
    JscEncoder,
    /// Rate predictors (ε).
    Predictor,
    /// JSC decoder blocks and compensation vector (φ).
    JscDecoder,
    /// Rate embedding read by both the JSC encoder and decoder.
    SharedRate,
    /// Multimodal fuser and synthetic text encoder (ν).
    Fuser,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Semantic,
        ParamGroup::JscEncoder,
        ParamGroup::Predictor,
        ParamGroup::JscDecoder,
        ParamGroup::SharedRate,
        ParamGroup::Fuser,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Set of parameter groups, e.g. the trainable groups of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const NONE: GroupSet = GroupSet(0);

    pub fn all() -> Self {
        Self::of(&ParamGroup::ALL)
    }

    pub fn of(groups: &[ParamGroup]) -> Self {
        GroupSet(groups.iter().fold(0, |m, g| m | g.bit()))
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn with(self, g: ParamGroup) -> Self {
        GroupSet(self.0 | g.bit())
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalars in `group`.
    pub fn group_size(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Overwrites values from `other` by name; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .by_name(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.value.shape(),
                    src.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
