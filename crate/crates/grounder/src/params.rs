//! Named parameter storage with freeze tags and group accounting.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Which budget bucket a parameter belongs to. Backbone covers everything
/// frozen (encoder weights, embeddings, positional tables).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Prompt,
    Bridge,
    Cia,
    Dosa,
    Head,
    Reg,
}

impl ParamGroup {
    pub fn label(&self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Prompt => "prompts",
            ParamGroup::Bridge => "bridges",
            ParamGroup::Cia => "cia",
            ParamGroup::Dosa => "dosa",
            ParamGroup::Head => "head",
            ParamGroup::Reg => "reg",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
    pub group: ParamGroup,
    /// Weight decay applies only to matrices, not to prompt/REG tokens or biases.
    pub decay: bool,
}

/// Flat parameter store. The tape refers to parameters by index, so ids are
/// stable for the lifetime of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        frozen: bool,
        group: ParamGroup,
        decay: bool,
    ) -> usize {
        let id = self.params.len();
        self.params.push(Param { name: name.into(), value, frozen, group, decay });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn tunable_ids(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.frozen)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn frozen_ids(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.frozen)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count_in(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Fresh zero gradient buffers, one per parameter (frozen slots stay zero).
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| Tensor::zeros(p.value.rows, p.value.cols))
            .collect()
    }
}
