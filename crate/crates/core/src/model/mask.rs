use std::collections::BTreeSet;

use crate::analytics::SelectionPlan;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{MoEModel, ParamId};

/// Per-tensor trainability flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMask {
    pub flags: Vec<(ParamId, bool)>,
    pub trainable_scalars: usize,
    pub total_scalars: usize,
}

impl ParamMask {
    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.flags.iter().filter(|(_, on)| *on).map(|(id, _)| *id)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.flags.iter().any(|&(p, on)| p == id && on)
    }

    /// Share of model scalars that are trainable.
    pub fn fraction(&self) -> f64 {
        self.trainable_scalars as f64 / self.total_scalars as f64
    }

    /// Everything trainable.
    pub fn all<S: Scalar>(model: &mut MoEModel<S>) -> Self {
        model.set_all_trainable(true);
        Self::read(model)
    }

    fn read<S: Scalar>(model: &MoEModel<S>) -> Self {
        let params = model.named_params();
        Self {
            flags: params.iter().map(|(id, t)| (*id, t.requires_grad())).collect(),
            trainable_scalars: model.num_trainable(),
            total_scalars: model.num_params(),
        }
    }
}

/// Freezes the model except the planned experts' FFN weights and the full
/// router matrix of every layer that holds a target.
pub fn apply_mask<S: Scalar>(model: &mut MoEModel<S>, plan: &SelectionPlan) -> Result<ParamMask> {
    let cfg = model.config().clone();
    let mut on = BTreeSet::new();
    for entry in &plan.entries {
        if entry.layer >= cfg.num_layers || entry.expert >= cfg.experts_per_layer {
            return Err(Error::Index {
                what: "planned expert",
                index: entry.layer * cfg.experts_per_layer + entry.expert,
                bound: cfg.num_layers * cfg.experts_per_layer,
            });
        }
        on.insert(ParamId::Router(entry.layer));
        on.insert(ParamId::ExpertUp(entry.layer, entry.expert));
        on.insert(ParamId::ExpertDown(entry.layer, entry.expert));
    }
    for (id, t) in model.named_params_mut() {
        t.set_requires_grad(on.contains(&id));
    }
    Ok(ParamMask::read(model))
}
