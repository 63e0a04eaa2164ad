use super::TrainConfig;
use crate::network::{Gradients, Network};
use crate::tensor::{ConvGrads, ConvParams};

/// One parameter tensor pair exposed to the optimiser.
pub struct ParamSlot<'a> {
    pub params: &'a mut ConvParams,
    pub frozen: bool,
}

/// Per-slot momentum buffers, allocated on first use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Option<ConvGrads>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// `v ← momentum·v − lr·g`, `p ← p + v` for every trainable slot with a gradient.
pub fn sgd_step_slots(slots: Vec<ParamSlot<'_>>, grads: &[Option<ConvGrads>], state: &mut SgdState, config: &TrainConfig) {
    if state.velocity.len() < slots.len() {
        state.velocity.resize(slots.len(), None);
    }
    for (i, (slot, grad)) in slots.into_iter().zip(grads).enumerate() {
        let Some(g) = grad else { continue };
        if slot.frozen {
            continue;
        }
        let v = state.velocity[i].get_or_insert_with(|| ConvGrads::zeros_like(slot.params));
        let p = slot.params;
        for ((w, vw), gw) in p.weights.iter_mut().zip(v.weights.iter_mut()).zip(&g.weights) {
            *vw = config.momentum * *vw - config.learning_rate * gw;
            *w += *vw;
        }
        for ((b, vb), gb) in p.bias.iter_mut().zip(v.bias.iter_mut()).zip(&g.bias) {
            *vb = config.momentum * *vb - config.learning_rate * gb;
            *b += *vb;
        }
    }
}

impl Network {
    /// Convolution layers as optimiser slots, in layer order.
    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let frozen: Vec<bool> = (0..self.layers().len()).map(|i| self.is_frozen(i)).collect();
        self.layers_mut()
            .iter_mut()
            .zip(frozen)
            .filter_map(|(l, frozen)| match l {
                crate::network::Layer::Conv(params) => Some(ParamSlot { params, frozen }),
                _ => None,
            })
            .collect()
    }

    /// Re-index per-layer gradients to optimiser slot order.
    pub fn slot_grads(&self, grads: &Gradients) -> Vec<Option<ConvGrads>> {
        self.conv_indices().into_iter().map(|i| grads.layers[i].clone()).collect()
    }
}

/// Momentum SGD step on a single network; frozen layers are skipped.
pub fn sgd_step(net: &mut Network, grads: &Gradients, state: &mut SgdState, config: &TrainConfig) {
    let slot_grads = net.slot_grads(grads);
    sgd_step_slots(net.param_slots(), &slot_grads, state, config);
}
