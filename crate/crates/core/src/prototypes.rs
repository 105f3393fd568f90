//! Implicit prototypes: masked affine + tanh maps shared by every stage module.
//!
//! Prototype `i` maps sensor readings `x` and the running hidden state `h` to
//! `tanh(W_i · ((x ∘ M_i) || h) + b_i)`. The mask `M_i` is trained by gradient
//! and projected back onto `[0, 1]` after every optimizer step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::params::{ParamId, ParamSet};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub index: usize,
    pub mask: ParamId,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub prototypes: Vec<Prototype>,
    pub sensors: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Proximity class of each prototype; classes own equal-sized contiguous blocks.
    pub class_of: Vec<usize>,
}

fn class_assignment(count: usize, classes: usize) -> Result<Vec<usize>> {
    if classes == 0 || !count.is_multiple_of(classes) {
        return Err(Error::Config(format!(
            "{count} prototypes cannot be split evenly into {classes} classes"
        )));
    }
    let per = count / classes;
    Ok((0..count).map(|i| i / per).collect())
}

impl PrototypeBank {
    /// Random bank: masks uniform in [0.4, 0.6], weights uniform in ±sqrt(6/(D+2H)), zero bias.
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        count: usize,
        sensors: usize,
        hidden: usize,
        classes: usize,
        bias: bool,
    ) -> Result<Self> {
        let class_of = class_assignment(count, classes)?;
        let bound = (6.0 / (sensors + 2 * hidden) as f64).sqrt();
        let prototypes = (0..count)
            .map(|i| {
                let mask_vals = (0..sensors).map(|_| rng.random_range(0.4..=0.6)).collect();
                let mask = params.add(format!("proto{i}.mask"), Tensor::vector(mask_vals));
                let weight = params.add(
                    format!("proto{i}.weight"),
                    init::uniform(rng, &[hidden, sensors + hidden], bound),
                );
                let bias = bias.then(|| params.add(format!("proto{i}.bias"), Tensor::zeros(&[hidden])));
                Prototype { index: i, mask, weight, bias }
            })
            .collect();
        Ok(Self {
            prototypes,
            sensors,
            hidden,
            classes,
            class_of,
        })
    }

    /// Bank from explicit tensors. `biases` may be omitted for the bias-free form.
    pub fn from_parts(
        params: &mut ParamSet,
        masks: Vec<Tensor>,
        weights: Vec<Tensor>,
        biases: Option<Vec<Tensor>>,
        classes: usize,
    ) -> Result<Self> {
        let count = masks.len();
        if weights.len() != count || biases.as_ref().is_some_and(|b| b.len() != count) || count == 0 {
            return Err(Error::Contract("prototype part counts disagree".into()));
        }
        let sensors = masks[0].len();
        let hidden = weights[0].rows();
        for (m, w) in masks.iter().zip(&weights) {
            if m.shape() != [sensors] || w.shape() != [hidden, sensors + hidden] {
                return Err(Error::dim("prototype parts", m.shape(), w.shape()));
            }
        }
        let class_of = class_assignment(count, classes)?;
        let mut biases = biases.map(|b| b.into_iter());
        let prototypes = masks
            .into_iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (m, w))| {
                let mask = params.add(format!("proto{i}.mask"), m);
                let weight = params.add(format!("proto{i}.weight"), w);
                let bias = biases
                    .as_mut()
                    .and_then(|it| it.next())
                    .map(|b| params.add(format!("proto{i}.bias"), b));
                Prototype { index: i, mask, weight, bias }
            })
            .collect();
        Ok(Self {
            prototypes,
            sensors,
            hidden,
            classes,
            class_of,
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    /// One output row per prototype, in bank order.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: NodeId, h_prev: NodeId) -> Result<Vec<NodeId>> {
        self.prototypes
            .iter()
            .map(|p| prototype_forward(tape, params, p, x, h_prev))
            .collect()
    }

    /// Stacked `[I × H]` output of [`PrototypeBank::forward`].
    pub fn forward_matrix(&self, tape: &mut Tape, params: &ParamSet, x: NodeId, h_prev: NodeId) -> Result<NodeId> {
        let rows = self.forward(tape, params, x, h_prev)?;
        tape.stack(&rows)
    }

    /// Projects every mask value onto [0, 1].
    pub fn clamp_masks(&self, params: &mut ParamSet) {
        for p in &self.prototypes {
            for v in params.get_mut(p.mask).values_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
}

pub fn prototype_forward(
    tape: &mut Tape,
    params: &ParamSet,
    proto: &Prototype,
    x: NodeId,
    h_prev: NodeId,
) -> Result<NodeId> {
    let mask = tape.param(params, proto.mask);
    let weight = tape.param(params, proto.weight);
    let bias = proto.bias.map(|b| tape.param(params, b));
    let masked = tape.hadamard(x, mask)?;
    let joined = tape.concat(&[masked, h_prev])?;
    let pre = tape.affine(weight, joined, bias)?;
    Ok(tape.tanh(pre))
}
