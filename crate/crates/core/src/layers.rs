use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::init;
use crate::params::{ParamId, ParamSet};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Fully connected layer `W · x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn init<R: Rng>(params: &mut ParamSet, rng: &mut R, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = params.add(format!("{name}.weight"), init::glorot(rng, outputs, inputs));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> Result<NodeId> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.affine(w, x, Some(b))
    }

    pub fn outputs(&self, params: &ParamSet) -> usize {
        params.get(self.weight).rows()
    }
}
