//! Common surface over the modular network and the recurrent baseline.

use serde::{Deserialize, Serialize};

use crate::baseline::RecurrentBaseline;
use crate::data::WindowedSample;
use crate::error::Result;
use crate::params::ParamSet;
use crate::stage_modules::ModularNetwork;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Tape handles produced for one stage of a forward pass.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub hidden: NodeId,
    pub probs: NodeId,
    /// Empty for models without prototypes.
    pub prototype_outputs: Vec<NodeId>,
    /// Softmaxed `[I × M]` inter-prototype weights.
    pub weights: Option<NodeId>,
    /// Predicted per-KQI loss weights (soft-attention label mode).
    pub loss_weights: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub stages: Vec<StageTrace>,
}

/// Plain-value outputs of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[T × K]` probabilities.
    pub probs: Tensor,
    /// `[T × H]` hidden trace.
    pub hidden: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Modular,
    RecurrentBaseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    Modular(ModularNetwork),
    RecurrentBaseline(RecurrentBaseline),
}

impl Network {
    pub fn kind(&self) -> ModelKind {
        match self {
            Network::Modular(_) => ModelKind::Modular,
            Network::RecurrentBaseline(_) => ModelKind::RecurrentBaseline,
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Network::Modular(m) => &m.params,
            Network::RecurrentBaseline(b) => &b.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Network::Modular(m) => &mut m.params,
            Network::RecurrentBaseline(b) => &mut b.params,
        }
    }

    pub fn kqis(&self) -> usize {
        match self {
            Network::Modular(m) => m.kqis,
            Network::RecurrentBaseline(b) => b.kqis,
        }
    }

    pub fn as_modular(&self) -> Option<&ModularNetwork> {
        match self {
            Network::Modular(m) => Some(m),
            Network::RecurrentBaseline(_) => None,
        }
    }

    pub fn forward(&self, tape: &mut Tape, sample: &WindowedSample) -> Result<ForwardTrace> {
        match self {
            Network::Modular(m) => m.forward(tape, sample),
            Network::RecurrentBaseline(b) => b.forward(tape, sample),
        }
    }

    /// Projection applied after every optimizer step.
    pub fn after_step(&mut self) {
        if let Network::Modular(m) = self {
            m.bank.clamp_masks(&mut m.params);
        }
    }

    pub fn predict(&self, sample: &WindowedSample) -> Result<Prediction> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, sample)?;
        let probs: Vec<Vec<f64>> = trace.stages.iter().map(|s| tape.value(s.probs).values().to_vec()).collect();
        let hidden: Vec<Vec<f64>> = trace.stages.iter().map(|s| tape.value(s.hidden).values().to_vec()).collect();
        Ok(Prediction {
            probs: Tensor::from_rows(&probs)?,
            hidden: Tensor::from_rows(&hidden)?,
        })
    }
}
