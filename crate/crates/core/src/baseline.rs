//! Gated recurrent (LSTM) baseline over per-stage sensor vectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowedSample;
use crate::error::{Error, Result};
use crate::layers::Dense;
use crate::network::{ForwardTrace, StageTrace};
use crate::params::ParamSet;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrentBaseline {
    pub sensors: usize,
    pub hidden: usize,
    pub kqis: usize,
    pub params: ParamSet,
    /// Input, forget, cell and output gate pre-activations stacked as `[4H × (D+H)]`.
    pub gates: Dense,
    pub classifier: Dense,
}

impl RecurrentBaseline {
    pub fn new(sensors: usize, hidden: usize, kqis: usize, seed: u64) -> Result<Self> {
        if sensors == 0 || hidden == 0 || kqis == 0 {
            return Err(Error::Config("baseline dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let gates = Dense::init(&mut params, &mut rng, "lstm.gates", sensors + hidden, 4 * hidden);
        // Forget-gate bias of one keeps early gradients flowing through the cell.
        for v in &mut params.get_mut(gates.bias).values_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        let classifier = Dense::init(&mut params, &mut rng, "classifier", hidden, kqis);
        Ok(Self {
            sensors,
            hidden,
            kqis,
            params,
            gates,
            classifier,
        })
    }

    fn cell(&self, tape: &mut Tape, x: NodeId, h: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
        let hd = self.hidden;
        let joined = tape.concat(&[x, h])?;
        let pre = self.gates.forward(tape, &self.params, joined)?;
        let i = tape.slice(pre, 0, hd)?;
        let f = tape.slice(pre, hd, hd)?;
        let g = tape.slice(pre, 2 * hd, hd)?;
        let o = tape.slice(pre, 3 * hd, hd)?;
        let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
        let keep = tape.hadamard(f, c)?;
        let write = tape.hadamard(i, g)?;
        let c = tape.add(keep, write)?;
        let squashed = tape.tanh(c);
        let h = tape.hadamard(o, squashed)?;
        Ok((h, c))
    }

    pub fn forward(&self, tape: &mut Tape, sample: &WindowedSample) -> Result<ForwardTrace> {
        let mut h = tape.constant(Tensor::zeros(&[self.hidden]));
        let mut c = tape.constant(Tensor::zeros(&[self.hidden]));
        let mut stages = Vec::with_capacity(sample.len());
        for stage in &sample.stages {
            if stage.sensors.len() != self.sensors {
                return Err(Error::dim("sensors", &[self.sensors], &[stage.sensors.len()]));
            }
            let x = tape.constant(Tensor::vector(stage.sensors.clone()));
            (h, c) = self.cell(tape, x, h, c)?;
            let logits = self.classifier.forward(tape, &self.params, h)?;
            let probs = tape.sigmoid(logits);
            stages.push(StageTrace {
                hidden: h,
                probs,
                prototype_outputs: Vec::new(),
                weights: None,
                loss_weights: None,
            });
        }
        Ok(ForwardTrace { stages })
    }
}
