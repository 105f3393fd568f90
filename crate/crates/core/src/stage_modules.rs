//! Stage modules: per-stage-type mixing of the shared prototype bank.
//!
//! For a stage of type `j` executing mods `m_1..m_R`, the module's MLP `f_j`
//! maps `(x_t || h_{t-1})` to an `[I × M]` matrix whose columns are softmaxed
//! into per-mod attention over prototypes. Each mod step then mixes prototype
//! outputs with the selected column and squashes through tanh.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{StageRecord, WindowedSample};
use crate::error::{Error, Result};
use crate::layers::Dense;
use crate::network::{ForwardTrace, StageTrace};
use crate::params::ParamSet;
use crate::prototypes::PrototypeBank;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModularConfig {
    /// Hidden width H.
    pub hidden: usize,
    /// Prototype count I.
    pub prototypes: usize,
    /// Proximity classes C; defaults to the KQI count.
    pub classes: Option<usize>,
    pub prototype_bias: bool,
    /// Re-evaluate prototypes with the updated hidden state at every mod step.
    /// When false, prototypes see only `h_{t-1}` and all selected columns are summed.
    pub modstep_recompute: bool,
    /// Route every stage type through one shared module.
    pub shared_stage_module: bool,
    /// Hidden width of each `f_j`; defaults to `2 (D + H)`.
    pub stage_hidden: Option<usize>,
}

impl Default for ModularConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            prototypes: 8,
            classes: None,
            prototype_bias: true,
            modstep_recompute: true,
            shared_stage_module: false,
            stage_hidden: None,
        }
    }
}

/// One-hot `[M × R]` encoding of a stage's mod sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ModSelector {
    matrix: Tensor,
}

impl ModSelector {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn steps(&self) -> usize {
        self.matrix.cols()
    }

    /// Column `r` as a length-M vector.
    pub fn column(&self, r: usize) -> Tensor {
        let m = self.matrix.rows();
        Tensor::vector((0..m).map(|i| self.matrix.at(i, r)).collect())
    }

    /// Row sums: how many times each mod runs.
    pub fn counts(&self) -> Tensor {
        let m = self.matrix.rows();
        Tensor::vector((0..m).map(|i| self.matrix.row(i).iter().sum()).collect())
    }
}

pub fn build_selector(mod_sequence: &[usize], mod_types: usize) -> Result<ModSelector> {
    if mod_sequence.is_empty() {
        return Err(Error::Contract("a stage performs at least one mod".into()));
    }
    let r = mod_sequence.len();
    let mut values = vec![0.0; mod_types * r];
    for (step, &m) in mod_sequence.iter().enumerate() {
        if m >= mod_types {
            return Err(Error::Encoding(format!("mod id {m} outside vocabulary of {mod_types}")));
        }
        values[m * r + step] = 1.0;
    }
    Ok(ModSelector {
        matrix: Tensor::matrix(mod_types, r, values)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageModule {
    /// Stage type id, or `None` for the shared module.
    pub stage_type: Option<usize>,
    pub hidden: Dense,
    pub output: Dense,
}

/// Result of running one stage.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub hidden: NodeId,
    /// Prototype outputs from the final mod step.
    pub prototype_outputs: Vec<NodeId>,
    /// Softmaxed inter-prototype weights `[I × M]`.
    pub weights: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModularNetwork {
    pub cfg: ModularConfig,
    pub sensors: usize,
    pub kqis: usize,
    pub mod_types: usize,
    pub params: ParamSet,
    pub bank: PrototypeBank,
    pub modules: Vec<StageModule>,
    /// Stage type id → index into `modules`.
    pub module_of: BTreeMap<usize, usize>,
    pub classifier: Dense,
    /// Per-KQI loss-weight head used by the soft-attention label mode.
    pub attention_head: Option<Dense>,
}

impl ModularNetwork {
    pub fn new(
        cfg: ModularConfig,
        sensors: usize,
        kqis: usize,
        mod_types: usize,
        stage_types: &[usize],
        attention_head: bool,
        seed: u64,
    ) -> Result<Self> {
        if cfg.hidden == 0 || cfg.prototypes == 0 || sensors == 0 || kqis == 0 || mod_types == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let classes = cfg.classes.unwrap_or(kqis).min(cfg.prototypes);
        let bank = PrototypeBank::init(
            &mut params,
            &mut rng,
            cfg.prototypes,
            sensors,
            cfg.hidden,
            classes,
            cfg.prototype_bias,
        )?;
        let input = sensors + cfg.hidden;
        let width = cfg.stage_hidden.unwrap_or(2 * input);
        let out = cfg.prototypes * mod_types;
        let mut modules = Vec::new();
        let mut module_of = BTreeMap::new();
        if cfg.shared_stage_module {
            modules.push(StageModule {
                stage_type: None,
                hidden: Dense::init(&mut params, &mut rng, "stage_shared.hidden", input, width),
                output: Dense::init(&mut params, &mut rng, "stage_shared.output", width, out),
            });
            for &s in stage_types {
                module_of.insert(s, 0);
            }
        } else {
            for &s in stage_types {
                if module_of.contains_key(&s) {
                    continue;
                }
                module_of.insert(s, modules.len());
                modules.push(StageModule {
                    stage_type: Some(s),
                    hidden: Dense::init(&mut params, &mut rng, &format!("stage{s}.hidden"), input, width),
                    output: Dense::init(&mut params, &mut rng, &format!("stage{s}.output"), width, out),
                });
            }
        }
        let classifier = Dense::init(&mut params, &mut rng, "classifier", cfg.hidden, kqis);
        let attention_head = attention_head.then(|| Dense::init(&mut params, &mut rng, "attention", cfg.hidden, kqis));
        Ok(Self {
            cfg,
            sensors,
            kqis,
            mod_types,
            params,
            bank,
            modules,
            module_of,
            classifier,
            attention_head,
        })
    }

    pub fn hidden(&self) -> usize {
        self.cfg.hidden
    }

    pub fn prototypes(&self) -> usize {
        self.bank.len()
    }

    pub fn module(&self, stage_type: usize) -> Result<&StageModule> {
        self.module_of
            .get(&stage_type)
            .map(|&i| &self.modules[i])
            .ok_or(Error::MissingModule {
                stage_type,
                stage_index: None,
            })
    }

    /// `softmax_columns(reshape(f_j(x || h_prev), [I, M]))`.
    pub fn inter_prototype_weights(&self, tape: &mut Tape, stage_type: usize, x: NodeId, h_prev: NodeId) -> Result<NodeId> {
        let module = self.module(stage_type)?;
        let joined = tape.concat(&[x, h_prev])?;
        let pre = module.hidden.forward(tape, &self.params, joined)?;
        let act = tape.tanh(pre);
        let flat = module.output.forward(tape, &self.params, act)?;
        let mat = tape.reshape(flat, vec![self.prototypes(), self.mod_types])?;
        tape.softmax_columns(mat)
    }

    pub fn stage_forward(
        &self,
        tape: &mut Tape,
        stage_type: usize,
        mod_sequence: &[usize],
        x: NodeId,
        h_prev: NodeId,
    ) -> Result<StageOutput> {
        let selector = build_selector(mod_sequence, self.mod_types)?;
        let weights = self.inter_prototype_weights(tape, stage_type, x, h_prev)?;
        if !self.cfg.modstep_recompute {
            let counts = tape.constant(selector.counts());
            let mix = tape.matvec(weights, counts)?;
            let rows = self.bank.forward(tape, &self.params, x, h_prev)?;
            let combined = tape.weighted_sum(mix, &rows)?;
            let hidden = tape.tanh(combined);
            return Ok(StageOutput {
                hidden,
                prototype_outputs: rows,
                weights,
            });
        }
        let mut h = h_prev;
        let mut rows = Vec::new();
        for r in 0..selector.steps() {
            let column = tape.constant(selector.column(r));
            let mix = tape.matvec(weights, column)?;
            rows = self.bank.forward(tape, &self.params, x, h)?;
            let combined = tape.weighted_sum(mix, &rows)?;
            h = tape.tanh(combined);
        }
        Ok(StageOutput {
            hidden: h,
            prototype_outputs: rows,
            weights,
        })
    }

    /// Per-KQI probabilities `sigmoid(f_c(h))`.
    pub fn classify(&self, tape: &mut Tape, h: NodeId) -> Result<NodeId> {
        let logits = self.classifier.forward(tape, &self.params, h)?;
        Ok(tape.sigmoid(logits))
    }

    fn sensor_node(&self, tape: &mut Tape, stage: &StageRecord) -> Result<NodeId> {
        if stage.sensors.len() != self.sensors {
            return Err(Error::dim("sensors", &[self.sensors], &[stage.sensors.len()]));
        }
        Ok(tape.constant(Tensor::vector(stage.sensors.clone())))
    }

    pub fn forward(&self, tape: &mut Tape, sample: &WindowedSample) -> Result<ForwardTrace> {
        let mut h = tape.constant(Tensor::zeros(&[self.hidden()]));
        let mut stages = Vec::with_capacity(sample.len());
        for (t, stage) in sample.stages.iter().enumerate() {
            let x = self.sensor_node(tape, stage)?;
            let out = self
                .stage_forward(tape, stage.stage_type_id, &stage.mod_sequence, x, h)
                .map_err(|e| match e {
                    Error::MissingModule { stage_type, .. } => Error::MissingModule {
                        stage_type,
                        stage_index: Some(t),
                    },
                    other => other,
                })?;
            h = out.hidden;
            let probs = self.classify(tape, h)?;
            let loss_weights = match &self.attention_head {
                Some(head) => {
                    let logits = head.forward(tape, &self.params, h)?;
                    Some(tape.sigmoid(logits))
                }
                None => None,
            };
            stages.push(StageTrace {
                hidden: h,
                probs,
                prototype_outputs: out.prototype_outputs,
                weights: Some(out.weights),
                loss_weights,
            });
        }
        Ok(ForwardTrace { stages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use crate::prototypes::prototype_forward;

    fn toy(hidden: usize, prototypes: usize, mods: usize, seed: u64) -> ModularNetwork {
        let cfg = ModularConfig {
            hidden,
            prototypes,
            classes: Some(1),
            ..Default::default()
        };
        ModularNetwork::new(cfg, 1, 2, mods, &[0, 1], false, seed).unwrap()
    }

    #[test]
    fn selector_examples() {
        let s = build_selector(&[0], 2).unwrap();
        assert_eq!(s.matrix().values(), &[1.0, 0.0]);
        let s = build_selector(&[1, 0, 1], 2).unwrap();
        assert_eq!(s.column(0).values(), &[0.0, 1.0]);
        assert_eq!(s.column(1).values(), &[1.0, 0.0]);
        assert_eq!(s.column(2).values(), &[0.0, 1.0]);
        // MOD02, MOD04, MOD02 with MOD02→0, MOD04→1.
        let s = build_selector(&[0, 1, 0], 2).unwrap();
        assert_eq!(s.column(0).values(), &[1.0, 0.0]);
        assert_eq!(s.column(1).values(), &[0.0, 1.0]);
        assert_eq!(s.column(2).values(), &[1.0, 0.0]);
        assert!(matches!(build_selector(&[2], 2), Err(Error::Encoding(_))));
        assert!(matches!(build_selector(&[], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn weight_columns_sum_to_one() {
        let net = toy(3, 2, 2, 4);
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.7]));
        let h = t.constant(Tensor::vector(vec![0.1, -0.3, 0.2]));
        let w = net.inter_prototype_weights(&mut t, 1, x, h).unwrap();
        let w = t.value(w);
        assert_eq!(w.shape(), &[2, 2]);
        for c in 0..2 {
            assert!((w.at(0, c) + w.at(1, c) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_layer_gives_uniform_weights() {
        let mut net = toy(3, 4, 2, 4);
        let out = net.modules[0].output.clone();
        *net.params.get_mut(out.weight) = Tensor::zeros(&[8, 8]);
        *net.params.get_mut(out.bias) = Tensor::zeros(&[8]);
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.7]));
        let h = t.constant(Tensor::zeros(&[3]));
        let w = net.inter_prototype_weights(&mut t, 0, x, h).unwrap();
        assert!(t.value(w).values().iter().all(|v| (*v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn weights_match_composed_primitives() {
        let net = toy(2, 2, 2, 0);
        let m = &net.modules[0];
        let (w1, b1) = (net.params.get(m.hidden.weight), net.params.get(m.hidden.bias));
        let (w2, b2) = (net.params.get(m.output.weight), net.params.get(m.output.bias));
        let input = [1.0, 0.0, 0.0];
        let hid: Vec<f64> = (0..w1.rows())
            .map(|r| (0..3).map(|c| w1.at(r, c) * input[c]).sum::<f64>() + b1.values()[r])
            .map(f64::tanh)
            .collect();
        let flat: Vec<f64> = (0..w2.rows())
            .map(|r| (0..hid.len()).map(|c| w2.at(r, c) * hid[c]).sum::<f64>() + b2.values()[r])
            .collect();
        let mut expected = flat.clone();
        for c in 0..2 {
            let z: f64 = (0..2).map(|r| flat[r * 2 + c].exp()).sum();
            for r in 0..2 {
                expected[r * 2 + c] = flat[r * 2 + c].exp() / z;
            }
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0]));
        let h = t.constant(Tensor::zeros(&[2]));
        let w = net.inter_prototype_weights(&mut t, 0, x, h).unwrap();
        for (a, b) in t.value(w).values().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_prototype_single_step() {
        let net = toy(3, 1, 2, 2);
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.4]));
        let h = t.constant(Tensor::vector(vec![0.2, 0.0, -0.5]));
        let out = net.stage_forward(&mut t, 0, &[1], x, h).unwrap();
        let p = prototype_forward(&mut t, &net.params, &net.bank.prototypes[0], x, h).unwrap();
        let expected = t.value(p).map(f64::tanh);
        for (a, b) in t.value(out.hidden).values().iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hidden_independent_prototypes_reach_fixed_point() {
        let mut net = toy(3, 2, 2, 5);
        for p in net.bank.prototypes.clone() {
            let w = net.params.get_mut(p.weight);
            for r in 0..3 {
                for c in 1..4 {
                    w.values_mut()[r * 4 + c] = 0.0;
                }
            }
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.9]));
        let h = t.constant(Tensor::zeros(&[3]));
        let one = net.stage_forward(&mut t, 0, &[1], x, h).unwrap();
        let two = net.stage_forward(&mut t, 0, &[1, 1], x, h).unwrap();
        assert_eq!(t.value(one.hidden), t.value(two.hidden));
    }

    #[test]
    fn two_step_recursion_matches_unrolled_oracle() {
        let net = toy(2, 2, 2, 0);
        let x = [0.3];
        let sensors = Tensor::vector(x.to_vec());
        // Per-step oracle built from independent prototype evaluations.
        let mut t = Tape::new();
        let xn = t.constant(sensors.clone());
        let h0 = t.constant(Tensor::zeros(&[2]));
        let w = net.inter_prototype_weights(&mut t, 1, xn, h0).unwrap();
        let wm = t.value(w).clone();
        let mut h = vec![0.0, 0.0];
        for &m in &[1usize, 0] {
            let mut t2 = Tape::new();
            let xn = t2.constant(sensors.clone());
            let hn = t2.constant(Tensor::vector(h.clone()));
            let mut acc = [0.0; 2];
            for (i, p) in net.bank.prototypes.iter().enumerate() {
                let o = prototype_forward(&mut t2, &net.params, p, xn, hn).unwrap();
                for (a, v) in acc.iter_mut().zip(t2.value(o).values()) {
                    *a += wm.at(i, m) * v;
                }
            }
            h = acc.iter().map(|v| v.tanh()).collect();
        }
        let mut t = Tape::new();
        let xn = t.constant(sensors);
        let h0 = t.constant(Tensor::zeros(&[2]));
        let out = net.stage_forward(&mut t, 1, &[1, 0], xn, h0).unwrap();
        for (a, b) in t.value(out.hidden).values().iter().zip(&h) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn classify_examples() {
        let mut net = toy(2, 2, 2, 0);
        let c = net.classifier.clone();
        *net.params.get_mut(c.weight) = Tensor::zeros(&[2, 2]);
        let mut t = Tape::new();
        let h = t.constant(Tensor::vector(vec![0.5, -0.5]));
        let p = net.classify(&mut t, h).unwrap();
        assert_eq!(t.value(p).values(), &[0.5, 0.5]);

        *net.params.get_mut(c.bias) = Tensor::vector(vec![50.0, -50.0]);
        let mut t = Tape::new();
        let h = t.constant(Tensor::vector(vec![0.5, -0.5]));
        let p = net.classify(&mut t, h).unwrap();
        let v = t.value(p).values();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[0] < 1.0);
        assert!(v[1] > 0.0 && v[1] < 1e-12);
    }

    #[test]
    fn classify_matches_affine_sigmoid() {
        let net = toy(2, 2, 2, 0);
        let (w, b) = (net.params.get(net.classifier.weight), net.params.get(net.classifier.bias));
        let hv = [0.1, -0.2];
        let mut t = Tape::new();
        let h = t.constant(Tensor::vector(hv.to_vec()));
        let p = net.classify(&mut t, h).unwrap();
        for k in 0..2 {
            let z = w.at(k, 0) * hv[0] + w.at(k, 1) * hv[1] + b.values()[k];
            assert!((t.value(p).values()[k] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_stage_type_is_reported() {
        let net = toy(2, 2, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let x = t.constant(init::uniform(&mut rng, &[1], 1.0));
        let h = t.constant(Tensor::zeros(&[2]));
        let err = net.inter_prototype_weights(&mut t, 7, x, h).unwrap_err();
        assert!(matches!(err, Error::MissingModule { stage_type: 7, .. }));
        assert!(err.to_string().contains('7'));
    }

    #[test]
    fn shared_module_serves_every_stage_type() {
        let cfg = ModularConfig {
            hidden: 2,
            prototypes: 2,
            shared_stage_module: true,
            ..Default::default()
        };
        let net = ModularNetwork::new(cfg, 1, 2, 2, &[0, 1, 2], false, 0).unwrap();
        assert_eq!(net.modules.len(), 1);
        assert!(net.module(2).is_ok());
    }
}
