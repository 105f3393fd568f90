//! Training objective: measurement accuracy, prototype proximity and
//! prototype distinction, plus missing-label handling.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::WindowedSample;
use crate::error::{Error, Result};
use crate::network::{ForwardTrace, Network};
use crate::params::ParamSet;
use crate::prototypes::PrototypeBank;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Missing measurements contribute nothing.
    HardCrop,
    /// A learned per-KQI weight scales each measured entry.
    SoftAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub margin: f64,
    /// Distance temperature of the distance-softmax term.
    pub gamma: f64,
    pub label_mode: LabelMode,
    pub measurement: bool,
    pub proximity: bool,
    pub distinction: bool,
    /// Coefficient of `mean(1 − weight)` in soft-attention mode.
    pub attention_reg: f64,
    /// Negate the distinction term (rewards prototype similarity when minimized).
    pub literal_distinction_sign: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.01,
            margin: 1.0,
            gamma: 1.0,
            label_mode: LabelMode::HardCrop,
            measurement: true,
            proximity: true,
            distinction: true,
            attention_reg: 0.1,
            literal_distinction_sign: false,
        }
    }
}

impl LossConfig {
    pub fn measurement_only() -> Self {
        Self {
            proximity: false,
            distinction: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.measurement || self.proximity || self.distinction) {
            return Err(Error::Config("at least one loss must be enabled".into()));
        }
        if [self.lambda1, self.lambda2, self.lambda3, self.attention_reg]
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.margin > 0.0 && self.gamma > 0.0) {
            return Err(Error::Config("margin and gamma must be positive".into()));
        }
        Ok(())
    }
}

/// Per-entry label weights, `[T × K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    pub values: Tensor,
}

impl LabelMask {
    pub fn from_sample(sample: &WindowedSample) -> Result<Self> {
        let rows: Vec<Vec<f64>> = sample
            .stages
            .iter()
            .map(|s| s.label_mask.iter().map(|&m| f64::from(m)).collect())
            .collect();
        Ok(Self {
            values: Tensor::from_rows(&rows)?,
        })
    }
}

pub fn labels_of(sample: &WindowedSample) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = sample
        .stages
        .iter()
        .map(|s| s.labels.iter().map(|&l| f64::from(l)).collect())
        .collect();
    Tensor::from_rows(&rows)
}

/// Masked binary cross-entropy averaged over measured entries.
///
/// `soft_weights`, when given, holds one `[K]` node per stage that further
/// scales each entry; the normalizer stays `max(1, Σ mask)`.
pub fn measurement_loss(
    tape: &mut Tape,
    probs: &[NodeId],
    labels: &Tensor,
    mask: &LabelMask,
    soft_weights: Option<&[NodeId]>,
) -> Result<NodeId> {
    if labels.shape() != mask.values.shape() || labels.rows() != probs.len() {
        return Err(Error::dim("measurement_loss", labels.shape(), mask.values.shape()));
    }
    let total_mask: f64 = mask.values.values().iter().sum();
    if total_mask == 0.0 {
        return Ok(tape.scalar_const(0.0));
    }
    let mut terms = Vec::with_capacity(probs.len());
    for (t, &p) in probs.iter().enumerate() {
        let row_mask = mask.values.row(t);
        if row_mask.iter().all(|m| *m == 0.0) {
            continue;
        }
        let m = tape.constant(Tensor::vector(row_mask.to_vec()));
        let w = match soft_weights {
            Some(sw) => tape.hadamard(m, sw[t])?,
            None => m,
        };
        terms.push(tape.bce(p, labels.row(t), w)?);
    }
    let stacked = tape.stack(&terms)?;
    let sum = tape.sum(stacked);
    Ok(tape.scale(sum, 1.0 / total_mask.max(1.0)))
}

/// `mean(1 − w)` over measured entries of the soft-attention weights.
pub fn attention_regularizer(tape: &mut Tape, soft_weights: &[NodeId], mask: &LabelMask) -> Result<Option<NodeId>> {
    let total: f64 = mask.values.values().iter().sum();
    if total == 0.0 {
        return Ok(None);
    }
    let mut parts = Vec::new();
    for (t, &w) in soft_weights.iter().enumerate() {
        let m = tape.constant(Tensor::vector(mask.values.row(t).to_vec()));
        let kept = tape.dot(w, m)?;
        parts.push(kept);
    }
    let stacked = tape.stack(&parts)?;
    let kept = tape.sum(stacked);
    let mean_kept = tape.scale(kept, 1.0 / total);
    let neg = tape.scale(mean_kept, -1.0);
    Ok(Some(tape.add_scalar(neg, 1.0)))
}

/// Proximity class of a stage's label combination: the measured labels read
/// as a binary number (KQI 0 is the least significant bit), modulo `classes`.
/// Unmeasured bits count as zero; fully unmeasured stages have no class.
pub fn target_class(labels: &[f64], mask: &[f64], classes: usize) -> Option<usize> {
    if mask.iter().all(|m| *m == 0.0) {
        return None;
    }
    let code = labels
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (l, m))| **m > 0.0 && **l > 0.5)
        .fold(0usize, |acc, (k, _)| acc | (1usize << (k % usize::BITS as usize)));
    Some(code % classes)
}

static SINGLE_CLASS_WARNED: AtomicBool = AtomicBool::new(false);

/// Distance-softmax cross-entropy and hinge margin for one stage, given the
/// squared distances `dists: [C]` to every class centroid.
pub fn proximity_terms(
    tape: &mut Tape,
    dists: NodeId,
    target: usize,
    gamma: f64,
    margin: f64,
) -> Result<(NodeId, Option<NodeId>)> {
    let classes = tape.value(dists).len();
    if target >= classes {
        return Err(Error::Contract(format!("target class {target} of {classes}")));
    }
    let scaled = tape.scale(dists, -gamma);
    let lse = tape.logsumexp(scaled);
    let own = tape.index(scaled, target)?;
    let dce = tape.sub(lse, own)?;
    if classes < 2 {
        if !SINGLE_CLASS_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("single proximity class: margin loss undefined, using distance cross-entropy only");
        }
        return Ok((dce, None));
    }
    let rivals: Vec<NodeId> = (0..classes)
        .filter(|&c| c != target)
        .map(|c| tape.index(dists, c))
        .collect::<Result<_>>()?;
    let rivals = tape.stack(&rivals)?;
    let nearest = tape.min(rivals);
    let own_d = tape.index(dists, target)?;
    let gap = tape.sub(own_d, nearest)?;
    let shifted = tape.add_scalar(gap, margin);
    Ok((dce, Some(tape.relu(shifted))))
}

/// Prototype proximity loss `l_DCE + l_MCL`, averaged over stages with at least
/// one measured label. Returns `None` when no stage contributes.
#[allow(clippy::too_many_arguments)]
pub fn proximity_loss(
    tape: &mut Tape,
    hidden: &[NodeId],
    prototype_outputs: &[Vec<NodeId>],
    labels: &Tensor,
    mask: &LabelMask,
    bank: &PrototypeBank,
    cfg: &LossConfig,
) -> Result<Option<NodeId>> {
    let classes = bank.classes;
    let mut per_stage = Vec::new();
    for (t, (&h, rows)) in hidden.iter().zip(prototype_outputs).enumerate() {
        let Some(target) = target_class(labels.row(t), mask.values.row(t), classes) else {
            continue;
        };
        let mut dists = Vec::with_capacity(classes);
        for c in 0..classes {
            let members: Vec<NodeId> = rows
                .iter()
                .zip(&bank.class_of)
                .filter(|(_, &k)| k == c)
                .map(|(r, _)| *r)
                .collect();
            let centroid = tape.mean(&members)?;
            dists.push(tape.sq_dist(h, centroid)?);
        }
        let dists = tape.stack(&dists)?;
        let (dce, mcl) = proximity_terms(tape, dists, target, cfg.gamma, cfg.margin)?;
        per_stage.push(match mcl {
            Some(m) => tape.add(dce, m)?,
            None => dce,
        });
    }
    if per_stage.is_empty() {
        return Ok(None);
    }
    let stacked = tape.stack(&per_stage)?;
    let sum = tape.sum(stacked);
    Ok(Some(tape.scale(sum, 1.0 / per_stage.len() as f64)))
}

/// Mean pairwise cosine similarity of prototype weights plus masks over all
/// ordered pairs `i ≠ j`. Zero for fewer than two prototypes.
pub fn distinction_loss(tape: &mut Tape, params: &ParamSet, bank: &PrototypeBank, literal_sign: bool) -> Result<NodeId> {
    let n = bank.len();
    if n < 2 {
        return Ok(tape.scalar_const(0.0));
    }
    let nodes: Vec<(NodeId, NodeId)> = bank
        .prototypes
        .iter()
        .map(|p| (tape.param(params, p.weight), tape.param(params, p.mask)))
        .collect();
    let mut terms = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in (i + 1)..n {
            terms.push(tape.cosine(nodes[i].0, nodes[j].0)?);
            terms.push(tape.cosine(nodes[i].1, nodes[j].1)?);
        }
    }
    let stacked = tape.stack(&terms)?;
    let sum = tape.sum(stacked);
    // Unordered pairs counted once, so double them for the ordered-pair mean.
    let sign = if literal_sign { -1.0 } else { 1.0 };
    Ok(tape.scale(sum, sign * 2.0 / (n * (n - 1)) as f64))
}

/// Scalar values of the three loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub measurement: f64,
    pub proximity: f64,
    pub distinction: f64,
}

pub fn total_loss(cfg: &LossConfig, parts: LossParts) -> f64 {
    let mut total = 0.0;
    if cfg.measurement {
        total += cfg.lambda1 * parts.measurement;
    }
    if cfg.proximity {
        total += cfg.lambda2 * parts.proximity;
    }
    if cfg.distinction {
        total += cfg.lambda3 * parts.distinction;
    }
    total
}

/// Per-sample part of the objective (everything except the distinction term).
#[derive(Clone, Debug)]
pub struct SampleObjective {
    pub measurement: Option<NodeId>,
    pub proximity: Option<NodeId>,
    /// `λ1·(l1 + attention regularizer) + λ2·l2`, or `None` if nothing applies.
    pub weighted: Option<NodeId>,
}

pub fn sample_objective(
    tape: &mut Tape,
    net: &Network,
    trace: &ForwardTrace,
    sample: &WindowedSample,
    cfg: &LossConfig,
) -> Result<SampleObjective> {
    let labels = labels_of(sample)?;
    let mask = LabelMask::from_sample(sample)?;
    let mut weighted = Vec::new();
    let mut measurement = None;
    if cfg.measurement {
        let probs: Vec<NodeId> = trace.stages.iter().map(|s| s.probs).collect();
        let soft: Option<Vec<NodeId>> = match cfg.label_mode {
            LabelMode::SoftAttention => trace.stages.iter().map(|s| s.loss_weights).collect(),
            LabelMode::HardCrop => None,
        };
        let l1 = measurement_loss(tape, &probs, &labels, &mask, soft.as_deref())?;
        measurement = Some(l1);
        let mut term = l1;
        if let Some(sw) = &soft {
            if let Some(reg) = attention_regularizer(tape, sw, &mask)? {
                let reg = tape.scale(reg, cfg.attention_reg);
                term = tape.add(term, reg)?;
            }
        }
        weighted.push(tape.scale(term, cfg.lambda1));
    }
    let mut proximity = None;
    if let (true, Some(modular)) = (cfg.proximity, net.as_modular()) {
        let hidden: Vec<NodeId> = trace.stages.iter().map(|s| s.hidden).collect();
        let rows: Vec<Vec<NodeId>> = trace.stages.iter().map(|s| s.prototype_outputs.clone()).collect();
        if let Some(l2) = proximity_loss(tape, &hidden, &rows, &labels, &mask, &modular.bank, cfg)? {
            proximity = Some(l2);
            weighted.push(tape.scale(l2, cfg.lambda2));
        }
    }
    let weighted = match weighted.len() {
        0 => None,
        1 => Some(weighted[0]),
        _ => Some(tape.add(weighted[0], weighted[1])?),
    };
    Ok(SampleObjective {
        measurement,
        proximity,
        weighted,
    })
}

/// `λ3 · l3` for the network, if it has prototypes and the term is enabled.
pub fn batch_regularizer(tape: &mut Tape, net: &Network, cfg: &LossConfig) -> Result<Option<(NodeId, NodeId)>> {
    match (cfg.distinction, net.as_modular()) {
        (true, Some(m)) => {
            let l3 = distinction_loss(tape, &m.params, &m.bank, cfg.literal_distinction_sign)?;
            let weighted = tape.scale(l3, cfg.lambda3);
            Ok(Some((l3, weighted)))
        }
        _ => Ok(None),
    }
}

/// Full objective of a single sample on one tape: `λ1 l1 + λ2 l2 + λ3 l3`.
pub fn full_sample_loss(tape: &mut Tape, net: &Network, sample: &WindowedSample, cfg: &LossConfig) -> Result<NodeId> {
    let trace = net.forward(tape, sample)?;
    let obj = sample_objective(tape, net, &trace, sample, cfg)?;
    let reg = batch_regularizer(tape, net, cfg)?;
    match (obj.weighted, reg) {
        (Some(a), Some((_, b))) => tape.add(a, b),
        (Some(a), None) => Ok(a),
        (None, Some((_, b))) => Ok(b),
        (None, None) => Ok(tape.scalar_const(0.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l1(probs: &[Vec<f64>], labels: &[Vec<f64>], mask: &[Vec<f64>]) -> f64 {
        let mut t = Tape::new();
        let p: Vec<NodeId> = probs.iter().map(|r| t.constant(Tensor::vector(r.clone()))).collect();
        let mask = LabelMask {
            values: Tensor::from_rows(mask).unwrap(),
        };
        let out = measurement_loss(&mut t, &p, &Tensor::from_rows(labels).unwrap(), &mask, None).unwrap();
        t.scalar(out)
    }

    #[test]
    fn measurement_examples() {
        let perfect = l1(&[vec![1.0, 0.0]], &[vec![1.0, 0.0]], &[vec![1.0, 1.0]]);
        assert!(perfect < 1e-6);
        let half = l1(&[vec![0.5, 0.5], vec![0.5, 0.5]], &[vec![1.0, 0.0], vec![0.0, 0.0]], &[vec![1.0; 2], vec![1.0; 2]]);
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let v = l1(&[vec![0.9, 0.2]], &[vec![1.0, 0.0]], &[vec![1.0, 1.0]]);
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.1643).abs() < 1e-4);
    }

    #[test]
    fn all_masked_is_exact_zero() {
        let v = l1(&[vec![0.3, 0.9]], &[vec![1.0, 0.0]], &[vec![0.0, 0.0]]);
        assert_eq!(v.to_bits(), 0f64.to_bits());
    }

    #[test]
    fn masked_label_change_is_invisible() {
        let a = l1(&[vec![0.3, 0.9]], &[vec![1.0, 0.0]], &[vec![1.0, 0.0]]);
        let b = l1(&[vec![0.3, 0.9]], &[vec![1.0, 1.0]], &[vec![1.0, 0.0]]);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    fn terms(d: &[f64], target: usize, gamma: f64, margin: f64) -> (f64, Option<f64>) {
        let mut t = Tape::new();
        let dn = t.constant(Tensor::vector(d.to_vec()));
        let (dce, mcl) = proximity_terms(&mut t, dn, target, gamma, margin).unwrap();
        (t.scalar(dce), mcl.map(|m| t.scalar(m)))
    }

    #[test]
    fn proximity_examples() {
        let (dce, mcl) = terms(&[0.0, 10.0], 0, 1.0, 1.0);
        assert_eq!(mcl, Some(0.0));
        let expected = -(1.0 / (1.0 + (-10f64).exp())).ln();
        assert!((dce - expected).abs() < 1e-12);
        assert!((dce - 4.54e-5).abs() < 1e-7);

        let (dce, mcl) = terms(&[3.0, 3.0, 3.0], 1, 1.0, 1.0);
        assert!((dce - 3f64.ln()).abs() < 1e-12);
        assert_eq!(mcl, Some(1.0));

        let (dce, mcl) = terms(&[2.0, 1.0], 0, 1.0, 1.0);
        assert_eq!(mcl, Some(2.0));
        let expected = -((-2f64).exp() / ((-2f64).exp() + (-1f64).exp())).ln();
        assert!((dce - expected).abs() < 1e-12);
        assert!((dce - 1.3133).abs() < 1e-4);
    }

    #[test]
    fn single_class_has_no_margin_term() {
        let (dce, mcl) = terms(&[4.0], 0, 1.0, 1.0);
        assert_eq!(dce, 0.0);
        assert!(mcl.is_none());
    }

    #[test]
    fn class_targets() {
        assert_eq!(target_class(&[1.0, 0.0, 1.0], &[1.0; 3], 4), Some(1));
        assert_eq!(target_class(&[1.0, 1.0], &[1.0; 2], 4), Some(3));
        assert_eq!(target_class(&[1.0, 1.0], &[0.0, 1.0], 4), Some(2));
        assert_eq!(target_class(&[1.0, 1.0], &[0.0, 0.0], 4), None);
    }

    #[test]
    fn total_loss_examples() {
        let parts = LossParts {
            measurement: 0.5,
            proximity: 1.0,
            distinction: 2.0,
        };
        let only_l1 = LossConfig::measurement_only();
        assert_eq!(total_loss(&only_l1, parts), 0.5);
        assert_eq!(total_loss(&LossConfig::default(), LossParts::default()), 0.0);
        assert!((total_loss(&LossConfig::default(), parts) - 0.62).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let none = LossConfig {
            measurement: false,
            proximity: false,
            distinction: false,
            ..Default::default()
        };
        assert!(none.validate().is_err());
        assert!(LossConfig { margin: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    fn bank_with(weights: Vec<Tensor>, masks: Vec<Tensor>) -> (ParamSet, PrototypeBank) {
        let mut ps = ParamSet::new();
        let bank = PrototypeBank::from_parts(&mut ps, masks, weights, None, 1).unwrap();
        (ps, bank)
    }

    fn l3(ps: &ParamSet, bank: &PrototypeBank) -> f64 {
        let mut t = Tape::new();
        let n = distinction_loss(&mut t, ps, bank, false).unwrap();
        t.scalar(n)
    }

    #[test]
    fn distinction_examples() {
        let (ps, bank) = bank_with(
            vec![Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap()],
            vec![Tensor::vector(vec![1.0]), Tensor::vector(vec![0.0])],
        );
        assert_eq!(l3(&ps, &bank), 0.0);
        let w = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        let m = Tensor::vector(vec![0.5]);
        let (ps, bank) = bank_with(vec![w.clone(), w], vec![m.clone(), m]);
        assert!((l3(&ps, &bank) - 2.0).abs() < 1e-12);
        let (ps, bank) = bank_with(vec![Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap()], vec![Tensor::vector(vec![0.5])]);
        assert_eq!(l3(&ps, &bank), 0.0);
    }
}
