use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{fingerprint, EvalConfig, TrainConfig};
use super::metrics::{auc, mean_std};
use super::train::{fit, EpochRecord, TrainedModel};
use crate::data::{split_dataset, stage_types_of, windows_of, Dataset, Holdout, SplitMode, WaferSequence};
use crate::error::{Error, Result};
use crate::network::Network;

const HOLDOUT_STREAM: u64 = 0x5eed_0003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kqis: Vec<String>,
    /// Per-KQI AUC; `None` where the eval labels hold a single class.
    pub auc: Vec<Option<f64>>,
    /// Pooled predictions per KQI.
    pub counts: Vec<usize>,
    /// Mean over defined per-KQI AUCs.
    pub mean_auc: Option<f64>,
    pub seed: u64,
    pub fingerprint: String,
    pub history: Vec<EpochRecord>,
}

/// Per-KQI AUC of `network` over every window of `sequences` (already
/// standardized), pooling stage predictions at measured label positions.
pub fn score_network(network: &Network, sequences: &[WaferSequence], window: usize) -> Result<(Vec<Option<f64>>, Vec<usize>)> {
    let k = network.kqis();
    let mut scores = vec![Vec::new(); k];
    let mut labels = vec![Vec::new(); k];
    for sample in windows_of(sequences, window)? {
        let pred = network.predict(&sample)?;
        for (t, stage) in sample.stages.iter().enumerate() {
            for q in 0..k {
                if stage.label_mask[q] == 1 {
                    scores[q].push(pred.probs.at(t, q));
                    labels[q].push(stage.labels[q]);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(k);
    for q in 0..k {
        out.push(auc(&scores[q], &labels[q])?);
    }
    Ok((out, scores.iter().map(Vec::len).collect()))
}

pub fn evaluate(model: &TrainedModel, sequences: &[WaferSequence]) -> Result<EvalReport> {
    let prepared = model.prepare(sequences);
    let (aucs, counts) = score_network(&model.network, &prepared, model.config.window)?;
    for (name, a) in model.vocabulary.kqis.iter().zip(&aucs) {
        if a.is_none() {
            log::warn!("AUC undefined for {name}: eval labels hold a single class");
        }
    }
    let defined: Vec<f64> = aucs.iter().flatten().copied().collect();
    Ok(EvalReport {
        kqis: model.vocabulary.kqis.clone(),
        mean_auc: mean_std(&defined).map(|m| m.0),
        auc: aucs,
        counts,
        seed: model.config.seed,
        fingerprint: fingerprint(&model.config),
        history: model.history.clone(),
    })
}

/// Picks the eval side of a split for `seed`. Generalized holdouts are
/// drawn until every eval stage type also occurs in training.
pub fn choose_holdout(data: &Dataset, mode: SplitMode, cfg: &EvalConfig, seed: u64) -> Result<Holdout> {
    if mode == SplitMode::Standard {
        return Ok(Holdout::Fraction(cfg.holdout_fraction));
    }
    if !cfg.holdout_values.is_empty() {
        return Ok(Holdout::Values(cfg.holdout_values.iter().cloned().collect()));
    }
    let keys: Vec<String> = data
        .sequences
        .iter()
        .filter_map(|s| mode.key(s).map(String::from))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = match mode {
        SplitMode::ByProductType => ((cfg.holdout_product_fraction * keys.len() as f64).round() as usize).max(1),
        _ => cfg.holdout_groups.max(1),
    };
    if n >= keys.len() {
        return Err(Error::Split(format!(
            "cannot hold out {n} of {} {} values",
            keys.len(),
            mode.label()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HOLDOUT_STREAM);
    for _ in 0..1000 {
        let chosen: BTreeSet<String> = index::sample(&mut rng, keys.len(), n).iter().map(|i| keys[i].clone()).collect();
        let (eval, train): (Vec<&WaferSequence>, Vec<&WaferSequence>) = data
            .sequences
            .iter()
            .partition(|s| mode.key(s).is_some_and(|k| chosen.contains(k)));
        let seen: BTreeSet<usize> = train.iter().flat_map(|s| s.stages.iter().map(|r| r.stage_type_id)).collect();
        if eval.iter().flat_map(|s| &s.stages).all(|r| seen.contains(&r.stage_type_id)) {
            return Ok(Holdout::Values(chosen));
        }
    }
    Err(Error::Split(format!(
        "no {} holdout leaves every eval stage type covered by training",
        mode.label()
    )))
}

/// Splits, trains with `cfg.seed` and evaluates once.
pub fn run_once(data: &Dataset, mode: SplitMode, holdout: &Holdout, cfg: &TrainConfig) -> Result<(TrainedModel, EvalReport)> {
    let (train, eval) = split_dataset(&data.sequences, mode, holdout, cfg.seed)?;
    let missing: Vec<usize> = {
        let seen: BTreeSet<usize> = stage_types_of(&train).into_iter().collect();
        stage_types_of(&eval).into_iter().filter(|s| !seen.contains(s)).collect()
    };
    if let Some(&s) = missing.first() {
        return Err(Error::MissingModule {
            stage_type: s,
            stage_index: None,
        });
    }
    let model = fit(&train, &data.vocabulary, cfg)?;
    let report = evaluate(&model, &eval)?;
    Ok((model, report))
}

/// Mean ± sample std of each KQI's AUC and of the mean AUC across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub split: SplitMode,
    pub kqis: Vec<String>,
    pub seeds: Vec<u64>,
    pub per_kqi: Vec<Option<(f64, f64)>>,
    pub mean_auc: Option<(f64, f64)>,
    pub runs: Vec<EvalReport>,
}

pub fn summarize(split: SplitMode, runs: Vec<EvalReport>) -> SeedSummary {
    let kqis = runs.first().map(|r| r.kqis.clone()).unwrap_or_default();
    let per_kqi = (0..kqis.len())
        .map(|q| mean_std(&runs.iter().filter_map(|r| r.auc[q]).collect::<Vec<_>>()))
        .collect();
    let mean_auc = mean_std(&runs.iter().filter_map(|r| r.mean_auc).collect::<Vec<_>>());
    SeedSummary {
        split,
        kqis,
        seeds: runs.iter().map(|r| r.seed).collect(),
        per_kqi,
        mean_auc,
        runs,
    }
}

/// One run per seed; the seed drives the holdout choice, split and training.
pub fn run_seeds(data: &Dataset, mode: SplitMode, eval: &EvalConfig, cfg: &TrainConfig) -> Result<SeedSummary> {
    let mut runs = Vec::with_capacity(eval.seeds.len());
    for &seed in &eval.seeds {
        let holdout = choose_holdout(data, mode, eval, seed)?;
        let cfg = TrainConfig { seed, ..cfg.clone() };
        runs.push(run_once(data, mode, &holdout, &cfg)?.1);
    }
    Ok(summarize(mode, runs))
}

pub fn format_mean_std(v: Option<(f64, f64)>) -> String {
    match v {
        Some((m, s)) => format!("{m:.3}±{s:.3}"),
        None => "n/a".into(),
    }
}

impl SeedSummary {
    pub fn render(&self) -> String {
        let mut out = format!("split: {} (seeds {:?})\n", self.split.label(), self.seeds);
        for (name, v) in self.kqis.iter().zip(&self.per_kqi) {
            out.push_str(&format!("{name}\t{}\n", format_mean_std(*v)));
        }
        out.push_str(&format!("mean\t{}\n", format_mean_std(self.mean_auc)));
        out
    }
}
