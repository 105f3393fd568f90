use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::metrics::{pearson, Correlation};
use super::config::TrainConfig;
use super::train::{fit, TrainedModel};
use crate::data::{Dataset, SplitMode, WaferSequence, WindowedSample};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::cosine;

/// Mean flattened inter-prototype weight matrix per product type (or group),
/// over every stage of `sequences`.
pub fn attention_profiles(
    model: &TrainedModel,
    sequences: &[WaferSequence],
    key: SplitMode,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let net = model
        .network
        .as_modular()
        .ok_or_else(|| Error::Contract("attention profiles need a modular network".into()))?;
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for seq in model.prepare(sequences) {
        let name = key
            .key(&seq)
            .ok_or_else(|| Error::Contract("similarity needs a product type or group key".into()))?
            .to_string();
        let mut tape = Tape::new();
        let trace = net.forward(&mut tape, &WindowedSample::whole(&seq))?;
        for stage in &trace.stages {
            let Some(w) = stage.weights else { continue };
            let values = tape.value(w).values();
            let entry = sums.entry(name.clone()).or_insert_with(|| (vec![0.0; values.len()], 0));
            for (a, v) in entry.0.iter_mut().zip(values) {
                *a += v;
            }
            entry.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// Jaccard overlap of the stage-type sets seen for each product type (or group).
pub fn stage_set_similarity(sequences: &[WaferSequence], key: SplitMode) -> BTreeMap<(String, String), f64> {
    let mut sets: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for s in sequences {
        if let Some(k) = key.key(s) {
            sets.entry(k.to_string())
                .or_default()
                .extend(s.stages.iter().map(|r| r.stage_type_id));
        }
    }
    let mut out = BTreeMap::new();
    for (a, sa) in &sets {
        for (b, sb) in &sets {
            let union = sa.union(sb).count();
            let j = if union == 0 {
                0.0
            } else {
                sa.intersection(sb).count() as f64 / union as f64
            };
            out.insert((a.clone(), b.clone()), j);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub keys: Vec<String>,
    /// Attention cosine similarity averaged over seeds.
    pub attention: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
    /// Over the upper-triangle pairs; `None` when either side is constant.
    pub correlation: Option<Correlation>,
    pub seeds: usize,
}

impl SimilarityReport {
    pub fn render(&self) -> String {
        let mut out = String::from("key_a\tkey_b\tattention_cosine\tstage_jaccard\n");
        for i in 0..self.keys.len() {
            for j in (i + 1)..self.keys.len() {
                out.push_str(&format!(
                    "{}\t{}\t{:.6}\t{:.6}\n",
                    self.keys[i], self.keys[j], self.attention[i][j], self.truth[i][j]
                ));
            }
        }
        match &self.correlation {
            Some(c) => out.push_str(&format!(
                "# Pearson statistic={:.4} pvalue={:.4} pairs={} seeds={}\n",
                c.statistic, c.p_value, c.n, self.seeds
            )),
            None => out.push_str("# Pearson undefined (constant similarities)\n"),
        }
        out
    }
}

/// Correlates seed-averaged attention cosine similarity with ground-truth
/// similarity over all unordered key pairs present in every seed.
pub fn similarity_analysis(
    profiles_per_seed: &[BTreeMap<String, Vec<f64>>],
    truth: &BTreeMap<(String, String), f64>,
) -> Result<SimilarityReport> {
    let Some(first) = profiles_per_seed.first() else {
        return Err(Error::Config("similarity analysis needs at least one seed".into()));
    };
    let keys: Vec<String> = first
        .keys()
        .filter(|k| profiles_per_seed.iter().all(|p| p.contains_key(*k)))
        .cloned()
        .collect();
    if keys.len() < 3 {
        return Err(Error::Config(format!(
            "similarity analysis needs at least 3 products or groups, found {}",
            keys.len()
        )));
    }
    let n = keys.len();
    let mut attention = vec![vec![0.0; n]; n];
    let mut truth_m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let s: f64 = profiles_per_seed
                .iter()
                .map(|p| cosine(&p[&keys[i]], &p[&keys[j]]))
                .sum();
            attention[i][j] = s / profiles_per_seed.len() as f64;
            truth_m[i][j] = *truth
                .get(&(keys[i].clone(), keys[j].clone()))
                .ok_or_else(|| Error::Contract(format!("no ground truth for {} / {}", keys[i], keys[j])))?;
        }
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in (i + 1)..n {
            xs.push(attention[i][j]);
            ys.push(truth_m[i][j]);
        }
    }
    let correlation = pearson(&xs, &ys)?;
    if correlation.is_none() {
        log::warn!("similarity correlation undefined: zero variance");
    }
    Ok(SimilarityReport {
        keys,
        attention,
        truth: truth_m,
        correlation,
        seeds: profiles_per_seed.len(),
    })
}

/// Trains one modular model per seed on every sequence of `data`, then
/// correlates the learned attention profiles with stage-set overlap.
pub fn run_similarity(data: &Dataset, cfg: &TrainConfig, seeds: &[u64], key: SplitMode) -> Result<SimilarityReport> {
    if key == SplitMode::Standard {
        return Err(Error::Config("similarity needs the product_type or product_group key".into()));
    }
    let mut profiles = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let model = fit(&data.sequences, &data.vocabulary, &TrainConfig { seed, ..cfg.clone() })?;
        profiles.push(attention_profiles(&model, &data.sequences, key)?);
    }
    similarity_analysis(&profiles, &stage_set_similarity(&data.sequences, key))
}
