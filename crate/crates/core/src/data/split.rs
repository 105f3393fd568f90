use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::WaferSequence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Standard,
    ByProductType,
    ByProductGroup,
}

impl SplitMode {
    pub fn key<'a>(&self, seq: &'a WaferSequence) -> Option<&'a str> {
        match self {
            SplitMode::Standard => None,
            SplitMode::ByProductType => Some(&seq.product_type),
            SplitMode::ByProductGroup => Some(&seq.product_group),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SplitMode::Standard => "standard",
            SplitMode::ByProductType => "product_type",
            SplitMode::ByProductGroup => "product_group",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holdout {
    /// Fraction of wafers sent to eval (standard mode).
    Fraction(f64),
    /// Key values sent to eval (generalized modes).
    Values(BTreeSet<String>),
}

/// Splits into (train, eval), preserving input order on both sides.
pub fn split_dataset(
    sequences: &[WaferSequence],
    mode: SplitMode,
    holdout: &Holdout,
    seed: u64,
) -> Result<(Vec<WaferSequence>, Vec<WaferSequence>)> {
    let (train, eval) = match (mode, holdout) {
        (SplitMode::Standard, Holdout::Fraction(f)) => {
            if !(*f > 0.0 && *f < 1.0) {
                return Err(Error::Split(format!("holdout fraction {f} outside (0, 1)")));
            }
            let mut order: Vec<usize> = (0..sequences.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_eval = (f * sequences.len() as f64).round() as usize;
            let eval_idx: BTreeSet<usize> = order.into_iter().take(n_eval).collect();
            let (mut train, mut eval) = (Vec::new(), Vec::new());
            for (i, s) in sequences.iter().enumerate() {
                if eval_idx.contains(&i) { &mut eval } else { &mut train }.push(s.clone());
            }
            (train, eval)
        }
        (SplitMode::ByProductType | SplitMode::ByProductGroup, Holdout::Values(values)) => {
            let present: BTreeSet<&str> = sequences.iter().filter_map(|s| mode.key(s)).collect();
            if let Some(v) = values.iter().find(|v| !present.contains(v.as_str())) {
                return Err(Error::Split(format!("holdout value `{v}` does not occur in the data")));
            }
            let (eval, train): (Vec<_>, Vec<_>) = sequences
                .iter()
                .cloned()
                .partition(|s| mode.key(s).is_some_and(|k| values.contains(k)));
            let train_keys: BTreeSet<&str> = train.iter().filter_map(|s| mode.key(s)).collect();
            let eval_keys: BTreeSet<&str> = eval.iter().filter_map(|s| mode.key(s)).collect();
            assert!(
                train_keys.is_disjoint(&eval_keys),
                "generalized split produced overlapping {} pools",
                mode.label()
            );
            (train, eval)
        }
        _ => return Err(Error::Split(format!("holdout {holdout:?} does not fit mode {}", mode.label()))),
    };
    if train.is_empty() {
        return Err(Error::Split("train side is empty".into()));
    }
    if eval.is_empty() {
        return Err(Error::Split("eval side is empty".into()));
    }
    Ok((train, eval))
}
