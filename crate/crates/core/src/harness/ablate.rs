use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EvalConfig, LossFlags, TrainConfig};
use super::eval::{choose_holdout, format_mean_std, run_once};
use super::metrics::mean_std;
use crate::data::{Dataset, SplitMode};
use crate::error::{Error, Result};

/// Mean AUC of one grid cell across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Mean AUC of each successful seed.
    pub values: Vec<f64>,
    pub mean_std: Option<(f64, f64)>,
    /// Failures, one message per failed seed.
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    /// Checkmark per flag column.
    pub flags: Vec<bool>,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub flag_names: Vec<String>,
    pub splits: Vec<SplitMode>,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn row(&self, flags: &[bool]) -> Option<&Row> {
        self.rows.iter().find(|r| r.flags == flags)
    }

    fn split_header(s: &SplitMode) -> &'static str {
        match s {
            SplitMode::Standard => "Standard",
            SplitMode::ByProductType => "Product",
            SplitMode::ByProductGroup => "Product Group",
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("{}\n", self.title);
        let mut header: Vec<String> = self.flag_names.clone();
        header.extend(self.splits.iter().map(|s| Self::split_header(s).to_string()));
        out.push_str(&header.join(" | "));
        out.push('\n');
        for row in &self.rows {
            let mut cells: Vec<String> = row.flags.iter().map(|f| if *f { "✓" } else { "-" }.to_string()).collect();
            for c in &row.cells {
                let mut s = format_mean_std(c.mean_std);
                if !c.errors.is_empty() {
                    s.push_str(&format!(" ({} failed)", c.errors.len()));
                }
                cells.push(s);
            }
            out.push_str(&cells.join(" | "));
            out.push('\n');
        }
        out
    }

    /// Tab-separated: flag columns as 1/0, then mean and std per split.
    pub fn to_tsv(&self) -> String {
        let mut header: Vec<String> = self.flag_names.clone();
        for s in &self.splits {
            header.push(format!("{}_mean", s.label()));
            header.push(format!("{}_std", s.label()));
        }
        let mut out = header.join("\t") + "\n";
        for row in &self.rows {
            let mut cells: Vec<String> = row.flags.iter().map(|f| u8::from(*f).to_string()).collect();
            for c in &row.cells {
                match c.mean_std {
                    Some((m, s)) => {
                        cells.push(format!("{m:.6}"));
                        cells.push(format!("{s:.6}"));
                    }
                    None => cells.extend(["NA".to_string(), "NA".to_string()]),
                }
            }
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }
}

/// Trains every (variant, split, seed) cell, in parallel across cells.
/// Holdouts depend only on (split, seed), so rows are compared on identical
/// splits. Failed cells are recorded and the table is still produced.
pub fn run_grid(
    data: &Dataset,
    eval: &EvalConfig,
    splits: &[SplitMode],
    title: &str,
    flag_names: &[&str],
    variants: &[(Vec<bool>, TrainConfig)],
) -> Result<Table> {
    if variants.is_empty() || splits.is_empty() || eval.seeds.is_empty() {
        return Err(Error::Config("ablation grid, splits and seeds must be nonempty".into()));
    }
    let jobs: Vec<(usize, usize, u64)> = (0..variants.len())
        .flat_map(|v| (0..splits.len()).flat_map(move |s| eval.seeds.iter().map(move |&seed| (v, s, seed))))
        .collect();
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(v, s, seed)| {
            let holdout = choose_holdout(data, splits[s], eval, seed)?;
            let cfg = TrainConfig {
                seed,
                ..variants[v].1.clone()
            };
            let (_, report) = run_once(data, splits[s], &holdout, &cfg)?;
            report
                .mean_auc
                .ok_or_else(|| Error::Split("no KQI has a defined AUC on the eval side".into()))
        })
        .collect();

    let mut rows: Vec<Row> = variants
        .iter()
        .map(|(flags, _)| Row {
            flags: flags.clone(),
            cells: vec![
                Cell {
                    values: Vec::new(),
                    mean_std: None,
                    errors: Vec::new(),
                };
                splits.len()
            ],
        })
        .collect();
    for (&(v, s, seed), result) in jobs.iter().zip(results) {
        let cell = &mut rows[v].cells[s];
        match result {
            Ok(a) => cell.values.push(a),
            Err(e) => {
                log::warn!("ablation cell failed (row {v}, {}, seed {seed}): {e}", splits[s].label());
                cell.errors.push(format!("seed {seed}: {e}"));
            }
        }
    }
    for row in &mut rows {
        for cell in &mut row.cells {
            cell.mean_std = mean_std(&cell.values);
        }
    }
    Ok(Table {
        title: title.to_string(),
        flag_names: flag_names.iter().map(|s| s.to_string()).collect(),
        splits: splits.to_vec(),
        rows,
    })
}

pub fn ablate_losses(
    data: &Dataset,
    base: &TrainConfig,
    eval: &EvalConfig,
    grid: &[LossFlags],
    splits: &[SplitMode],
) -> Result<Table> {
    let variants: Vec<(Vec<bool>, TrainConfig)> = grid
        .iter()
        .map(|f| {
            (
                vec![f.measurement, f.proximity, f.distinction],
                TrainConfig {
                    loss: f.apply(&base.loss),
                    ..base.clone()
                },
            )
        })
        .collect();
    run_grid(data, eval, splits, "Average AUC of loss combinations", &["l1", "l2", "l3"], &variants)
}

/// Prototypes off means a single prototype; stage modules off means one
/// module shared by every stage type.
pub fn component_variants(base: &TrainConfig) -> Vec<(Vec<bool>, TrainConfig)> {
    [(true, true), (true, false), (false, true), (false, false)]
        .into_iter()
        .map(|(protos, modules)| {
            let mut cfg = base.clone();
            if !protos {
                cfg.modular.prototypes = 1;
            }
            cfg.modular.shared_stage_module = !modules;
            (vec![protos, modules], cfg)
        })
        .collect()
}

pub fn ablate_components(data: &Dataset, base: &TrainConfig, eval: &EvalConfig, splits: &[SplitMode]) -> Result<Table> {
    run_grid(
        data,
        eval,
        splits,
        "Average AUC of model components",
        &["Prototypes", "Stage Modules"],
        &component_variants(base),
    )
}
