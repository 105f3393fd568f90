use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::sequences::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputeConfig {
    pub k: usize,
    /// A sensor is systematically missing for a tool when absent from at
    /// least this fraction of the tool's stage records.
    pub systematic_threshold: f64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self {
            k: 5,
            systematic_threshold: 0.95,
        }
    }
}

/// Result of [`knn_impute`]: every cell of a kept column is `Some`; columns
/// observed nowhere stay `None` and are listed in `dropped`.
#[derive(Clone, Debug, PartialEq)]
pub struct Imputed {
    pub rows: Vec<Vec<Option<f64>>>,
    pub dropped: Vec<usize>,
}

fn column_stats(rows: &[Vec<Option<f64>>], col: usize) -> Option<(f64, f64)> {
    let vals: Vec<f64> = rows.iter().filter_map(|r| r[col]).collect();
    if vals.is_empty() {
        return None;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Some((mean, if std > 1e-12 { std } else { 1.0 }))
}

/// Fills absent cells with the mean raw value of the `k` nearest rows that
/// observe the column.
///
/// Distances use per-column z-scores over observed values, restricted to
/// coordinates observed in both rows and scaled by `sqrt(D / |shared|)`,
/// where `D` counts the kept columns. Rows sharing no coordinate are never
/// neighbors. Ties break by ascending row index. With no eligible neighbor
/// the column mean is used.
pub fn knn_impute(rows: &[Vec<Option<f64>>], k: usize) -> Result<Imputed> {
    if k < 1 {
        return Err(Error::Contract("knn_impute needs k >= 1".into()));
    }
    let Some(width) = rows.first().map(Vec::len) else {
        return Ok(Imputed {
            rows: Vec::new(),
            dropped: Vec::new(),
        });
    };
    if let Some(bad) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::dim("knn_impute", &[bad.len()], &[width]));
    }
    let stats: Vec<Option<(f64, f64)>> = (0..width).map(|c| column_stats(rows, c)).collect();
    let dropped: Vec<usize> = (0..width).filter(|&c| stats[c].is_none()).collect();
    for &c in &dropped {
        log::warn!("imputation: column {c} is never observed; dropping it");
    }
    let kept = (width - dropped.len()) as f64;
    let z: Vec<Vec<Option<f64>>> = rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&stats)
                .map(|(v, s)| match (v, s) {
                    (Some(v), Some((m, sd))) => Some((v - m) / sd),
                    _ => None,
                })
                .collect()
        })
        .collect();

    let distance = |a: usize, b: usize| -> Option<f64> {
        let mut sum = 0.0;
        let mut shared = 0usize;
        for (x, y) in z[a].iter().zip(&z[b]) {
            if let (Some(x), Some(y)) = (x, y) {
                sum += (x - y) * (x - y);
                shared += 1;
            }
        }
        (shared > 0).then(|| sum.sqrt() * (kept / shared as f64).sqrt())
    };

    let mut out = rows.to_vec();
    for (i, row) in rows.iter().enumerate() {
        let missing: Vec<usize> = (0..width).filter(|&c| row[c].is_none() && stats[c].is_some()).collect();
        if missing.is_empty() {
            continue;
        }
        let mut ranked: Vec<(f64, usize)> = (0..rows.len())
            .filter(|&j| j != i)
            .filter_map(|j| distance(i, j).map(|d| (d, j)))
            .collect();
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        for c in missing {
            let neighbors: Vec<f64> = ranked.iter().filter_map(|&(_, j)| rows[j][c]).take(k).collect();
            out[i][c] = Some(if neighbors.is_empty() {
                stats[c].map(|(m, _)| m).unwrap_or(0.0)
            } else {
                neighbors.iter().sum::<f64>() / neighbors.len() as f64
            });
        }
    }
    Ok(Imputed { rows: out, dropped })
}

/// (tool, sensor column) pairs whose sensor is absent from at least
/// `threshold` of the tool's stage records.
pub fn systematic_missing(data: &Dataset, threshold: f64) -> BTreeSet<(String, usize)> {
    let d = data.sensors();
    let mut counts: BTreeMap<&str, (usize, Vec<usize>)> = BTreeMap::new();
    for r in data.sequences.iter().flat_map(|s| &s.stages) {
        let entry = counts.entry(&r.tool).or_insert_with(|| (0, vec![0; d]));
        entry.0 += 1;
        for (c, p) in r.sensor_presence.iter().enumerate() {
            if *p == 0 {
                entry.1[c] += 1;
            }
        }
    }
    let mut out = BTreeSet::new();
    for (tool, (n, absent)) in counts {
        for (c, a) in absent.iter().enumerate() {
            if *a as f64 >= threshold * n as f64 {
                out.insert((tool.to_string(), c));
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImputeReport {
    /// (tool, sensor name) pairs left at presence 0.
    pub systematic: Vec<(String, String)>,
    pub imputed_cells: usize,
    /// (stage type, sensor name) columns never observed within a stage type.
    pub dropped: Vec<(String, String)>,
}

/// Fills environmental gaps per stage type by KNN and marks them present;
/// systematic gaps keep presence 0 and value 0.
pub fn impute_dataset(data: &mut Dataset, cfg: &ImputeConfig) -> Result<ImputeReport> {
    if !(0.0..=1.0).contains(&cfg.systematic_threshold) {
        return Err(Error::Config("systematic_threshold must lie in [0, 1]".into()));
    }
    let systematic = systematic_missing(data, cfg.systematic_threshold);
    let mut report = ImputeReport {
        systematic: systematic
            .iter()
            .map(|(t, c)| (t.clone(), data.vocabulary.sensors[*c].clone()))
            .collect(),
        ..Default::default()
    };
    let mut by_type: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (si, s) in data.sequences.iter().enumerate() {
        for (ri, r) in s.stages.iter().enumerate() {
            by_type.entry(r.stage_type_id).or_default().push((si, ri));
        }
    }
    for (stage_type, cells) in by_type {
        let rows: Vec<Vec<Option<f64>>> = cells
            .iter()
            .map(|&(si, ri)| {
                let r = &data.sequences[si].stages[ri];
                r.sensors
                    .iter()
                    .zip(&r.sensor_presence)
                    .map(|(v, p)| (*p == 1).then_some(*v))
                    .collect()
            })
            .collect();
        let imputed = knn_impute(&rows, cfg.k)?;
        for c in &imputed.dropped {
            report.dropped.push((
                data.vocabulary.stage_types[stage_type].clone(),
                data.vocabulary.sensors[*c].clone(),
            ));
        }
        for (&(si, ri), filled) in cells.iter().zip(&imputed.rows) {
            let r = &mut data.sequences[si].stages[ri];
            for (c, v) in filled.iter().enumerate() {
                if r.sensor_presence[c] == 1 || systematic.contains(&(r.tool.clone(), c)) {
                    continue;
                }
                if let Some(v) = v {
                    r.sensors[c] = *v;
                    r.sensor_presence[c] = 1;
                    report.imputed_cells += 1;
                }
            }
        }
    }
    Ok(report)
}
