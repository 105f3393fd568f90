use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::records::{StageRecord, Vocabulary, WaferSequence, WindowedSample};
use super::transactions::{SchemaConfig, Transaction};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Sequences plus the vocabulary that gives their ids meaning.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub sequences: Vec<WaferSequence>,
}

impl Dataset {
    pub fn sensors(&self) -> usize {
        self.vocabulary.sensors.len()
    }

    pub fn kqis(&self) -> usize {
        self.vocabulary.kqis.len()
    }

    /// Stage type ids occurring in any sequence, ascending.
    pub fn stage_types_used(&self) -> Vec<usize> {
        stage_types_of(&self.sequences)
    }

    pub fn with_sequences(&self, sequences: Vec<WaferSequence>) -> Self {
        Self {
            vocabulary: self.vocabulary.clone(),
            sequences,
        }
    }
}

pub fn stage_types_of(sequences: &[WaferSequence]) -> Vec<usize> {
    let set: BTreeSet<usize> = sequences
        .iter()
        .flat_map(|s| s.stages.iter().map(|r| r.stage_type_id))
        .collect();
    set.into_iter().collect()
}

impl Vocabulary {
    /// Sorted, deduplicated names seen in `rows`; sensor and KQI names come from the schema.
    pub fn from_transactions(rows: &[Transaction], schema: &SchemaConfig) -> Self {
        let stage_types: BTreeSet<&str> = rows.iter().map(|t| t.stage_type.as_str()).collect();
        let mod_types: BTreeSet<&str> = rows.iter().map(|t| t.mod_label.as_str()).collect();
        Self {
            stage_types: stage_types.into_iter().map(String::from).collect(),
            mod_types: mod_types.into_iter().map(String::from).collect(),
            sensors: schema.sensors.clone(),
            kqis: schema.measurements.clone(),
        }
    }
}

/// Groups rows per wafer, merges rows of the same (process, step, stage) and
/// orders stages by their earliest timestamp.
///
/// Sensor slots keep the last observed value; a measurement observed twice with
/// different values keeps the later one and logs a warning. Absent cells get
/// presence/mask 0. Wafers are emitted in ascending `wafer_id` order.
pub fn build_sequences(rows: &[Transaction], vocabulary: &Vocabulary) -> Result<Vec<WaferSequence>> {
    let mut by_wafer: BTreeMap<&str, Vec<&Transaction>> = BTreeMap::new();
    for t in rows {
        by_wafer.entry(&t.wafer_id).or_default().push(t);
    }
    let d = vocabulary.sensors.len();
    let k = vocabulary.kqis.len();

    let mut out = Vec::with_capacity(by_wafer.len());
    for (wafer_id, mut group) in by_wafer {
        // Stable sort keeps file order for equal timestamps.
        group.sort_by_key(|t| t.timestamp);
        let first = group[0];
        let mut stage_index: HashMap<(&str, &str, &str), usize> = HashMap::new();
        let mut stages: Vec<StageRecord> = Vec::new();
        for t in group {
            if t.sensors.len() != d || t.measurements.len() != k {
                return Err(Error::dim("build_sequences", &[t.sensors.len(), t.measurements.len()], &[d, k]));
            }
            if t.product_type != first.product_type || t.product_group != first.product_group {
                log::warn!("wafer {wafer_id}: product fields change between rows; keeping the earliest");
            }
            let key = (t.process.as_str(), t.step.as_str(), t.stage_type.as_str());
            let idx = *stage_index.entry(key).or_insert_with(|| {
                stages.push(StageRecord {
                    process: t.process.clone(),
                    step: t.step.clone(),
                    stage_type: t.stage_type.clone(),
                    stage_type_id: 0,
                    mod_sequence: Vec::new(),
                    tool: t.tool.clone(),
                    recipe: t.recipe.clone(),
                    timestamp: t.timestamp,
                    sensors: vec![0.0; d],
                    sensor_presence: vec![0; d],
                    labels: vec![0; k],
                    label_mask: vec![0; k],
                });
                stages.len() - 1
            });
            let stage = &mut stages[idx];
            stage.stage_type_id = vocabulary
                .stage_type_id(&t.stage_type)
                .ok_or_else(|| Error::Encoding(format!("stage type `{}` not in vocabulary", t.stage_type)))?;
            stage.mod_sequence.push(
                vocabulary
                    .mod_id(&t.mod_label)
                    .ok_or_else(|| Error::Encoding(format!("mod `{}` not in vocabulary", t.mod_label)))?,
            );
            for (i, v) in t.sensors.iter().enumerate() {
                if let Some(v) = v {
                    stage.sensors[i] = *v;
                    stage.sensor_presence[i] = 1;
                }
            }
            for (i, m) in t.measurements.iter().enumerate() {
                if let Some(m) = m {
                    if stage.label_mask[i] == 1 && stage.labels[i] != *m {
                        log::warn!(
                            "wafer {wafer_id}, stage {}/{}: conflicting `{}` measurements, keeping the later one",
                            stage.process,
                            stage.step,
                            vocabulary.kqis[i]
                        );
                    }
                    stage.labels[i] = *m;
                    stage.label_mask[i] = 1;
                }
            }
        }
        // Rows were visited in time order, so creation order is earliest-timestamp order.
        out.push(WaferSequence {
            wafer_id: wafer_id.to_string(),
            product_type: first.product_type.clone(),
            product_group: first.product_group.clone(),
            stages,
        });
    }
    Ok(out)
}

/// All length-`w` windows of `seq` with stride 1.
pub fn make_windows(seq: &WaferSequence, w: usize) -> Result<Vec<WindowedSample>> {
    if w < 1 {
        return Err(Error::Contract("window size must be at least 1".into()));
    }
    Ok(seq
        .stages
        .windows(w)
        .enumerate()
        .map(|(start, stages)| WindowedSample {
            wafer_id: seq.wafer_id.clone(),
            product_type: seq.product_type.clone(),
            product_group: seq.product_group.clone(),
            start,
            stages: stages.to_vec(),
        })
        .collect())
}

pub fn windows_of(sequences: &[WaferSequence], w: usize) -> Result<Vec<WindowedSample>> {
    let mut out = Vec::new();
    for s in sequences {
        out.extend(make_windows(s, w)?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    vocabulary: Vocabulary,
}

/// Line-delimited JSON: a header line with the format version and
/// vocabulary, then one sequence per line.
pub fn write_sequences<W: Write>(mut out: W, data: &Dataset) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        vocabulary: data.vocabulary.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for s in &data.sequences {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sequences<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("empty sequence file".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported sequence format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let mut sequences = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: WaferSequence =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))?;
        sequences.push(seq);
    }
    Ok(Dataset {
        vocabulary: header.vocabulary,
        sequences,
    })
}

/// Per-sensor standardization statistics over present cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    pub fn fit(sequences: &[WaferSequence], sensors: usize) -> Self {
        let mut sum = vec![0.0; sensors];
        let mut sq = vec![0.0; sensors];
        let mut n = vec![0usize; sensors];
        for r in sequences.iter().flat_map(|s| &s.stages) {
            for i in 0..sensors {
                if r.sensor_presence[i] == 1 {
                    sum[i] += r.sensors[i];
                    sq[i] += r.sensors[i] * r.sensors[i];
                    n[i] += 1;
                }
            }
        }
        let mut mean = vec![0.0; sensors];
        let mut std = vec![1.0; sensors];
        for i in 0..sensors {
            if n[i] > 0 {
                let m = sum[i] / n[i] as f64;
                let var = (sq[i] / n[i] as f64 - m * m).max(0.0);
                mean[i] = m;
                if var.sqrt() > 1e-12 {
                    std[i] = var.sqrt();
                }
            }
        }
        Self { mean, std }
    }

    /// Standardizes present cells; absent cells stay 0.
    pub fn apply(&self, sequences: &mut [WaferSequence]) {
        for r in sequences.iter_mut().flat_map(|s| s.stages.iter_mut()) {
            for i in 0..self.mean.len() {
                r.sensors[i] = if r.sensor_presence[i] == 1 {
                    (r.sensors[i] - self.mean[i]) / self.std[i]
                } else {
                    0.0
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tx(wafer: &str, ts: i64, process: &str, stage: &str, m: &str, s: Vec<Option<f64>>, y: Vec<Option<u8>>) -> Transaction {
        Transaction {
            wafer_id: wafer.into(),
            timestamp: ts,
            process: process.into(),
            step: "S1".into(),
            stage_type: stage.into(),
            mod_label: m.into(),
            recipe: "R".into(),
            tool: "T".into(),
            product_type: "PROD01".into(),
            product_group: "G1".into(),
            sensors: s,
            measurements: y,
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary {
            stage_types: vec!["DEP".into(), "ETCH".into()],
            mod_types: vec!["MOD01".into(), "MOD02".into(), "MOD04".into()],
            sensors: vec!["a".into(), "b".into()],
            kqis: vec!["y".into()],
        }
    }

    #[test]
    fn single_transaction() {
        let rows = [tx("W", 5, "P", "ETCH", "MOD01", vec![Some(1.0), None], vec![None])];
        let seqs = build_sequences(&rows, &vocab()).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].stages.len(), 1);
        assert_eq!(seqs[0].stages[0].mod_sequence, vec![0]);
        assert_eq!(seqs[0].stages[0].sensor_presence, vec![1, 0]);
        assert_eq!(seqs[0].stages[0].label_mask, vec![0]);
    }

    #[test]
    fn repeated_mods_merge_in_time_order() {
        let rows = [
            tx("W", 2, "P", "ETCH", "MOD04", vec![None, Some(3.0)], vec![None]),
            tx("W", 1, "P", "ETCH", "MOD02", vec![Some(1.0), Some(2.0)], vec![None]),
        ];
        let seqs = build_sequences(&rows, &vocab()).unwrap();
        let s = &seqs[0].stages[0];
        assert_eq!(s.mod_sequence, vec![1, 2]);
        assert_eq!(s.sensors, vec![1.0, 3.0]);
        assert_eq!(s.timestamp, 1);
    }

    #[test]
    fn two_wafer_fixture_matches_golden() {
        let rows = [
            tx("W2", 30, "P2", "DEP", "MOD01", vec![Some(5.0), None], vec![Some(1)]),
            tx("W1", 20, "P2", "DEP", "MOD01", vec![Some(7.0), Some(8.0)], vec![None]),
            tx("W1", 10, "P1", "ETCH", "MOD02", vec![Some(1.0), None], vec![None]),
            tx("W1", 11, "P1", "ETCH", "MOD02", vec![None, Some(2.0)], vec![Some(0)]),
            tx("W1", 21, "P2", "DEP", "MOD04", vec![None, None], vec![Some(1)]),
            tx("W2", 12, "P1", "ETCH", "MOD04", vec![Some(-1.0), Some(-2.0)], vec![Some(0)]),
        ];
        let rec = |process: &str, st: &str, id, mods: Vec<usize>, ts, s: Vec<f64>, p: Vec<u8>, y: u8, m: u8| StageRecord {
            process: process.into(),
            step: "S1".into(),
            stage_type: st.into(),
            stage_type_id: id,
            mod_sequence: mods,
            tool: "T".into(),
            recipe: "R".into(),
            timestamp: ts,
            sensors: s,
            sensor_presence: p,
            labels: vec![y],
            label_mask: vec![m],
        };
        let seq = |w: &str, stages| WaferSequence {
            wafer_id: w.into(),
            product_type: "PROD01".into(),
            product_group: "G1".into(),
            stages,
        };
        let golden = vec![
            seq(
                "W1",
                vec![
                    rec("P1", "ETCH", 1, vec![1, 1], 10, vec![1.0, 2.0], vec![1, 1], 0, 1),
                    rec("P2", "DEP", 0, vec![0, 2], 20, vec![7.0, 8.0], vec![1, 1], 1, 1),
                ],
            ),
            seq(
                "W2",
                vec![
                    rec("P1", "ETCH", 1, vec![2], 12, vec![-1.0, -2.0], vec![1, 1], 0, 1),
                    rec("P2", "DEP", 0, vec![0], 30, vec![5.0, 0.0], vec![1, 0], 1, 1),
                ],
            ),
        ];
        assert_eq!(build_sequences(&rows, &vocab()).unwrap(), golden);
    }

    #[test]
    fn conflicting_measurement_keeps_later() {
        let rows = [
            tx("W", 1, "P", "ETCH", "MOD01", vec![None, None], vec![Some(1)]),
            tx("W", 2, "P", "ETCH", "MOD01", vec![None, None], vec![Some(0)]),
        ];
        let s = &build_sequences(&rows, &vocab()).unwrap()[0].stages[0];
        assert_eq!((s.labels[0], s.label_mask[0]), (0, 1));
    }

    #[test]
    fn unknown_stage_type_is_encoding_error() {
        let rows = [tx("W", 1, "P", "CMP", "MOD01", vec![None, None], vec![None])];
        assert!(matches!(build_sequences(&rows, &vocab()), Err(Error::Encoding(_))));
    }

    fn seq_of_len(t: usize) -> WaferSequence {
        let rows: Vec<Transaction> = (0..t)
            .map(|i| tx("W", i as i64, &format!("P{i}"), "ETCH", "MOD01", vec![None, None], vec![None]))
            .collect();
        build_sequences(&rows, &vocab()).unwrap().pop().unwrap()
    }

    #[test]
    fn window_examples() {
        let s = seq_of_len(5);
        let w = make_windows(&s, 3).unwrap();
        assert_eq!(w.len(), 3);
        for (i, win) in w.iter().enumerate() {
            assert_eq!(win.start, i);
            assert_eq!(win.stages, s.stages[i..i + 3].to_vec());
        }
        assert!(make_windows(&seq_of_len(2), 3).unwrap().is_empty());
        let whole = make_windows(&s, 5).unwrap();
        assert_eq!(whole, vec![WindowedSample::whole(&s)]);
        assert!(matches!(make_windows(&s, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn file_round_trip_and_version_check() {
        let data = Dataset {
            vocabulary: vocab(),
            sequences: vec![seq_of_len(3)],
        };
        let mut buf = Vec::new();
        write_sequences(&mut buf, &data).unwrap();
        assert_eq!(read_sequences(buf.as_slice()).unwrap(), data);
        let text = String::from_utf8(buf).unwrap().replacen("\"format_version\":1", "\"format_version\":9", 1);
        assert!(matches!(read_sequences(text.as_bytes()), Err(Error::Format(_))));
    }

    #[test]
    fn zscore_uses_present_cells_only() {
        let rows = [
            tx("A", 1, "P", "ETCH", "MOD01", vec![Some(1.0), None], vec![None]),
            tx("B", 1, "P", "ETCH", "MOD01", vec![Some(3.0), None], vec![None]),
        ];
        let mut seqs = build_sequences(&rows, &vocab()).unwrap();
        let z = ZScore::fit(&seqs, 2);
        assert_eq!(z.mean, vec![2.0, 0.0]);
        assert_eq!(z.std, vec![1.0, 1.0]);
        z.apply(&mut seqs);
        assert_eq!(seqs[0].stages[0].sensors, vec![-1.0, 0.0]);
        assert_eq!(seqs[1].stages[0].sensors, vec![1.0, 0.0]);
    }
}
