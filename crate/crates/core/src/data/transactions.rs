use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Header names of the fixed metadata and program columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaColumns {
    pub wafer_id: String,
    pub timestamp: String,
    pub process: String,
    pub step: String,
    pub stage_type: String,
    pub mod_label: String,
    pub recipe: String,
    pub tool: String,
    pub product_type: String,
    pub product_group: String,
}

impl Default for MetaColumns {
    fn default() -> Self {
        Self {
            wafer_id: "wafer_id".into(),
            timestamp: "timestamp".into(),
            process: "process".into(),
            step: "step".into(),
            stage_type: "stage".into(),
            mod_label: "mod".into(),
            recipe: "recipe".into(),
            tool: "tool".into(),
            product_type: "product_type".into(),
            product_group: "product_group".into(),
        }
    }
}

impl MetaColumns {
    fn names(&self) -> [&str; 10] {
        [
            &self.wafer_id,
            &self.timestamp,
            &self.process,
            &self.step,
            &self.stage_type,
            &self.mod_label,
            &self.recipe,
            &self.tool,
            &self.product_type,
            &self.product_group,
        ]
    }
}

/// Column roles of a transaction file, usually loaded from TOML.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    #[serde(default)]
    pub meta: MetaColumns,
    pub sensors: Vec<String>,
    pub measurements: Vec<String>,
}

impl SchemaConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let schema: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for name in self.header() {
            if !seen.insert(name) {
                return Err(Error::Config(format!("column `{name}` declared twice")));
            }
        }
        if self.sensors.is_empty() || self.measurements.is_empty() {
            return Err(Error::Config("schema needs at least one sensor and one measurement".into()));
        }
        Ok(())
    }

    /// Canonical header: metadata columns, then sensors, then measurements.
    pub fn header(&self) -> Vec<&str> {
        let mut h: Vec<&str> = self.meta.names().to_vec();
        h.extend(self.sensors.iter().map(String::as_str));
        h.extend(self.measurements.iter().map(String::as_str));
        h
    }
}

/// One raw event row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub wafer_id: String,
    pub timestamp: i64,
    pub process: String,
    pub step: String,
    pub stage_type: String,
    pub mod_label: String,
    pub recipe: String,
    pub tool: String,
    pub product_type: String,
    pub product_group: String,
    pub sensors: Vec<Option<f64>>,
    /// `Some(0)` pass, `Some(1)` fail.
    pub measurements: Vec<Option<u8>>,
}

enum Slot {
    Meta(usize),
    Sensor(usize),
    Measurement(usize),
}

fn parse_measurement(cell: &str) -> Option<u8> {
    match cell.to_ascii_lowercase().as_str() {
        "0" | "pass" => Some(0),
        "1" | "fail" => Some(1),
        _ => None,
    }
}

pub fn parse_transactions<R: Read>(input: R, schema: &SchemaConfig) -> Result<Vec<Transaction>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header = reader.headers()?.clone();

    let mut lookup: HashMap<&str, Slot> = HashMap::new();
    for (i, name) in schema.meta.names().iter().enumerate() {
        lookup.insert(name, Slot::Meta(i));
    }
    for (i, name) in schema.sensors.iter().enumerate() {
        lookup.insert(name, Slot::Sensor(i));
    }
    for (i, name) in schema.measurements.iter().enumerate() {
        lookup.insert(name, Slot::Measurement(i));
    }
    let mut slots = Vec::with_capacity(header.len());
    for name in header.iter() {
        match lookup.remove(name) {
            Some(slot) => slots.push(slot),
            None => return Err(Error::Schema(format!("unknown column `{name}`"))),
        }
    }
    if let Some(missing) = schema.header().into_iter().find(|n| lookup.contains_key(n)) {
        return Err(Error::Schema(format!("declared column `{missing}` missing from header")));
    }

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row_err = |message: String| Error::Row { line, message };
        let mut meta: [String; 10] = Default::default();
        let mut sensors = vec![None; schema.sensors.len()];
        let mut measurements = vec![None; schema.measurements.len()];
        for (cell, slot) in record.iter().zip(&slots) {
            match *slot {
                Slot::Meta(i) => meta[i] = cell.to_string(),
                Slot::Sensor(i) if !cell.is_empty() => {
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| row_err(format!("sensor `{}`: cannot parse `{cell}`", schema.sensors[i])))?;
                    if !v.is_finite() {
                        return Err(row_err(format!("sensor `{}` is not finite", schema.sensors[i])));
                    }
                    sensors[i] = Some(v);
                }
                Slot::Measurement(i) if !cell.is_empty() => {
                    measurements[i] = Some(parse_measurement(cell).ok_or_else(|| {
                        row_err(format!("measurement `{}`: expected 0/1/pass/fail, got `{cell}`", schema.measurements[i]))
                    })?);
                }
                _ => {}
            }
        }
        let [wafer_id, timestamp, process, step, stage_type, mod_label, recipe, tool, product_type, product_group] = meta;
        if wafer_id.is_empty() {
            return Err(row_err("empty wafer id".into()));
        }
        if mod_label.is_empty() {
            return Err(row_err("empty mod label".into()));
        }
        let timestamp = timestamp
            .parse()
            .map_err(|_| row_err(format!("timestamp: cannot parse `{timestamp}`")))?;
        out.push(Transaction {
            wafer_id,
            timestamp,
            process,
            step,
            stage_type,
            mod_label,
            recipe,
            tool,
            product_type,
            product_group,
            sensors,
            measurements,
        });
    }
    Ok(out)
}

/// Writes rows in the canonical header order. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_transactions<W: Write>(output: W, schema: &SchemaConfig, rows: &[Transaction]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(output);
    writer.write_record(schema.header())?;
    for t in rows {
        if t.sensors.len() != schema.sensors.len() || t.measurements.len() != schema.measurements.len() {
            return Err(Error::dim(
                "write_transactions",
                &[t.sensors.len(), t.measurements.len()],
                &[schema.sensors.len(), schema.measurements.len()],
            ));
        }
        let mut cells = vec![
            t.wafer_id.clone(),
            t.timestamp.to_string(),
            t.process.clone(),
            t.step.clone(),
            t.stage_type.clone(),
            t.mod_label.clone(),
            t.recipe.clone(),
            t.tool.clone(),
            t.product_type.clone(),
            t.product_group.clone(),
        ];
        cells.extend(t.sensors.iter().map(|s| s.map(|v| v.to_string()).unwrap_or_default()));
        cells.extend(t.measurements.iter().map(|m| m.map(|v| v.to_string()).unwrap_or_default()));
        writer.write_record(&cells)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn schema() -> SchemaConfig {
        SchemaConfig {
            meta: MetaColumns::default(),
            sensors: vec!["Temperature".into(), "Duration".into(), "Angle".into()],
            measurements: vec!["Thickness".into(), "Resistance".into()],
        }
    }

    const HEADER: &str =
        "wafer_id,timestamp,process,step,stage,mod,recipe,tool,product_type,product_group,Temperature,Duration,Angle,Thickness,Resistance\n";

    #[test]
    fn header_only_is_empty() {
        assert!(parse_transactions(HEADER.as_bytes(), &schema()).unwrap().is_empty());
    }

    #[test]
    fn fixture_matches_golden() {
        let text = format!(
            "{HEADER}W1,1000,P01,S1,ETCH,MOD02,R1,T1,PROD01,G1,350.5,,12,pass,\n\
             W1,1001,P01,S1,ETCH,MOD04,R1,T1,PROD01,G1,,60,,,fail\n\
             W2,900,P02,S1,DEP,MOD01,R2,T2,PROD02,G1,-1e-3,61.25,0,1,0\n"
        );
        let rows = parse_transactions(text.as_bytes(), &schema()).unwrap();
        let golden = vec![
            Transaction {
                wafer_id: "W1".into(),
                timestamp: 1000,
                process: "P01".into(),
                step: "S1".into(),
                stage_type: "ETCH".into(),
                mod_label: "MOD02".into(),
                recipe: "R1".into(),
                tool: "T1".into(),
                product_type: "PROD01".into(),
                product_group: "G1".into(),
                sensors: vec![Some(350.5), None, Some(12.0)],
                measurements: vec![Some(0), None],
            },
            Transaction {
                wafer_id: "W1".into(),
                timestamp: 1001,
                process: "P01".into(),
                step: "S1".into(),
                stage_type: "ETCH".into(),
                mod_label: "MOD04".into(),
                recipe: "R1".into(),
                tool: "T1".into(),
                product_type: "PROD01".into(),
                product_group: "G1".into(),
                sensors: vec![None, Some(60.0), None],
                measurements: vec![None, Some(1)],
            },
            Transaction {
                wafer_id: "W2".into(),
                timestamp: 900,
                process: "P02".into(),
                step: "S1".into(),
                stage_type: "DEP".into(),
                mod_label: "MOD01".into(),
                recipe: "R2".into(),
                tool: "T2".into(),
                product_type: "PROD02".into(),
                product_group: "G1".into(),
                sensors: vec![Some(-1e-3), Some(61.25), Some(0.0)],
                measurements: vec![Some(1), Some(0)],
            },
        ];
        assert_eq!(rows, golden);

        let mut buf = Vec::new();
        write_transactions(&mut buf, &schema(), &rows).unwrap();
        assert_eq!(parse_transactions(buf.as_slice(), &schema()).unwrap(), golden);
    }

    #[test]
    fn unknown_column_is_named() {
        let text = HEADER.replace("Angle", "Pressure");
        match parse_transactions(text.as_bytes(), &schema()) {
            Err(Error::Schema(msg)) => assert!(msg.contains("Pressure")),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn bad_number_reports_line() {
        let text = format!("{HEADER}W1,1,P,S,E,M,R,T,A,G,1,2,3,,\nW1,2,P,S,E,M,R,T,A,G,1,hot,3,,\n");
        match parse_transactions(text.as_bytes(), &schema()) {
            Err(Error::Row { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("Duration"));
            }
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn schema_toml_round_trip() {
        let s = schema();
        assert_eq!(SchemaConfig::from_toml(&s.to_toml().unwrap()).unwrap(), s);
        assert!(SchemaConfig::from_toml("sensors=[\"a\"]\nmeasurements=[\"b\"]\nextra=1").is_err());
    }
}
