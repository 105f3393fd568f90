use serde::{Deserialize, Serialize};

/// One merged manufacturing stage of one wafer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub process: String,
    pub step: String,
    pub stage_type: String,
    pub stage_type_id: usize,
    /// Mod ids in execution order; repeats allowed.
    pub mod_sequence: Vec<usize>,
    pub tool: String,
    pub recipe: String,
    /// Earliest timestamp among the merged transactions (epoch ms).
    pub timestamp: i64,
    pub sensors: Vec<f64>,
    /// 1 where `sensors` holds a usable reading. Before imputation every absent
    /// cell is 0; afterwards only systematically absent cells remain 0.
    pub sensor_presence: Vec<u8>,
    pub labels: Vec<u8>,
    /// 1 where a measurement exists for the KQI.
    pub label_mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaferSequence {
    pub wafer_id: String,
    pub product_type: String,
    pub product_group: String,
    pub stages: Vec<StageRecord>,
}

/// A fixed-length run of consecutive stages cut from one wafer sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowedSample {
    pub wafer_id: String,
    pub product_type: String,
    pub product_group: String,
    /// Index of the first stage within the parent sequence.
    pub start: usize,
    pub stages: Vec<StageRecord>,
}

impl WindowedSample {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// The whole sequence as one sample.
    pub fn whole(seq: &WaferSequence) -> Self {
        Self {
            wafer_id: seq.wafer_id.clone(),
            product_type: seq.product_type.clone(),
            product_group: seq.product_group.clone(),
            start: 0,
            stages: seq.stages.clone(),
        }
    }
}

/// Name ↔ id tables shared by every sequence in a file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub stage_types: Vec<String>,
    pub mod_types: Vec<String>,
    pub sensors: Vec<String>,
    pub kqis: Vec<String>,
}

impl Vocabulary {
    pub fn stage_type_id(&self, name: &str) -> Option<usize> {
        self.stage_types.iter().position(|s| s == name)
    }

    pub fn mod_id(&self, name: &str) -> Option<usize> {
        self.mod_types.iter().position(|s| s == name)
    }
}
