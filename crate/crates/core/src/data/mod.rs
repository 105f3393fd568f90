//! Wafer sequence records and the ingestion pipeline: parsing transaction
//! rows, merging them into per-wafer stage sequences, imputation, windowing
//! and splitting.

mod impute;
mod records;
mod sequences;
mod split;
mod transactions;

use std::io::Read;

pub use impute::{impute_dataset, knn_impute, systematic_missing, ImputeConfig, ImputeReport, Imputed};
pub use records::{StageRecord, Vocabulary, WaferSequence, WindowedSample};
pub use sequences::{
    build_sequences, make_windows, read_sequences, stage_types_of, windows_of, write_sequences, Dataset, ZScore,
    FORMAT_VERSION,
};
pub use split::{split_dataset, Holdout, SplitMode};
pub use transactions::{parse_transactions, write_transactions, MetaColumns, SchemaConfig, Transaction};

use crate::error::Result;

/// Parse, merge and impute a transaction file in one go.
pub fn ingest<R: Read>(input: R, schema: &SchemaConfig, cfg: &ImputeConfig) -> Result<(Dataset, ImputeReport)> {
    let rows = parse_transactions(input, schema)?;
    let vocabulary = Vocabulary::from_transactions(&rows, schema);
    let sequences = build_sequences(&rows, &vocabulary)?;
    let mut data = Dataset { vocabulary, sequences };
    let report = impute_dataset(&mut data, cfg)?;
    Ok((data, report))
}
