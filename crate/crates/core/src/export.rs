//! Result export as CSV or JSON lines.

use std::collections::BTreeMap;
use std::io;
use std::str::FromStr;

use serde::Serialize;

use crate::bracket::ConfigId;
use crate::orchestrator::Experiment;
use crate::space::ParamValue;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    JsonLines,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" | "jsonlines" => Ok(Format::JsonLines),
            other => Err(format!("unknown export format {other:?} (expected csv or jsonlines)")),
        }
    }
}

#[derive(Serialize)]
struct CsvRow {
    wall_time: u64,
    config_id: ConfigId,
    rung: usize,
    bracket: usize,
    resource: u64,
    loss: String,
}

#[derive(Serialize)]
struct JsonRow<'a> {
    wall_time: u64,
    config_id: ConfigId,
    rung: usize,
    bracket: usize,
    resource: u64,
    #[serde(with = "crate::serde_f64::loss")]
    loss: f64,
    hyperparameters: &'a BTreeMap<String, ParamValue>,
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes one row per recorded result, in the order results arrived.
pub fn export<W: io::Write>(experiment: &Experiment, format: Format, mut out: W) -> Result<(), ExportError> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for o in experiment.observations() {
                w.serialize(CsvRow {
                    wall_time: o.time,
                    config_id: o.config_id,
                    rung: o.rung,
                    bracket: o.bracket,
                    resource: o.resource,
                    loss: o.loss.to_string(),
                })?;
            }
            w.flush()?;
        }
        Format::JsonLines => {
            let spec = experiment.spec();
            for o in experiment.observations() {
                let config = spec.space.sample_unchecked(spec.seed, o.config_id);
                let row = JsonRow {
                    wall_time: o.time,
                    config_id: o.config_id,
                    rung: o.rung,
                    bracket: o.bracket,
                    resource: o.resource,
                    loss: o.loss,
                    hyperparameters: &config.values,
                };
                serde_json::to_writer(&mut out, &row)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}
