//! CSV and JSON export of analysis results.
//!
//! Every report is written twice: `<name>.csv` (header row, UTF-8, LF line
//! endings) and `<name>.json`, an object with `schema_version`, `kind`,
//! `meta` and `rows`.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::{BenchReport, ParamBreakdown};
use crate::error::{Error, Result};
use crate::probing::{ProbeCell, ProbeReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AerRow {
    pub layer: usize,
    pub aer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub layer: usize,
    pub cum_coverage: f64,
}

/// `scope` is `layer<i>`, `decoder` or `model`; `other` holds embeddings
/// and encoder parameters on the `model` row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub scope: String,
    pub self_attn: usize,
    pub enc_attn: usize,
    pub ffn: usize,
    pub layer_norms: usize,
    pub other: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub preset: String,
    /// `train` (target words/s) or `infer` (sentences/s).
    pub kind: String,
    pub mode: String,
    pub reps: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Serialize)]
struct JsonDoc<'a, T: Serialize> {
    schema_version: u32,
    kind: &'a str,
    meta: serde_json::Value,
    rows: &'a [T],
}

#[derive(Deserialize)]
struct JsonDocOwned<T> {
    schema_version: u32,
    kind: String,
    rows: Vec<T>,
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn parse_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Reads back the rows of a JSON mirror, checking its kind and version.
pub fn read_json_rows<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: JsonDocOwned<T> = serde_json::from_str(&text)?;
    if doc.schema_version != SCHEMA_VERSION || doc.kind != kind {
        return Err(Error::Format(format!(
            "expected {kind} schema {SCHEMA_VERSION}, found {} schema {}",
            doc.kind, doc.schema_version
        )));
    }
    Ok(doc.rows)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<name>.csv` and `<dir>/<name>.json`; returns both paths.
pub fn write_table<T: Serialize>(dir: &Path, name: &str, rows: &[T], meta: serde_json::Value) -> Result<[PathBuf; 2]> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{name}.csv"));
    let json_path = dir.join(format!("{name}.json"));
    write(&csv_path, &csv_string(rows)?)?;
    let doc = JsonDoc {
        schema_version: SCHEMA_VERSION,
        kind: name,
        meta,
        rows,
    };
    let mut json = serde_json::to_string_pretty(&doc)?;
    json.push('\n');
    write(&json_path, &json)?;
    Ok([csv_path, json_path])
}

pub fn param_rows(b: &ParamBreakdown) -> Vec<ParamRow> {
    let mut rows: Vec<ParamRow> = b
        .layers
        .iter()
        .map(|l| ParamRow {
            scope: format!("layer{}", l.layer),
            self_attn: l.self_attn,
            enc_attn: l.enc_attn,
            ffn: l.ffn,
            layer_norms: l.layer_norms,
            other: 0,
            total: l.total,
        })
        .collect();
    rows.push(ParamRow {
        scope: "decoder".into(),
        self_attn: b.self_attn,
        enc_attn: b.enc_attn,
        ffn: b.ffn,
        layer_norms: b.layer_norms,
        other: 0,
        total: b.decoder_total(),
    });
    rows.push(ParamRow {
        scope: "model".into(),
        self_attn: b.self_attn,
        enc_attn: b.enc_attn,
        ffn: b.ffn,
        layer_norms: b.layer_norms,
        other: b.embeddings + b.encoder,
        total: b.total,
    });
    rows
}

pub fn bench_rows(reports: &[BenchReport]) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    for r in reports {
        for (kind, d) in [("train", &r.train_words_per_sec), ("infer", &r.infer_sentences_per_sec)] {
            if let Some(d) = d {
                rows.push(BenchRow {
                    variant: r.variant.to_string(),
                    preset: r.preset.clone(),
                    kind: kind.into(),
                    mode: r.decode_mode.map(|m| m.to_string()).unwrap_or_else(|| "-".into()),
                    reps: r.reps,
                    min: d.min,
                    median: d.median,
                    max: d.max,
                });
            }
        }
    }
    rows
}

/// Any result the tools can export.
#[derive(Clone, Debug)]
pub enum Report {
    Probe(ProbeReport),
    Aer(Vec<f64>),
    Coverage(Vec<f64>),
    Params(ParamBreakdown),
    Bench(Vec<BenchReport>),
}

impl Report {
    pub fn name(&self) -> &'static str {
        match self {
            Report::Probe(_) => "probe",
            Report::Aer(_) => "aer",
            Report::Coverage(_) => "coverage",
            Report::Params(_) => "params",
            Report::Bench(_) => "bench",
        }
    }
}

/// Writes each report as a CSV/JSON pair into `dir`.
pub fn export_report(dir: &Path, reports: &[Report]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for r in reports {
        let name = r.name();
        let paths = match r {
            Report::Probe(p) => write_table(dir, name, &p.cells, serde_json::to_value(&p.budget)?)?,
            Report::Aer(v) => {
                let rows: Vec<AerRow> = v.iter().enumerate().map(|(i, &aer)| AerRow { layer: i + 1, aer }).collect();
                write_table(dir, name, &rows, serde_json::Value::Null)?
            }
            Report::Coverage(v) => {
                let rows: Vec<CoverageRow> = v
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| CoverageRow {
                        layer: i + 1,
                        cum_coverage: c,
                    })
                    .collect();
                write_table(dir, name, &rows, serde_json::Value::Null)?
            }
            Report::Params(b) => write_table(dir, name, &param_rows(b), serde_json::Value::Null)?,
            Report::Bench(rs) => {
                let hw = rs.first().map(|r| r.hardware.clone()).unwrap_or_default();
                let samples: Vec<_> = rs.iter().map(|r| (&r.train_words_per_sec, &r.infer_sentences_per_sec)).collect();
                let meta = serde_json::json!({ "hardware": hw, "samples": samples });
                write_table(dir, name, &bench_rows(rs), meta)?
            }
        };
        out.extend(paths);
    }
    Ok(out)
}

/// Reads a probe CSV written by [`export_report`].
pub fn read_probe_csv(path: &Path) -> Result<Vec<ProbeCell>> {
    read_csv(path)
}
