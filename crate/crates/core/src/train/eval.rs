use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{pearson, rmse};
use crate::data::{batch_order, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{M2ort, ModelConfig};

pub const REPORT_FILE: &str = "report.json";
pub const PER_SPOT_FILE: &str = "per_spot.csv";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const TARGETS_FILE: &str = "targets.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub spot_count: usize,
    pub mean_pcc: f64,
    pub mean_rmse: f64,
    /// Spots whose prediction or target had zero variance (PCC taken as 0).
    pub degenerate_spots: usize,
    pub config_digest: String,
    pub spot_ids: Vec<String>,
    pub pcc: Vec<f64>,
    pub rmse: Vec<f64>,
}

pub fn config_digest(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    crate::data::sha256_hex(&json)
}

/// Per-spot metrics over the gene panel, averaged over spots in order.
pub fn score(
    split: Split,
    config: &ModelConfig,
    spot_ids: &[String],
    predictions: &[Vec<f32>],
    targets: &[Vec<f32>],
) -> Result<EvalReport> {
    if spot_ids.is_empty() {
        return Err(Error::InvalidInput(format!("split {split} has no spots")));
    }
    let mut report = EvalReport {
        split,
        spot_count: spot_ids.len(),
        mean_pcc: 0.0,
        mean_rmse: 0.0,
        degenerate_spots: 0,
        config_digest: config_digest(config),
        spot_ids: spot_ids.to_vec(),
        pcc: Vec::with_capacity(spot_ids.len()),
        rmse: Vec::with_capacity(spot_ids.len()),
    };
    for (p, t) in predictions.iter().zip(targets) {
        let p: Vec<f64> = p.iter().map(|&v| v as f64).collect();
        let t: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let r = pearson(&t, &p)?;
        report.degenerate_spots += r.degenerate as usize;
        report.pcc.push(r.value);
        report.rmse.push(rmse(&t, &p)?);
    }
    let n = report.spot_count as f64;
    report.mean_pcc = report.pcc.iter().sum::<f64>() / n;
    report.mean_rmse = report.rmse.iter().sum::<f64>() / n;
    Ok(report)
}

/// Eval-mode predictions for every spot, in dataset order.
pub fn predict_dataset(model: &M2ort<f32>, data: &Dataset, batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let k = model.config().genes;
    let mut out = Vec::with_capacity(data.len());
    for indices in batch_order(data.len(), batch_size, None) {
        let (batch, _) = data.batch(&indices, model.config())?;
        let pred = model.predict(&batch)?;
        out.extend(pred.data().chunks(k).map(<[f32]>::to_vec));
    }
    Ok(out)
}

pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<Vec<f32>>,
}

pub fn evaluate(model: &M2ort<f32>, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if model.config().genes != data.genes.len() {
        return Err(Error::InvalidConfig(format!(
            "model predicts {} genes but the panel has {}",
            model.config().genes,
            data.genes.len()
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidInput(format!("split {} has no spots", data.split)));
    }
    let predictions = predict_dataset(model, data, batch_size)?;
    let report = score(data.split, model.config(), &data.spot_ids, &predictions, &data.targets)?;
    Ok(Evaluation {
        report,
        predictions,
    })
}

fn matrix_tsv(genes: &[String], spot_ids: &[String], rows: &[Vec<f32>]) -> String {
    let mut s = String::from("spot_id");
    for g in genes {
        s.push('\t');
        s.push_str(g);
    }
    s.push('\n');
    for (id, row) in spot_ids.iter().zip(rows) {
        s.push_str(id);
        for v in row {
            write!(s, "\t{v}").expect("string write");
        }
        s.push('\n');
    }
    s
}

/// Writes `report.json`, `per_spot.csv` and the prediction and target
/// matrices the metrics were computed from.
pub fn write_evaluation(dir: &Path, eval: &Evaluation, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    };
    let r = &eval.report;
    let mut json = serde_json::to_string_pretty(r).map_err(|e| Error::json(dir.join(REPORT_FILE), e))?;
    json.push('\n');
    write(REPORT_FILE, json)?;
    let mut csv = String::from("spot_id,pcc,rmse\n");
    for ((id, p), e) in r.spot_ids.iter().zip(&r.pcc).zip(&r.rmse) {
        writeln!(csv, "{id},{p},{e}").expect("string write");
    }
    write(PER_SPOT_FILE, csv)?;
    write(PREDICTIONS_FILE, matrix_tsv(&data.genes, &data.spot_ids, &eval.predictions))?;
    write(TARGETS_FILE, matrix_tsv(&data.genes, &data.spot_ids, &data.targets))
}

/// A spots × genes matrix as written by [`write_evaluation`].
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub genes: Vec<String>,
    pub spot_ids: Vec<String>,
    pub rows: Vec<Vec<f32>>,
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    let mut cols = header.split('\t');
    if cols.next() != Some("spot_id") {
        return Err(Error::format(path, "first column must be spot_id"));
    }
    let genes: Vec<String> = cols.map(str::to_string).collect();
    let mut spot_ids = Vec::new();
    let mut rows = Vec::new();
    for line in lines {
        let mut f = line.split('\t');
        spot_ids.push(f.next().unwrap_or_default().to_string());
        let row = f
            .map(|s| s.parse::<f32>().map_err(|_| Error::format(path, format!("bad value {s:?}"))))
            .collect::<Result<Vec<f32>>>()?;
        if row.len() != genes.len() {
            return Err(Error::format(path, format!("row {} has {} values", spot_ids.len(), row.len())));
        }
        rows.push(row);
    }
    Ok(Matrix {
        genes,
        spot_ids,
        rows,
    })
}
