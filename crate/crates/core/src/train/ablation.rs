use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::eval::evaluate;
use super::trainer::{train, TrainSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{mac_count, param_count, EncoderMode, ModelConfig, Variant};

pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_HEADER: &str = "name,levels,encoder_mode,m,params,macs,mean_pcc,mean_rmse";

/// Built-in configuration grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridName {
    /// Every non-empty subset of input levels.
    Table2,
    /// Encoder mixing mode crossed with the size presets.
    Table3,
    /// Attention mask probability sweep.
    Table4,
    /// Removal of one encoder block at a time.
    Table8,
    /// Caller-supplied overrides.
    Custom,
}

impl GridName {
    pub const ALL: [GridName; 5] = [
        GridName::Table2,
        GridName::Table3,
        GridName::Table4,
        GridName::Table8,
        GridName::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GridName::Table2 => "table2",
            GridName::Table3 => "table3",
            GridName::Table4 => "table4",
            GridName::Table8 => "table8",
            GridName::Custom => "custom",
        }
    }
}

impl FromStr for GridName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GridName::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown grid {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridEntry {
    pub name: String,
    pub config: ModelConfig,
}

pub const LEVEL_SUBSETS: [&[usize]; 7] = [&[0], &[1], &[2], &[0, 1], &[0, 2], &[1, 2], &[0, 1, 2]];
pub const MASK_SWEEP: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

pub fn levels_label(levels: &[usize]) -> String {
    levels.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
}

/// Expands a built-in grid around `base`. `Custom` yields an empty grid;
/// build those entries with [`apply_overrides`].
pub fn grid(name: GridName, base: &ModelConfig) -> Vec<GridEntry> {
    let entry = |name: String, config: ModelConfig| GridEntry { name, config };
    match name {
        GridName::Table2 => LEVEL_SUBSETS
            .iter()
            .map(|l| {
                let config = ModelConfig {
                    levels: l.to_vec(),
                    ..base.clone()
                };
                entry(format!("levels_{}", levels_label(l)), config)
            })
            .collect(),
        GridName::Table3 => Variant::ALL
            .iter()
            .flat_map(|&v| {
                EncoderMode::ALL.iter().map(move |&mode| {
                    let (depth, heads, channels) = v.dims();
                    let config = ModelConfig {
                        depth,
                        heads,
                        channels,
                        encoder_mode: mode,
                        ..base.clone()
                    };
                    (format!("{}_{}", v.as_str(), mode), config)
                })
            })
            .map(|(n, c)| entry(n, c))
            .collect(),
        GridName::Table4 => MASK_SWEEP
            .iter()
            .map(|&m| {
                let config = ModelConfig {
                    mask_prob: m,
                    ..base.clone()
                };
                entry(format!("m_{m}"), config)
            })
            .collect(),
        GridName::Table8 => vec![
            entry("full".into(), base.clone()),
            entry(
                "no_icmm".into(),
                ModelConfig {
                    disable_icmm: true,
                    ..base.clone()
                },
            ),
            entry(
                "no_itmm".into(),
                ModelConfig {
                    disable_itmm: true,
                    ..base.clone()
                },
            ),
        ],
        GridName::Custom => Vec::new(),
    }
}

/// Overlays a JSON object of config fields onto `base`. Unknown fields are
/// rejected.
pub fn apply_overrides(base: &ModelConfig, overrides: &Map<String, Value>) -> Result<ModelConfig> {
    let mut value = serde_json::to_value(base).expect("config serializes");
    let fields = value.as_object_mut().expect("config is an object");
    for (k, v) in overrides {
        if !fields.contains_key(k) {
            return Err(Error::InvalidConfig(format!("unknown model field {k:?}")));
        }
        fields.insert(k.clone(), v.clone());
    }
    let config: ModelConfig =
        serde_json::from_value(value).map_err(|e| Error::InvalidConfig(format!("bad override: {e}")))?;
    config.validate()?;
    Ok(config)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub levels: Vec<usize>,
    pub encoder_mode: EncoderMode,
    pub mask_prob: f64,
    pub params: u64,
    pub macs: u64,
    pub mean_pcc: f64,
    pub mean_rmse: f64,
}

impl AblationRow {
    /// The row for `entry` with its profile filled in and metrics unset.
    pub fn profiled(entry: &GridEntry) -> Self {
        let c = &entry.config;
        Self {
            name: entry.name.clone(),
            levels: c.levels.clone(),
            encoder_mode: c.encoder_mode,
            mask_prob: c.mask_prob,
            params: param_count(c),
            macs: mac_count(c),
            mean_pcc: f64::NAN,
            mean_rmse: f64::NAN,
        }
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.name,
            levels_label(&r.levels),
            r.encoder_mode,
            r.mask_prob,
            r.params,
            r.macs,
            r.mean_pcc,
            r.mean_rmse
        )
        .expect("string write");
    }
    s
}

/// The splits every grid member trains and is scored on.
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub test: &'a Dataset,
}

/// Trains every entry with the same spec and seed and scores the final
/// checkpoint on the test split. With `out`, the table is rewritten after
/// each member so a failure leaves the finished rows on disk.
pub fn ablation_run(
    entries: &[GridEntry],
    splits: &Splits<'_>,
    spec: &TrainSpec,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if entries.is_empty() {
        return Err(Error::InvalidConfig("ablation grid is empty".into()));
    }
    for e in entries {
        e.config
            .validate()
            .map_err(|err| Error::InvalidConfig(format!("grid entry {}: {err}", e.name)))?;
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let save = |rows: &[AblationRow]| -> Result<()> {
        if let Some(dir) = out {
            let path = dir.join(ABLATION_FILE);
            fs::write(&path, ablation_csv(rows)).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    };
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        log::info!("ablation member {}", e.name);
        let run_dir = out.map(|d| d.join("runs").join(&e.name));
        let result = train(&e.config, splits.train, splits.val, spec, run_dir.as_deref())
            .and_then(|o| evaluate(&o.final_checkpoint.model, splits.test, spec.batch_size));
        match result {
            Ok(eval) => {
                let mut row = AblationRow::profiled(e);
                row.mean_pcc = eval.report.mean_pcc;
                row.mean_rmse = eval.report.mean_rmse;
                rows.push(row);
                save(&rows)?;
            }
            Err(err) => {
                save(&rows)?;
                log::error!("ablation member {} failed after {} finished rows", e.name, rows.len());
                return Err(err);
            }
        }
    }
    Ok(rows)
}
