//! Run configuration: one JSON object with flat dotted keys, layered as
//! defaults, then the config file, then command-line flags.
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use m2ort_core::data::{Split, SynthSpec};
use m2ort_core::model::{ModelConfig, Variant};
use m2ort_core::train::{GridName, TrainSpec};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const RESOLVED_FILE: &str = "resolved_config.json";

/// Keys owned by the top-level `seed`.
const SEED_KEYS: [&str; 2] = ["train.seed", "synth.seed"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneSection {
    pub n_top: usize,
    pub n_final: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomEntry {
    pub name: String,
    pub overrides: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub grid: GridName,
    /// Members of the `custom` grid, as model-field overrides.
    pub entries: Vec<CustomEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSection {
    pub dump: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    /// Directory holding `panel.json`; defaults to the corpus root.
    pub panel: Option<PathBuf>,
    /// Size preset; when set it supplies depth, heads and channels.
    pub variant: Option<Variant>,
    pub model: ModelConfig,
    pub train: TrainSpec,
    pub synth: SynthSpec,
    pub genes: GeneSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub render: RenderSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: None,
            panel: None,
            variant: None,
            model: ModelConfig::variant(Variant::Base),
            train: TrainSpec::default(),
            synth: SynthSpec::default(),
            genes: GeneSection {
                n_top: 1000,
                n_final: 250,
            },
            eval: EvalSection {
                split: Split::Test,
                checkpoint: None,
            },
            ablate: AblateSection {
                grid: GridName::Table2,
                entries: Vec::new(),
            },
            render: RenderSection { dump: None },
        }
    }
}

fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

/// Object-valued fields are spliced into dotted keys; everything else,
/// including arrays, is a leaf.
pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten_into("", value, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("split yields one part");
        let mut node = &mut root;
        for p in parts {
            node = node
                .entry(p)
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted keys never collide with leaves");
        }
        node.insert(last.to_string(), v.clone());
    }
    Value::Object(root)
}

fn default_flat() -> BTreeMap<String, Value> {
    let mut flat = flatten(&serde_json::to_value(RunConfig::default()).expect("config serializes"));
    for k in SEED_KEYS {
        flat.remove(k);
    }
    flat
}

/// Values a command line contributes, already in dotted-key form.
pub type Overrides = Vec<(&'static str, Value)>;

/// Resolves defaults, an optional config file and flag overrides into a
/// typed config plus the flat map that reproduces it.
pub fn resolve(file: Option<&Path>, flags: Overrides) -> Result<(RunConfig, BTreeMap<String, Value>), CliError> {
    let mut flat = default_flat();
    let mut dims_given = false;
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let user: Map<String, Value> = serde_json::from_str(&text).map_err(|e| {
            CliError::Validation(format!("config {} is not a JSON object: {e}", path.display()))
        })?;
        for (k, v) in user {
            if !flat.contains_key(&k) {
                return Err(CliError::Validation(format!("unknown config key {k:?}")));
            }
            dims_given |= matches!(k.as_str(), "model.depth" | "model.heads" | "model.channels");
            flat.insert(k, v);
        }
    }
    let from_file_variant = !flat["variant"].is_null();
    for (k, v) in flags {
        debug_assert!(flat.contains_key(k), "flag key {k}");
        flat.insert(k.to_string(), v);
    }
    if dims_given && from_file_variant {
        return Err(CliError::Validation(
            "config sets variant together with explicit model.depth/heads/channels".into(),
        ));
    }

    let mut nested = unflatten(&flat);
    let seed = flat["seed"].clone();
    for section in ["train", "synth"] {
        nested[section]["seed"] = seed.clone();
    }
    let mut config: RunConfig =
        serde_json::from_value(nested).map_err(|e| CliError::Validation(format!("invalid config: {e}")))?;
    if let Some(v) = config.variant.take() {
        let (depth, heads, channels) = v.dims();
        config.model.depth = depth;
        config.model.heads = heads;
        config.model.channels = channels;
    }
    let resolved = resolved_flat(&config);
    Ok((config, resolved))
}

/// Flat form of an already resolved config; the preset is folded into
/// explicit dimensions.
pub fn resolved_flat(config: &RunConfig) -> BTreeMap<String, Value> {
    let mut flat = flatten(&serde_json::to_value(config).expect("config serializes"));
    for k in SEED_KEYS {
        flat.remove(k);
    }
    flat
}

pub fn write_resolved(dir: &Path, flat: &BTreeMap<String, Value>) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let mut text = serde_json::to_string_pretty(flat).expect("json map serializes");
    text.push('\n');
    let path = dir.join(RESOLVED_FILE);
    fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_round_trips() {
        let v = serde_json::to_value(RunConfig::default()).unwrap();
        assert_eq!(unflatten(&flatten(&v)), v);
        let flat = default_flat();
        assert!(flat.contains_key("model.mask_prob"));
        assert!(flat.contains_key("synth.signal.level2_scale"));
        assert!(flat.contains_key("model.levels"));
        assert!(!flat.contains_key("train.seed"));
    }

    #[test]
    fn layering_and_presets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 5, "model.mask_prob": 0.3, "train.epochs": 2}"#).unwrap();
        let (c, flat) = resolve(Some(&path), vec![("model.mask_prob", Value::from(0.2))]).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.seed, 5);
        assert_eq!(c.synth.seed, 5);
        assert_eq!(c.model.mask_prob, 0.2);
        assert_eq!(c.train.epochs, 2);

        let (c, flat2) = resolve(None, vec![("variant", Value::from("large"))]).unwrap();
        assert_eq!((c.model.depth, c.model.heads, c.model.channels), (12, 6, 384));
        assert_eq!(flat2["variant"], Value::Null);
        assert_eq!(flat2["model.channels"], Value::from(384));

        // the resolved map reproduces the config
        let resolved = dir.path().join("r.json");
        fs::write(&resolved, serde_json::to_string(&flat).unwrap()).unwrap();
        let (again, flat3) = resolve(Some(&resolved), Vec::new()).unwrap();
        assert_eq!(flat3, flat);
        assert_eq!(again.model.mask_prob, 0.2);
    }

    #[test]
    fn unknown_and_conflicting_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"model.maskprob": 0.3}"#).unwrap();
        assert!(matches!(resolve(Some(&path), Vec::new()), Err(CliError::Validation(_))));
        fs::write(&path, r#"{"train.seed": 3}"#).unwrap();
        assert!(matches!(resolve(Some(&path), Vec::new()), Err(CliError::Validation(_))));
        fs::write(&path, r#"{"variant": "small", "model.depth": 3}"#).unwrap();
        assert!(matches!(resolve(Some(&path), Vec::new()), Err(CliError::Validation(_))));
        fs::write(&path, r#"{"model.levels": "0,1"}"#).unwrap();
        assert!(matches!(resolve(Some(&path), Vec::new()), Err(CliError::Validation(_))));
    }
}
