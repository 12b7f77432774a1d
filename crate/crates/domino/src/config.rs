//! Strict JSON configuration: single-run configs, experiment manifests,
//! presets, and dataset specs. Unknown keys are rejected so a typoed field
//! can never silently fall back to a default.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::synth::synth_split;
use crate::datasets::{resolve_data_path, PairedDataset};
use crate::model::EncoderConfig;
use crate::ndgrad::NdError;
use crate::objectives::{CriticConfig, PairGraph};
use crate::trainer::TrainOpts;

fn default_lr() -> f64 {
    4e-4
}

fn default_max_lr() -> f64 {
    0.01
}

fn default_batch() -> usize {
    64
}

/// Training float width. Checkpoints carry the dtype they were trained in;
/// analysis always runs in f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Scale presets. `small` is the CI/desk scale; `paper` mirrors the 50-epoch
/// runs with the full-width encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Paper,
}

impl Preset {
    pub fn pretrain_epochs(self) -> usize {
        match self {
            Preset::Small => 10,
            Preset::Paper => 50,
        }
    }

    /// The probe trains on cached features, so it keeps the full epoch budget
    /// even at desk scale.
    pub fn eval_epochs(self) -> usize {
        50
    }

    pub fn encoder(self) -> EncoderConfig {
        match self {
            Preset::Small => EncoderConfig { in_channels: 1, base_channels: 16, latent_dim: 64 },
            Preset::Paper => EncoderConfig::default(),
        }
    }

    /// (n_train, n_holdout, num_classes) for procedural data.
    pub fn synth_sizes(self) -> (usize, usize, usize) {
        match self {
            Preset::Small => (2000, 500, 10),
            Preset::Paper => (10000, 2000, 10),
        }
    }
}

/// Where a cell's data comes from. Sizes left unset fall back to the preset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    /// Procedural glyph/grating pairs, generated in memory.
    Synth {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_train: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_holdout: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        num_classes: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
    /// Pre-built paired containers (see `domino gen-data`), resolved against
    /// `DOMINO_DATA_DIR` when relative.
    Paired { train: String, holdout: String },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synth { n_train: None, n_holdout: None, num_classes: None, seed: 0 }
    }
}

impl DatasetSpec {
    pub fn realize(&self, preset: Preset) -> Result<(PairedDataset, PairedDataset), NdError> {
        match self {
            DatasetSpec::Synth { n_train, n_holdout, num_classes, seed } => {
                let (dt, dh, dk) = preset.synth_sizes();
                synth_split(
                    n_train.unwrap_or(dt),
                    n_holdout.unwrap_or(dh),
                    num_classes.unwrap_or(dk),
                    *seed,
                )
            }
            DatasetSpec::Paired { train, holdout } => {
                let t = PairedDataset::load(&resolve_data_path(Path::new(train)))?;
                let h = PairedDataset::load(&resolve_data_path(Path::new(holdout)))?;
                Ok((t, h))
            }
        }
    }
}

/// One training run, as written to `config.json` next to its artifacts.
/// `epochs` overrides the preset's pretraining epochs when set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub edges: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub weights: BTreeMap<String, f64>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_max_lr")]
    pub max_lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
}

/// A [`TrainConfig`] with every default filled in and the edge list parsed.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub graph: PairGraph,
    pub base: EncoderConfig,
    pub critic: CriticConfig,
    pub dataset: DatasetSpec,
    pub pre: TrainOpts,
    pub eval: TrainOpts,
    pub precision: Precision,
    pub preset: Preset,
}

impl TrainConfig {
    pub fn resolve(&self) -> Result<Resolved, NdError> {
        let preset = self.preset.unwrap_or(Preset::Paper);
        let graph = PairGraph::from_strings(&self.edges, &self.weights, 2)?;
        let pre = TrainOpts {
            lr: self.lr,
            max_lr: self.max_lr,
            batch: self.batch,
            epochs: self.epochs.unwrap_or_else(|| preset.pretrain_epochs()),
            seed: self.seed,
        };
        pre.validate()?;
        let eval = TrainOpts { epochs: preset.eval_epochs(), ..pre };
        Ok(Resolved {
            graph,
            base: preset.encoder(),
            critic: CriticConfig::default(),
            dataset: self.dataset.clone(),
            pre,
            eval,
            precision: self.precision,
            preset,
        })
    }
}

/// One manifest cell: an objective graph trained over several seeds. An empty
/// edge list falls back to the built-in graph named by `name`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSpec {
    pub name: String,
    #[serde(default)]
    pub edges: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub weights: BTreeMap<String, f64>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
}

impl CellSpec {
    /// Canonical edge strings, resolving an empty list through the cell name.
    pub fn edge_strings(&self) -> Result<Vec<String>, NdError> {
        let graph = if self.edges.is_empty() {
            PairGraph::named(&self.name)?
        } else {
            PairGraph::from_strings(&self.edges, &self.weights, 2)?
        };
        Ok(graph.edges().iter().map(|we| we.edge.to_string()).collect())
    }
}

/// An experiment sweep: cells x seeds, with shared optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub cells: Vec<CellSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_max_lr")]
    pub max_lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
}

impl Manifest {
    pub fn validate(&self) -> Result<(), NdError> {
        if self.cells.is_empty() {
            return Err(NdError::Invalid("manifest has no cells".into()));
        }
        let mut names = BTreeSet::new();
        for cell in &self.cells {
            if !names.insert(cell.name.as_str()) {
                return Err(NdError::Invalid(format!("duplicate cell name {:?}", cell.name)));
            }
            if cell.seeds.is_empty() {
                return Err(NdError::Invalid(format!("cell {:?} has no seeds", cell.name)));
            }
            cell.edge_strings()?;
            self.run_config(cell, cell.seeds[0])?.resolve()?;
        }
        Ok(())
    }

    /// Expand one (cell, seed) into a full, self-describing run config.
    pub fn run_config(&self, cell: &CellSpec, seed: u64) -> Result<TrainConfig, NdError> {
        Ok(TrainConfig {
            dataset: cell.dataset.clone().unwrap_or_default(),
            edges: cell.edge_strings()?,
            weights: cell.weights.clone(),
            lr: self.lr,
            max_lr: self.max_lr,
            batch: self.batch,
            epochs: self.epochs,
            seed,
            precision: self.precision,
            preset: self.preset,
        })
    }
}

/// What a config file turned out to contain.
#[derive(Debug, Clone)]
pub enum ParsedConfig {
    Train(Box<TrainConfig>),
    Manifest(Box<Manifest>),
}

const TRAIN_KEYS: &[&str] =
    &["dataset", "edges", "weights", "lr", "max_lr", "batch", "epochs", "seed", "precision", "preset"];
const MANIFEST_KEYS: &[&str] =
    &["cells", "out_dir", "lr", "max_lr", "batch", "epochs", "precision", "preset"];
const CELL_KEYS: &[&str] = &["name", "edges", "weights", "seeds", "dataset"];
const SYNTH_KEYS: &[&str] = &["kind", "n_train", "n_holdout", "num_classes", "seed"];
const PAIRED_KEYS: &[&str] = &["kind", "train", "holdout"];

/// Strict mode: every object key must be on the allowlist for its position.
fn check_keys(value: &serde_json::Value, allowed: &[&str], what: &str) -> Result<(), NdError> {
    let Some(map) = value.as_object() else {
        return Err(NdError::Invalid(format!("{what} must be a JSON object")));
    };
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(NdError::Invalid(format!(
                "{what}: unknown key {key:?} (allowed: {})",
                allowed.join(", ")
            )));
        }
    }
    Ok(())
}

fn check_dataset_keys(value: &serde_json::Value, what: &str) -> Result<(), NdError> {
    let allowed = match value.get("kind").and_then(|k| k.as_str()) {
        Some("synth") => SYNTH_KEYS,
        Some("paired") => PAIRED_KEYS,
        Some(other) => {
            return Err(NdError::Invalid(format!("{what}: unknown dataset kind {other:?}")));
        }
        None => return Err(NdError::Invalid(format!("{what}: dataset needs a \"kind\" field"))),
    };
    check_keys(value, allowed, what)
}

fn check_train_keys(value: &serde_json::Value, what: &str) -> Result<(), NdError> {
    check_keys(value, TRAIN_KEYS, what)?;
    if let Some(ds) = value.get("dataset") {
        check_dataset_keys(ds, &format!("{what}.dataset"))?;
    }
    Ok(())
}

fn check_manifest_keys(value: &serde_json::Value, what: &str) -> Result<(), NdError> {
    check_keys(value, MANIFEST_KEYS, what)?;
    if let Some(cells) = value.get("cells").and_then(|c| c.as_array()) {
        for (i, cell) in cells.iter().enumerate() {
            let label = format!("{what}.cells[{i}]");
            check_keys(cell, CELL_KEYS, &label)?;
            if let Some(ds) = cell.get("dataset") {
                check_dataset_keys(ds, &format!("{label}.dataset"))?;
            }
        }
    }
    Ok(())
}

/// Parse a config file, dispatching on the presence of a `cells` key. Errors
/// carry the file path plus serde's line/column position; unknown keys are
/// rejected by name.
pub fn parse_config(path: &Path) -> Result<ParsedConfig, NdError> {
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(NdError::Invalid(format!("{}: empty config file", path.display())));
    }
    let label = path.display().to_string();
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| NdError::Invalid(format!("{label}: {e}")))?;
    let annotate = |e: serde_json::Error| NdError::Invalid(format!("{label}: {e}"));
    if value.get("cells").is_some() {
        check_manifest_keys(&value, &label)?;
        let manifest: Manifest = serde_json::from_value(value).map_err(annotate)?;
        manifest.validate()?;
        Ok(ParsedConfig::Manifest(Box::new(manifest)))
    } else {
        check_train_keys(&value, &label)?;
        let config: TrainConfig = serde_json::from_value(value).map_err(annotate)?;
        config.resolve()?;
        Ok(ParsedConfig::Train(Box::new(config)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::NamedTempFile;

    fn write_config(text: &str) -> NamedTempFile {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_single_edge_config_gets_defaults() {
        let f = write_config(r#"{"edges":["RR:0-1"]}"#);
        let parsed = parse_config(f.path()).unwrap();
        let ParsedConfig::Train(cfg) = parsed else { panic!("expected train config") };
        assert_eq!(cfg.lr, 4e-4);
        assert_eq!(cfg.max_lr, 0.01);
        assert_eq!(cfg.batch, 64);
        assert_eq!(cfg.precision, Precision::F32);
        let resolved = cfg.resolve().unwrap();
        assert_eq!(resolved.pre.epochs, 50);
        assert_eq!(resolved.graph.edges().len(), 1);
    }

    #[test]
    fn unknown_edge_is_named_in_the_error() {
        let f = write_config(r#"{"edges":["QQ:0-1"]}"#);
        let err = parse_config(f.path()).unwrap_err().to_string();
        assert!(err.contains("QQ"), "error was: {err}");
    }

    #[test]
    fn empty_file_rejected() {
        let f = write_config("  \n ");
        assert!(parse_config(f.path()).is_err());
    }

    #[test]
    fn unknown_keys_rejected_with_position() {
        let f = write_config(r#"{"edges":["RR:0-1"], "learning_rate": 0.1}"#);
        let err = parse_config(f.path()).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "error was: {err}");
        let g = write_config("{\"edges\": [\n  broken\n]}");
        let err = parse_config(g.path()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "error was: {err}");
    }

    #[test]
    fn manifest_invariants_enforced() {
        let dup = write_config(
            r#"{"cells":[{"name":"RR","seeds":[0]},{"name":"RR","seeds":[1]}]}"#,
        );
        assert!(parse_config(dup.path()).unwrap_err().to_string().contains("duplicate"));
        let noseed = write_config(r#"{"cells":[{"name":"RR","seeds":[]}]}"#);
        assert!(parse_config(noseed.path()).unwrap_err().to_string().contains("no seeds"));
    }

    #[test]
    fn named_cell_expands_to_canonical_edges() {
        let f = write_config(r#"{"cells":[{"name":"RR-AE","seeds":[0,1]}],"preset":"small"}"#);
        let ParsedConfig::Manifest(m) = parse_config(f.path()).unwrap() else {
            panic!("expected manifest")
        };
        let cfg = m.run_config(&m.cells[0], 1).unwrap();
        assert_eq!(cfg.edges, vec!["RR:0-1", "AE:0", "AE:1"]);
        assert_eq!(cfg.seed, 1);
        let resolved = cfg.resolve().unwrap();
        assert_eq!(resolved.pre.epochs, 10);
        assert_eq!(resolved.eval.epochs, 50);
        assert_eq!(resolved.base.base_channels, 16);
    }

    #[test]
    fn synth_spec_realizes_with_preset_sizes() {
        let spec = DatasetSpec::Synth {
            n_train: Some(30),
            n_holdout: Some(20),
            num_classes: Some(5),
            seed: 3,
        };
        let (train, holdout) = spec.realize(Preset::Small).unwrap();
        assert_eq!(train.len(), 30);
        assert_eq!(holdout.len(), 20);
        assert_eq!(train.num_classes(), 5);
    }

    #[test]
    fn precision_round_trips() {
        let f = write_config(r#"{"edges":["AE:0"],"precision":"f64"}"#);
        let ParsedConfig::Train(cfg) = parse_config(f.path()).unwrap() else { panic!() };
        assert_eq!(cfg.precision, Precision::F64);
        let json = serde_json::to_string(&*cfg).unwrap();
        assert!(json.contains("\"f64\""));
    }
}
