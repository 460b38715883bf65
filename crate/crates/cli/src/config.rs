//! Run configuration: a TOML document, then `XDISTIL_SEED`, then `--set`
//! overrides, validated against a closed schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use xdistil_core::synthetic::SyntheticSpec;
use xdistil_core::trainer::{Ablations, DistilConfig, FineTuneOptions, Schedule, SoftLabelSource, Stage1Data};
use xdistil_core::transformer::{AttentionScaling, HeadKind, ModelConfig};
use xdistil_core::{Error, Execution, Result};

pub const SEED_ENV: &str = "XDISTIL_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub execution: Execution,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub distil: DistilSection,
    pub finetune: FineTuneSection,
    pub select: SelectConfig,
    pub augment: AugmentConfig,
    pub swap: SwapConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("xdistil-out"),
            execution: Execution::default(),
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            distil: DistilSection::default(),
            finetune: FineTuneSection::default(),
            select: SelectConfig::default(),
            augment: AugmentConfig::default(),
            swap: SwapConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Architecture with the data-dependent sizes optional; missing ones are
/// filled from the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    #[serde(default)]
    pub max_seq_len: Option<usize>,
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub attention_scaling: AttentionScaling,
}

impl ArchConfig {
    fn sized(num_layers: usize, hidden_dim: usize) -> Self {
        ArchConfig {
            num_layers,
            hidden_dim,
            num_heads: 2,
            ff_dim: 2 * hidden_dim,
            max_seq_len: None,
            vocab_size: None,
            num_classes: None,
            attention_scaling: AttentionScaling::default(),
        }
    }

    pub fn resolve(&self, shape: &DataShape) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            max_seq_len: self.max_seq_len.unwrap_or(shape.max_seq_len),
            vocab_size: self.vocab_size.unwrap_or(shape.vocab_size),
            num_classes: self.num_classes.unwrap_or(shape.num_classes),
            attention_scaling: self.attention_scaling,
            head: shape.head,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sizes a model needs from the data it will see.
#[derive(Debug, Clone, Copy)]
pub struct DataShape {
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub head: HeadKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    /// `label<TAB>text[<TAB>second text]`
    Classification,
    /// `token<TAB>BIO-tag`, blank line between sentences.
    Ner,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic sizes.
    pub labeled: usize,
    pub transfer: usize,
    pub test: usize,
    pub synthetic: SyntheticSpec,
    /// File inputs.
    pub format: FileFormat,
    pub vocab: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    /// Unlabeled pairs (`first<TAB>second`) or single sentences.
    pub transfer_file: Option<PathBuf>,
    pub max_seq_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            labeled: 2000,
            transfer: 20000,
            test: 1000,
            synthetic: SyntheticSpec::default(),
            format: FileFormat::Classification,
            vocab: None,
            train: None,
            test_file: None,
            transfer_file: None,
            max_seq_len: 64,
        }
    }
}

/// How a model is trained with cross-entropy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub restart_each_epoch: bool,
}

impl TrainSpec {
    pub fn options(&self, seed: u64, execution: Execution) -> FineTuneOptions {
        FineTuneOptions {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
            validation_fraction: self.validation_fraction,
            restart_each_epoch: self.restart_each_epoch,
            execution,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    /// Use this fine-tuned teacher instead of training one.
    pub checkpoint: Option<PathBuf>,
    pub model: ArchConfig,
    pub train: TrainSpec,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            checkpoint: None,
            model: ArchConfig::sized(4, 32),
            train: TrainSpec {
                epochs: 12,
                lr: 1e-3,
                batch_size: 8,
                validation_fraction: 0.1,
                restart_each_epoch: true,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    /// Start from every tensor of this checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Start from this checkpoint's encoder with a fresh head.
    pub seed_checkpoint: Option<PathBuf>,
    pub model: ArchConfig,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            checkpoint: None,
            seed_checkpoint: None,
            model: ArchConfig::sized(2, 16),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistilSection {
    pub schedule: Schedule,
    pub ablations: Ablations,
    pub stage1_data: Stage1Data,
    pub soft_labels: SoftLabelSource,
    pub per_layer_alignment: bool,
}

impl DistilSection {
    pub fn to_config(&self, seed: u64, execution: Execution) -> DistilConfig {
        DistilConfig {
            schedule: self.schedule.clone(),
            ablations: self.ablations,
            stage1_data: self.stage1_data,
            soft_labels: self.soft_labels,
            per_layer_alignment: self.per_layer_alignment,
            seed,
            execution,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneSection {
    /// Continue from this checkpoint (frozen flags are honoured).
    pub checkpoint: Option<PathBuf>,
    pub model: ArchConfig,
    pub train: TrainSpec,
}

impl Default for FineTuneSection {
    fn default() -> Self {
        FineTuneSection {
            checkpoint: None,
            model: ArchConfig::sized(4, 32),
            train: TrainSpec {
                epochs: 3,
                lr: 1e-3,
                batch_size: 32,
                validation_fraction: 0.1,
                restart_each_epoch: false,
            },
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    /// CSV with a `source,<target>...` header.
    pub matrix: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub pairs: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Named-tensor file of corpus vectors keyed by line index.
    pub embeddings: Option<PathBuf>,
    pub k: usize,
    pub dim: usize,
    pub output: Option<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pairs: None,
            corpus: None,
            embeddings: None,
            k: xdistil_core::transfer::DEFAULT_K,
            dim: xdistil_core::transfer::HASHED_DIM,
            output: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwapConfig {
    pub checkpoint: Option<PathBuf>,
    /// One token per line.
    pub vocab: Option<PathBuf>,
    /// Named-tensor file holding the `|V| x d` table.
    pub embeddings: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Suite names; empty runs every registered suite.
    pub suites: Vec<String>,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            suites: Vec::new(),
            tolerance: xdistil_core::suites::TOLERANCE,
        }
    }
}

/// Parse the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Layer the config file, the seed environment variable and `--set`
    /// overrides, then validate against the schema.
    pub fn load(path: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        // Start from the serialized defaults so a partial section keeps the
        // defaults of that section rather than the field type's defaults.
        let mut root = Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            let file = text
                .parse::<Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut root, file);
        }
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
            root.insert("seed".into(), Value::Integer(seed as i64));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_dotted(&mut root, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.data.source == DataSource::Synthetic && (self.data.labeled < 2 || self.data.test == 0) {
            return Err(Error::Config("synthetic data needs labeled >= 2 and test >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.teacher.train.validation_fraction)
            || !(0.0..1.0).contains(&self.finetune.train.validation_fraction)
        {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        if self.gradcheck.tolerance.is_nan() || self.gradcheck.tolerance <= 0.0 {
            return Err(Error::Config("gradcheck tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Overlay `top` onto `base`, descending into tables present in both.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
