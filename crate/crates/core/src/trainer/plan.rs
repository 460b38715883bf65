use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::transformer::names;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Layer,
    Attn,
    Logit,
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    UnlabeledTransfer,
    SoftLabeledTransfer,
    HardLabeled,
}

/// Which student parameters a stage may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Embeddings and blocks plus the alignment map; the head stays fixed.
    Encoder,
    /// Only the task head.
    Classifier,
    /// Everything.
    All,
}

impl ParamGroup {
    pub fn trains(self, name: &str) -> bool {
        match self {
            ParamGroup::Encoder => names::is_encoder(name),
            ParamGroup::Classifier => names::is_classifier(name),
            ParamGroup::All => true,
        }
    }

    pub fn trains_alignment(self) -> bool {
        !matches!(self, ParamGroup::Classifier)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub id: u8,
    pub losses: Vec<LossKind>,
    pub data: DataKind,
    pub trainable: ParamGroup,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Restrict hidden-state transfer to the final student layer.
    #[serde(default)]
    pub last_layer_only: bool,
}

impl StagePlan {
    pub fn uses(&self, loss: LossKind) -> bool {
        self.losses.contains(&loss)
    }
}

/// Switches removing parts of the full recipe.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Stage 1 optimizes the hidden-state loss only.
    pub no_multilayer_attn: bool,
    /// Stage 1 optimizes the hidden-state loss on the last layer only.
    pub no_hidden_states_last_layer_only: bool,
    /// Student word embeddings are random instead of SVD-projected.
    pub no_embedding_factorization: bool,
    /// Stages that train the head on a frozen encoder are dropped.
    pub no_freezing: bool,
    /// No transfer at all: random student, cross-entropy only.
    pub init_from_scratch: bool,
}

/// Where stage 1 draws its unlabeled inputs from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Data {
    #[default]
    Transfer,
    Labeled,
    Both,
}

/// Which inputs receive teacher logits for stages 2 and 3.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftLabelSource {
    #[default]
    Labeled,
    LabeledAndTransfer,
}

/// Per-stage epochs and learning rates of the five-stage recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub epochs: [usize; 5],
    pub lr: [f64; 5],
    pub batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: [3, 1, 2, 1, 2],
            lr: [3e-4, 3e-4, 1e-4, 3e-4, 1e-4],
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistilConfig {
    pub schedule: Schedule,
    pub ablations: Ablations,
    pub stage1_data: Stage1Data,
    pub soft_labels: SoftLabelSource,
    /// One alignment map per aligned layer instead of a shared one.
    pub per_layer_alignment: bool,
    pub seed: u64,
    pub execution: Execution,
}

/// Expand a configuration into the ordered stage list.
pub fn make_plan(cfg: &DistilConfig) -> Result<Vec<StagePlan>> {
    let s = &cfg.schedule;
    let a = &cfg.ablations;
    if s.batch_size == 0 {
        return Err(Error::Config("schedule.batch_size must be positive".into()));
    }
    if let Some(lr) = s.lr.iter().find(|lr| !lr.is_finite() || **lr < 0.0) {
        return Err(Error::Config(format!("learning rate {lr} must be finite and nonnegative")));
    }
    if a.init_from_scratch {
        if a.no_multilayer_attn || a.no_hidden_states_last_layer_only || a.no_freezing || a.no_embedding_factorization {
            return Err(Error::Config(
                "init_from_scratch excludes every other ablation switch".into(),
            ));
        }
        return Ok(vec![StagePlan {
            id: 5,
            losses: vec![LossKind::Ce],
            data: DataKind::HardLabeled,
            trainable: ParamGroup::All,
            epochs: s.epochs[1..].iter().sum(),
            lr: s.lr[3],
            batch_size: s.batch_size,
            last_layer_only: false,
        }]);
    }
    if a.no_multilayer_attn && a.no_hidden_states_last_layer_only {
        return Err(Error::Config(
            "no_multilayer_attn and no_hidden_states_last_layer_only are alternative rows; set one".into(),
        ));
    }
    let stage1_losses = if a.no_multilayer_attn || a.no_hidden_states_last_layer_only {
        vec![LossKind::Layer]
    } else {
        vec![LossKind::Layer, LossKind::Attn]
    };
    let stage = |id: u8, losses: Vec<LossKind>, data, trainable| StagePlan {
        id,
        losses,
        data,
        trainable,
        epochs: s.epochs[id as usize - 1],
        lr: s.lr[id as usize - 1],
        batch_size: s.batch_size,
        last_layer_only: id == 1 && a.no_hidden_states_last_layer_only,
    };
    let mut plan = vec![
        stage(1, stage1_losses, DataKind::UnlabeledTransfer, ParamGroup::Encoder),
        stage(2, vec![LossKind::Logit], DataKind::SoftLabeledTransfer, ParamGroup::Classifier),
        stage(3, vec![LossKind::Logit], DataKind::SoftLabeledTransfer, ParamGroup::All),
        stage(4, vec![LossKind::Ce], DataKind::HardLabeled, ParamGroup::Classifier),
        stage(5, vec![LossKind::Ce], DataKind::HardLabeled, ParamGroup::All),
    ];
    if a.no_freezing {
        plan.retain(|p| p.id != 2 && p.id != 4);
    }
    Ok(plan)
}
