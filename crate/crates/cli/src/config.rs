//! Run configuration: one TOML file, one optional section per subcommand.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use flowcot::decode::{DecodeConfig, Strategy};
use flowcot::eval::Arm;
use flowcot::flow::{PosteriorFitConfig, PosteriorMode};
use flowcot::lm::{FeatureSpec, LinearFitConfig, TabularView};
use flowcot::reference::RlSetup;
use flowcot::rl::TrainConfig;
use flowcot::tasks::TaskFamilyConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen: GenSection,
    pub fit: FitSection,
    pub decode: DecodeSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}

/// Evaluation dataset and filler corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub task: TaskFamilyConfig,
    pub filler_rate: f64,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub dataset_size: usize,
    pub dataset_seed: u64,
}

impl Default for GenSection {
    fn default() -> Self {
        Self {
            task: TaskFamilyConfig::default(),
            filler_rate: 0.5,
            corpus_size: 20_000,
            corpus_seed: 11,
            dataset_size: 500,
            dataset_seed: 99,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Tabular,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub corpus: PathBuf,
    pub backend: Backend,
    pub view: TabularView,
    pub alpha: f64,
    pub features: FeatureSpec,
    pub linear: LinearFitConfig,
    /// Fit a label-conditioned posterior on the dataset's queries (tabular only).
    pub posterior: Option<PosteriorFitConfig>,
    pub dataset: PathBuf,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            corpus: "corpus.jsonl".into(),
            backend: Backend::Tabular,
            view: TabularView::default(),
            alpha: 0.01,
            features: FeatureSpec::default(),
            linear: LinearFitConfig::default(),
            posterior: Some(PosteriorFitConfig::default()),
            dataset: "dataset.jsonl".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub dataset: PathBuf,
    pub prior: PathBuf,
    pub posterior: Option<PathBuf>,
    /// The first arm is the baseline and the last the flow arm for transitions.
    pub arms: Vec<Arm>,
    /// When non-empty, also sweep every arm over these horizons.
    pub budgets: Vec<usize>,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            dataset: "dataset.jsonl".into(),
            prior: "prior.json".into(),
            posterior: Some("posterior.json".into()),
            arms: vec![
                Arm {
                    name: "standard_greedy".into(),
                    config: DecodeConfig {
                        strategy: Strategy::StandardGreedy,
                        ..DecodeConfig::default()
                    },
                },
                Arm {
                    name: "flow_greedy".into(),
                    config: DecodeConfig {
                        strategy: Strategy::FlowGreedy,
                        posterior_mode: PosteriorMode::ExactBayes,
                        profile: true,
                        ..DecodeConfig::default()
                    },
                },
            ],
            budgets: Vec::new(),
        }
    }
}

/// Mirrors [`RlSetup`]; `rl` holds the training loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub task: TaskFamilyConfig,
    pub filler_rate: f64,
    pub train_size: usize,
    pub heldout_size: usize,
    pub corpus_seed: u64,
    pub features: FeatureSpec,
    pub warm_start: LinearFitConfig,
    pub rl: TrainConfig,
    /// Start from this checkpoint instead of the maximum-likelihood warm start.
    pub init: Option<PathBuf>,
    /// Write `checkpoint_<step>.json` every this many steps.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = RlSetup::default();
        Self {
            task: s.task,
            filler_rate: s.filler_rate,
            train_size: s.train_size,
            heldout_size: s.heldout_size,
            corpus_seed: s.corpus_seed,
            features: s.features,
            warm_start: s.warm_start,
            rl: s.train,
            init: None,
            checkpoint_every: None,
        }
    }
}

impl TrainSection {
    pub fn setup(&self) -> RlSetup {
        RlSetup {
            task: self.task.clone(),
            filler_rate: self.filler_rate,
            train_size: self.train_size,
            heldout_size: self.heldout_size,
            corpus_seed: self.corpus_seed,
            features: self.features.clone(),
            warm_start: self.warm_start.clone(),
            train: self.rl.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub samples: usize,
    pub ks: Vec<usize>,
    pub temperature: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            dataset: "dataset.jsonl".into(),
            checkpoint: "prior.json".into(),
            samples: 16,
            ks: vec![1, 2, 4, 8, 16],
            temperature: 1.0,
            horizon: 12,
            seed: 0,
        }
    }
}
