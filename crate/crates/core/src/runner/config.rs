use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::analysis::{PoolScope, ReduceMethod};
use crate::corpus::{LangCode, SyntheticFamilySpec};
use crate::decoding::DecodeConfig;
use crate::eval::BleuSmoothing;
use crate::model::TransformerConfig;
use crate::numerics::{AdamConfig, LrSchedule};
use crate::tagging::LtStrategy;

/// Where the corpora come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generate a synthetic family.
    Synthetic { family: SyntheticFamilySpec },
    /// Read a family directory in the layout written by `write_family`.
    Directory { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub num_merges: usize,
    pub vocab_cap: usize,
}

/// Transformer shape without the vocabulary size, which the tokenizer decides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_positions: usize,
    #[serde(default = "yes")]
    pub share_embeddings: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn with_vocab(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            d_model: self.d_model,
            ffn_dim: self.ffn_dim,
            heads: self.heads,
            dropout: self.dropout,
            max_positions: self.max_positions,
            vocab_size,
            share_embeddings: self.share_embeddings,
        }
    }

    fn from_transformer(t: TransformerConfig) -> Self {
        ModelConfig {
            enc_layers: t.enc_layers,
            dec_layers: t.dec_layers,
            d_model: t.d_model,
            ffn_dim: t.ffn_dim,
            heads: t.heads,
            dropout: t.dropout,
            max_positions: t.max_positions,
            share_embeddings: t.share_embeddings,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: u64,
    /// Upper bound on padded tokens per side of a batch.
    pub token_budget: usize,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    /// Parameter init, batch order and dropout masks all derive from this.
    pub seed: u64,
    /// Mean training loss is logged every this many steps.
    pub log_every: u64,
    /// Dev loss is measured every this many steps (0 disables).
    pub dev_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub bleu_smoothing: BleuSmoothing,
    /// Additive smoothing of the character n-gram language identifier.
    pub langid_smoothing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub enabled: bool,
    /// Test rows used per language.
    pub sentences: usize,
    /// Defaults to the pivot language.
    #[serde(default)]
    pub anchor: Option<LangCode>,
    pub scope: PoolScope,
    pub methods: Vec<ReduceMethod>,
    pub reduce_seed: u64,
    /// Test row replayed for the attention trace; source and target are the
    /// first two non-anchor languages.
    pub trace_row: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub strategies: Vec<LtStrategy>,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub decoding: DecodeConfig,
    pub evaluation: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    /// CPU-sized default: five synthetic languages, 8k pairs per direction,
    /// a 2+2 layer model and 4k steps.
    pub fn desk() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs/desk"),
            strategies: LtStrategy::ALL.to_vec(),
            data: DataConfig::Synthetic { family: SyntheticFamilySpec::default() },
            tokenizer: TokenizerConfig { num_merges: 4000, vocab_cap: 6000 },
            model: ModelConfig::from_transformer(TransformerConfig::desk(0)),
            training: TrainingConfig {
                steps: 4000,
                token_budget: 2000,
                schedule: LrSchedule::InverseSqrt { peak: 1e-3, warmup: 400 },
                adam: AdamConfig::default(),
                label_smoothing: 0.1,
                seed: 1,
                log_every: 100,
                dev_every: 500,
            },
            decoding: DecodeConfig::default(),
            evaluation: EvalConfig { bleu_smoothing: BleuSmoothing::None, langid_smoothing: 0.5 },
            analysis: AnalysisConfig {
                enabled: true,
                sentences: 100,
                anchor: None,
                scope: PoolScope::AllTokens,
                methods: vec![ReduceMethod::Pca, ReduceMethod::Tsne],
                reduce_seed: 0,
                trace_row: 0,
            },
        }
    }

    /// Full-size settings: 40k merges and vocabulary, 5+5 layers, about 30k
    /// tokens per batch, 100k steps.
    pub fn paper_scale() -> Self {
        let mut cfg = Self::desk();
        cfg.output_dir = PathBuf::from("runs/paper-scale");
        cfg.tokenizer = TokenizerConfig { num_merges: 40_000, vocab_cap: 40_000 };
        cfg.model = ModelConfig::from_transformer(TransformerConfig::paper_scale(0));
        cfg.training.steps = 100_000;
        cfg.training.token_budget = 30_000;
        cfg.training.schedule = LrSchedule::InverseSqrt { peak: 5e-4, warmup: 4000 };
        cfg.training.dev_every = 5000;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            RunError::Config(m) => RunError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Collects every problem instead of stopping at the first.
    pub fn validate(&self) -> Result<(), RunError> {
        let mut errs = Vec::new();
        if self.strategies.is_empty() {
            errs.push("strategies: at least one strategy is required".to_string());
        }
        let mut seen = self.strategies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.strategies.len() {
            errs.push("strategies: duplicate entries".into());
        }
        match &self.data {
            DataConfig::Synthetic { family } => {
                if let Err(e) = family.validate() {
                    errs.push(format!("data.family: {e}"));
                }
            }
            DataConfig::Directory { path } => {
                if path.as_os_str().is_empty() {
                    errs.push("data.path: empty".into());
                }
            }
        }
        if self.tokenizer.vocab_cap == 0 {
            errs.push("tokenizer.vocab_cap: must be positive".into());
        }
        if let Err(e) = self.model.with_vocab(1).validate() {
            errs.push(format!("model: {e}"));
        }
        let t = &self.training;
        if t.steps == 0 {
            errs.push("training.steps: must be positive".into());
        }
        if t.token_budget == 0 {
            errs.push("training.token_budget: must be positive".into());
        }
        if !(0.0..1.0).contains(&t.label_smoothing) {
            errs.push(format!("training.label_smoothing: {} outside [0, 1)", t.label_smoothing));
        }
        if t.log_every == 0 {
            errs.push("training.log_every: must be positive".into());
        }
        match t.schedule {
            LrSchedule::Constant { lr } if !(lr > 0.0 && lr.is_finite()) => {
                errs.push(format!("training.schedule.lr: {lr} is not a positive number"))
            }
            LrSchedule::InverseSqrt { peak, .. } if !(peak > 0.0 && peak.is_finite()) => {
                errs.push(format!("training.schedule.peak: {peak} is not a positive number"))
            }
            _ => {}
        }
        if self.decoding.beam == 0 {
            errs.push("decoding.beam: must be positive".into());
        }
        if self.decoding.alpha < 0.0 || !self.decoding.alpha.is_finite() {
            errs.push(format!("decoding.alpha: {} must be a non-negative number", self.decoding.alpha));
        }
        if self.evaluation.langid_smoothing.is_nan() || self.evaluation.langid_smoothing <= 0.0 {
            errs.push("evaluation.langid_smoothing: must be positive".into());
        }
        let a = &self.analysis;
        if a.enabled && a.sentences < crate::analysis::MIN_POINTS_PER_LANGUAGE {
            errs.push(format!(
                "analysis.sentences: {} is below the minimum of {}",
                a.sentences,
                crate::analysis::MIN_POINTS_PER_LANGUAGE
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(RunError::Config(errs.join("; ")))
        }
    }
}
