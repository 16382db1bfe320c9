//! Run configuration: one JSON document, overridden by command-line flags.

use std::path::{Path, PathBuf};

use robustedit_core::editing::EditConfig;
use robustedit_core::evaluation::protocol::{EvalConfig, Localization, ProtocolSettings};
use robustedit_core::model::ModelConfig;
use robustedit_core::perturb::PerturbationKind;
use robustedit_core::seed::derive_seed;
use robustedit_core::tracing::TraceConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Shape of a seeded random model. The weights come from `seed`, or from the
/// run seed when `seed` is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: Option<u64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_seq: 64,
            seed: None,
        }
    }
}

impl ModelSpec {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::byte_level(self.n_layers, self.n_heads, self.d_model, self.d_ff, self.max_seq)
    }
}

/// Sampling settings shared by tracing and evaluation, so accuracies measured
/// by either agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSettings {
    pub samples: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            samples: 10,
            temperature: 0.2,
            max_new_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSettings {
    pub copies: usize,
}

impl Default for TraceSettings {
    fn default() -> Self {
        Self { copies: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub k: Vec<usize>,
    /// Categories for `run-protocol`; all when absent.
    pub categories: Option<Vec<String>>,
    pub max_candidates: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            k: vec![1, 10],
            categories: None,
            max_candidates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSettings {
    pub kinds: Vec<PerturbationKind>,
    pub sites: usize,
}

impl Default for PerturbSettings {
    fn default() -> Self {
        Self {
            kinds: PerturbationKind::ALL.to_vec(),
            sites: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Edit a seeded random middle-third layer instead of tracing.
    pub no_localization: bool,
    pub no_early_stop: bool,
    /// Manual key layer.
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub model_spec: ModelSpec,
    /// Unedited model for `eval`: resolves reference checkers and anchors the
    /// clean-prompt regression.
    pub baseline: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// Clean prompts for `make-dataset`, one per line.
    pub prompts: Option<PathBuf>,
    /// Key-layer report from `trace`, consumed by `edit`.
    pub trace_report: Option<PathBuf>,
    /// Protocol report consumed by `report`.
    pub input: Option<PathBuf>,
    pub task: Option<String>,
    pub seed: u64,
    pub generation: GenerationSettings,
    pub trace: TraceSettings,
    pub edit: EditConfig,
    pub eval: EvalSettings,
    pub perturb: PerturbSettings,
    pub ablation: Ablation,
    pub out: Option<PathBuf>,
}

/// Seeds derived from the run seed, recorded in every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedSeeds {
    pub run: u64,
    /// Completion `j` of every prompt uses `generation + j`.
    pub generation: u64,
    pub model: u64,
    pub no_localization: u64,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn seeds(&self) -> DerivedSeeds {
        DerivedSeeds {
            run: self.seed,
            generation: derive_seed(self.seed, "generation", 0),
            model: self.model_spec.seed.unwrap_or(self.seed),
            no_localization: derive_seed(self.seed, "no-localization", 0),
        }
    }

    pub fn trace_config(&self) -> TraceConfig {
        TraceConfig {
            copies: self.trace.copies,
            samples: self.generation.samples,
            temperature: self.generation.temperature,
            seed: self.seeds().generation,
            max_new_tokens: self.generation.max_new_tokens,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            samples: self.generation.samples,
            temperature: self.generation.temperature,
            seed: self.seeds().generation,
            max_new_tokens: self.generation.max_new_tokens,
            k: self.eval.k.clone(),
        }
    }

    pub fn edit_config(&self) -> EditConfig {
        let mut cfg = self.edit.clone();
        if self.ablation.no_early_stop {
            cfg.early_stopping_enabled = false;
        }
        cfg
    }

    pub fn localization(&self) -> Localization {
        match (self.ablation.layer, self.ablation.no_localization) {
            (Some(layer), _) => Localization::Manual { layer },
            (None, true) => Localization::RandomMiddle,
            (None, false) => Localization::Trace,
        }
    }

    pub fn protocol_settings(&self) -> ProtocolSettings {
        ProtocolSettings {
            trace: self.trace_config(),
            edit: self.edit_config(),
            eval: self.eval_config(),
            localization: self.localization(),
            seed: self.seed,
            max_candidates: self.eval.max_candidates,
        }
    }

    /// Checks values that do not depend on the command.
    pub fn validate(&self) -> Result<(), CliError> {
        let param = |e: robustedit_core::Error| CliError::Config(e.to_string());
        self.trace_config().validate().map_err(param)?;
        self.edit_config().validate().map_err(param)?;
        self.eval_config().validate().map_err(param)?;
        self.model_spec.model_config().validate().map_err(param)?;
        if self.ablation.layer.is_some() && self.ablation.no_localization {
            return Err(CliError::Config(
                "--layer and --no-localization are mutually exclusive".into(),
            ));
        }
        if self.perturb.sites == 0 {
            return Err(CliError::Config("perturb.sites must be ≥ 1".into()));
        }
        if self.perturb.kinds.is_empty() {
            return Err(CliError::Config("perturb.kinds must not be empty".into()));
        }
        Ok(())
    }

    /// Snapshot for manifests: everything except the output directory.
    pub fn snapshot(&self) -> RunConfig {
        RunConfig {
            out: None,
            ..self.clone()
        }
    }
}
