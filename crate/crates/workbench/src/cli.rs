//! Command-line surface. Every flag overrides the matching config field.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use robustedit_core::perturb::PerturbationKind;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "robustedit", version, about = "Localize and edit robustness failures in small decoder-only models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a seeded random model as CRML.
    GenModel,
    /// Perturb a clean-prompt file into a JSONL task dataset.
    MakeDataset,
    /// Layer sweep and key-layer selection for one task.
    Trace,
    /// Edit the key layer's down-projection for one task.
    Edit,
    /// pass@k of every task; clean-prompt regression against a baseline.
    Eval,
    /// Leave-one-in protocol over the dataset's categories.
    RunProtocol,
    /// Plain-text and CSV summary of a protocol report.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenModel => "gen-model",
            Command::MakeDataset => "make-dataset",
            Command::Trace => "trace",
            Command::Edit => "edit",
            Command::Eval => "eval",
            Command::RunProtocol => "run-protocol",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub baseline: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub prompts: Option<PathBuf>,
    #[arg(long, global = true)]
    pub trace_report: Option<PathBuf>,
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long, global = true)]
    pub task: Option<String>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true)]
    pub n_layers: Option<usize>,
    #[arg(long, global = true)]
    pub n_heads: Option<usize>,
    #[arg(long, global = true)]
    pub d_model: Option<usize>,
    #[arg(long, global = true)]
    pub d_ff: Option<usize>,
    #[arg(long, global = true)]
    pub max_seq: Option<usize>,

    #[arg(long, global = true)]
    pub copies: Option<usize>,
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub max_new_tokens: Option<usize>,

    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
    #[arg(long, global = true)]
    pub no_early_stop: bool,
    #[arg(long, global = true)]
    pub no_localization: bool,
    /// Manual key layer (1-based).
    #[arg(long, global = true)]
    pub layer: Option<usize>,

    /// pass@k values, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub category: Option<Vec<String>>,
    #[arg(long, global = true)]
    pub max_candidates: Option<usize>,
    /// Perturbation kinds for make-dataset, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub kinds: Option<Vec<String>>,
    #[arg(long, global = true)]
    pub sites: Option<usize>,

    /// Worker threads. Outputs do not depend on this value.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

impl Flags {
    /// Loads `--config` (if any) and applies the flag overrides.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        macro_rules! set_opt {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = Some(v);
                }
            };
        }
        set_opt!(self.model => c.model);
        set_opt!(self.baseline => c.baseline);
        set_opt!(self.dataset => c.dataset);
        set_opt!(self.prompts => c.prompts);
        set_opt!(self.trace_report => c.trace_report);
        set_opt!(self.input => c.input);
        set_opt!(self.task => c.task);
        set_opt!(self.out => c.out);
        set!(self.seed => c.seed);
        set!(self.n_layers => c.model_spec.n_layers);
        set!(self.n_heads => c.model_spec.n_heads);
        set!(self.d_model => c.model_spec.d_model);
        set!(self.d_ff => c.model_spec.d_ff);
        set!(self.max_seq => c.model_spec.max_seq);
        set!(self.copies => c.trace.copies);
        set!(self.samples => c.generation.samples);
        set!(self.temperature => c.generation.temperature);
        set!(self.max_new_tokens => c.generation.max_new_tokens);
        set!(self.lambda => c.edit.lambda);
        set!(self.lr => c.edit.learning_rate);
        set!(self.max_steps => c.edit.max_steps);
        set!(self.k => c.eval.k);
        set_opt!(self.category => c.eval.categories);
        set_opt!(self.max_candidates => c.eval.max_candidates);
        set!(self.sites => c.perturb.sites);
        set_opt!(self.layer => c.ablation.layer);
        if self.no_early_stop {
            c.ablation.no_early_stop = true;
        }
        if self.no_localization {
            c.ablation.no_localization = true;
        }
        if let Some(kinds) = &self.kinds {
            c.perturb.kinds = kinds
                .iter()
                .map(|k| k.parse::<PerturbationKind>())
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        c.validate()?;
        Ok(c)
    }
}
