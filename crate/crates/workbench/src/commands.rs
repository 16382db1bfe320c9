//! Command implementations. Each writes its artifacts plus a manifest into
//! the output directory.

use std::path::{Path, PathBuf};

use robustedit_core::editing::{edit_tokens, EditRecord};
use robustedit_core::evaluation::checker::ResolvedChecker;
use robustedit_core::evaluation::dataset::{parse_jsonl, to_jsonl, TaskRecord};
use robustedit_core::evaluation::protocol::{
    clean_regression, evaluate_tasks, random_middle_layer, resolve_tasks, run_protocol,
    CleanRegression, Localization, ProtocolReport, TaskEval,
};
use robustedit_core::evaluation::CheckerSpec;
use robustedit_core::model::{read_crml, seeded_random_model, write_crml, ModelBundle};
use robustedit_core::perturb::{perturb, PerturbConfig, PerturbationKind};
use robustedit_core::seed::derive_seed;
use robustedit_core::tracing::{
    layer_sweep, prompt_accuracy, select_key_layer, KeyLayerReport,
};
use robustedit_core::Error;
use serde::{Deserialize, Serialize};

use crate::cli::Command;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::Artifacts;
use crate::report::render_report;

pub const MODEL_FILE: &str = "model.crml";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const DATASET_SUMMARY_FILE: &str = "make_dataset.json";
pub const TRACE_FILE: &str = "key_layer.json";
pub const EDITED_MODEL_FILE: &str = "edited.crml";
pub const EDIT_RECORD_FILE: &str = "edit_record.json";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const PROTOCOL_FILE: &str = "protocol_report.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const HISTOGRAM_FILE: &str = "key_layer_histogram.csv";
pub const EDITS_CSV_FILE: &str = "edits.csv";

/// Runs one command; returns the paths written.
pub fn execute(command: Command, cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let out = cfg
        .out
        .as_deref()
        .ok_or_else(|| CliError::Config("--out is required".into()))?;
    let mut art = Artifacts::new(out)?;
    match command {
        Command::GenModel => gen_model(cfg, &mut art)?,
        Command::MakeDataset => make_dataset(cfg, &mut art)?,
        Command::Trace => trace(cfg, &mut art)?,
        Command::Edit => edit(cfg, &mut art)?,
        Command::Eval => eval(cfg, &mut art)?,
        Command::RunProtocol => protocol(cfg, &mut art)?,
        Command::Report => report(cfg, &mut art)?,
    }
    art.finish(command.name(), cfg)
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Config(format!("--{flag} is required for this command")))
}

fn crml_bytes(model: &ModelBundle) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_crml(model, &mut buf)?;
    Ok(buf)
}

/// The `--model` file, or the seeded model described by `model_spec`.
fn load_model(cfg: &RunConfig, art: &mut Artifacts) -> Result<ModelBundle, CliError> {
    match &cfg.model {
        Some(path) => {
            let bytes = art.read_input("model", path)?;
            Ok(read_crml(bytes.as_slice())?)
        }
        None => Ok(seeded_random_model(
            &cfg.model_spec.model_config(),
            cfg.seeds().model,
        )?),
    }
}

fn load_dataset(cfg: &RunConfig, art: &mut Artifacts) -> Result<Vec<TaskRecord>, CliError> {
    let path = require(&cfg.dataset, "dataset")?;
    let bytes = art.read_input("dataset", path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))?;
    let tasks = parse_jsonl(&text)?;
    if tasks.is_empty() {
        return Err(CliError::Config(format!("{} contains no tasks", path.display())));
    }
    Ok(tasks)
}

/// The `--task` record, or the first one.
fn select_task<'a>(cfg: &RunConfig, tasks: &'a [TaskRecord]) -> Result<&'a TaskRecord, CliError> {
    match &cfg.task {
        Some(id) => tasks
            .iter()
            .find(|t| &t.task_id == id)
            .ok_or_else(|| CliError::Config(format!("task {id:?} not in dataset"))),
        None => Ok(&tasks[0]),
    }
}

struct PreparedTask {
    record: TaskRecord,
    ori: Vec<u32>,
    pert: Vec<u32>,
    checker: ResolvedChecker,
}

fn prepare_task(
    cfg: &RunConfig,
    model: &ModelBundle,
    tasks: &[TaskRecord],
) -> Result<PreparedTask, CliError> {
    let record = select_task(cfg, tasks)?.clone();
    let ori = model.config.encode(&record.prompt_ori);
    let pert = model.config.encode(&record.prompt_pert);
    let checker = record
        .checker
        .resolve(model, &ori, cfg.generation.max_new_tokens)?;
    Ok(PreparedTask {
        record,
        ori,
        pert,
        checker,
    })
}

fn gen_model(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let model = seeded_random_model(&cfg.model_spec.model_config(), cfg.seeds().model)?;
    art.write(MODEL_FILE, &crml_bytes(&model)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SkippedPrompt {
    kind: PerturbationKind,
    prompt_index: usize,
}

#[derive(Debug, Serialize)]
struct DatasetSummary {
    n_prompts: usize,
    n_tasks: usize,
    skipped: Vec<SkippedPrompt>,
}

/// Seed of the perturbation applied to prompt `index` under `kind`.
pub fn perturb_seed(run_seed: u64, kind: PerturbationKind, index: usize) -> u64 {
    derive_seed(run_seed, &format!("perturb/{kind}"), index as u64)
}

fn make_dataset(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let path = require(&cfg.prompts, "prompts")?;
    let bytes = art.read_input("prompts", path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))?;
    let prompts: Vec<&str> = text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty())
        .collect();
    let mut tasks = Vec::new();
    let mut skipped = Vec::new();
    for &kind in &cfg.perturb.kinds {
        for (i, prompt) in prompts.iter().enumerate() {
            let pc = PerturbConfig {
                kind,
                seed: perturb_seed(cfg.seed, kind, i),
                sites: cfg.perturb.sites,
            };
            match perturb(prompt, &pc) {
                Ok(pert) => tasks.push(TaskRecord {
                    task_id: format!("{kind}-{i:03}"),
                    category: kind.name().to_string(),
                    prompt_ori: prompt.to_string(),
                    prompt_pert: pert,
                    checker: CheckerSpec::reference_match(),
                }),
                Err(Error::NoApplicableSite { .. }) => skipped.push(SkippedPrompt {
                    kind,
                    prompt_index: i,
                }),
                Err(e) => return Err(e.into()),
            }
        }
    }
    art.write(DATASET_FILE, to_jsonl(&tasks)?.as_bytes())?;
    art.write_json(
        DATASET_SUMMARY_FILE,
        &DatasetSummary {
            n_prompts: prompts.len(),
            n_tasks: tasks.len(),
            skipped,
        },
    )?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TraceOutput {
    pub task_id: String,
    pub category: String,
    #[serde(flatten)]
    pub report: KeyLayerReport,
}

fn trace(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let model = load_model(cfg, art)?;
    let tasks = load_dataset(cfg, art)?;
    let task = prepare_task(cfg, &model, &tasks)?;
    let sweep = layer_sweep(&model, &task.record.pair(), &task.checker, &cfg.trace_config())?;
    art.write_json(
        TRACE_FILE,
        &TraceOutput {
            task_id: task.record.task_id.clone(),
            category: task.record.category.clone(),
            report: select_key_layer(&sweep),
        },
    )?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditOutput {
    pub task_id: String,
    /// trace, trace_report, random_middle, or manual.
    pub localization: String,
    pub key_layer: usize,
    pub acc_ori: f64,
    pub acc_pert: f64,
    pub model_checksum: String,
    pub edited_checksum: String,
    pub record: EditRecord,
}

fn edit(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let model = load_model(cfg, art)?;
    let tasks = load_dataset(cfg, art)?;
    let task = prepare_task(cfg, &model, &tasks)?;
    let tc = cfg.trace_config();
    let acc_ori = prompt_accuracy(&model, &task.ori, &task.checker, &tc)?;
    let acc_pert = prompt_accuracy(&model, &task.pert, &task.checker, &tc)?;
    if acc_ori <= acc_pert {
        return Err(Error::NoRobustnessGap { acc_ori, acc_pert }.into());
    }

    let (key_layer, localization) = match cfg.localization() {
        Localization::Manual { layer } => {
            model.config.check_layer(layer)?;
            (layer, "manual")
        }
        Localization::RandomMiddle => (
            random_middle_layer(model.config.n_layers, cfg.seeds().no_localization),
            "random_middle",
        ),
        Localization::Trace => match &cfg.trace_report {
            Some(path) => {
                let bytes = art.read_input("trace_report", path)?;
                let report: TraceOutput = serde_json::from_slice(&bytes).map_err(|e| {
                    CliError::Config(format!("invalid trace report {}: {e}", path.display()))
                })?;
                if report.task_id != task.record.task_id {
                    return Err(CliError::Config(format!(
                        "trace report is for task {:?}, not {:?}",
                        report.task_id, task.record.task_id
                    )));
                }
                model.config.check_layer(report.report.key_layer)?;
                (report.report.key_layer, "trace_report")
            }
            None => {
                let sweep = layer_sweep(&model, &task.record.pair(), &task.checker, &tc)?;
                (select_key_layer(&sweep).key_layer, "trace")
            }
        },
    };

    let (edited, record) = edit_tokens(&model, &task.ori, &task.pert, key_layer, &cfg.edit_config())?;
    art.write(EDITED_MODEL_FILE, &crml_bytes(&edited)?)?;
    art.write(LOSS_CURVE_FILE, record.loss_curve_csv().as_bytes())?;
    art.write_json(
        EDIT_RECORD_FILE,
        &EditOutput {
            task_id: task.record.task_id.clone(),
            localization: localization.to_string(),
            key_layer,
            acc_ori,
            acc_pert,
            model_checksum: model.checksum(),
            edited_checksum: edited.checksum(),
            record,
        },
    )?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_acc_ori: f64,
    pub mean_acc_pert: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEval {
    pub checksum: String,
    pub summary: EvalSummary,
    pub tasks: Vec<TaskEval>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutput {
    pub samples: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub k: Vec<usize>,
    pub model: ModelEval,
    pub baseline: Option<ModelEval>,
    /// Original-prompt pass@k of `model` minus that of `baseline`.
    pub clean_regression: Option<CleanRegression>,
}

fn model_eval(model: &ModelBundle, tasks: Vec<TaskEval>) -> ModelEval {
    let n = tasks.len() as f64;
    ModelEval {
        checksum: model.checksum(),
        summary: EvalSummary {
            mean_acc_ori: tasks.iter().map(|t| t.acc_ori).sum::<f64>() / n,
            mean_acc_pert: tasks.iter().map(|t| t.acc_pert).sum::<f64>() / n,
        },
        tasks,
    }
}

fn eval(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let model = load_model(cfg, art)?;
    let baseline = match &cfg.baseline {
        Some(path) => {
            let bytes = art.read_input("baseline", path)?;
            Some(read_crml(bytes.as_slice())?)
        }
        None => None,
    };
    let tasks = load_dataset(cfg, art)?;
    let ec = cfg.eval_config();
    let reference = baseline.as_ref().unwrap_or(&model);
    let resolved = resolve_tasks(reference, &tasks, ec.max_new_tokens)?;
    let model_tasks = evaluate_tasks(&model, &resolved, &ec)?;
    let (base, clean) = match &baseline {
        Some(b) => (
            Some(model_eval(b, evaluate_tasks(b, &resolved, &ec)?)),
            Some(clean_regression(b, &model, &resolved, &ec)?),
        ),
        None => (None, None),
    };
    art.write_json(
        EVAL_FILE,
        &EvalOutput {
            samples: ec.samples,
            temperature: ec.temperature,
            max_new_tokens: ec.max_new_tokens,
            k: ec.k.clone(),
            model: model_eval(&model, model_tasks),
            baseline: base,
            clean_regression: clean,
        },
    )?;
    Ok(())
}

fn protocol(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let model = load_model(cfg, art)?;
    let tasks = load_dataset(cfg, art)?;
    let report = run_protocol(
        &model,
        &tasks,
        cfg.eval.categories.as_deref(),
        &cfg.protocol_settings(),
    )?;
    art.write_json(PROTOCOL_FILE, &report)?;
    Ok(())
}

fn report(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let path = require(&cfg.input, "input")?;
    let bytes = art.read_input("protocol_report", path)?;
    let report: ProtocolReport = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Config(format!("invalid protocol report {}: {e}", path.display())))?;
    let rendered = render_report(&report);
    art.write(SUMMARY_FILE, rendered.summary.as_bytes())?;
    art.write(HISTOGRAM_FILE, rendered.histogram_csv.as_bytes())?;
    art.write(EDITS_CSV_FILE, rendered.edits_csv.as_bytes())?;
    Ok(())
}
