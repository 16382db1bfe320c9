//! Correctness checkers for generated completions.

use std::io::Write;
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{Error, Result};
use crate::model::{generate, GenerationParams, ModelBundle, ModelConfig};

pub const DEFAULT_TIMEOUT_SECS: f64 = 10.0;

/// Decides whether one completion is functionally correct.
pub trait Checker: Sync {
    fn check(&self, completion: &[u32]) -> Result<bool>;
}

/// Serialized form of a task's checker, as stored in datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CheckerSpec {
    /// Exact token match against the unedited model's greedy continuation of
    /// the original prompt. `reference` is filled in on first resolution.
    ReferenceMatch {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference: Option<Vec<u32>>,
    },
    /// Runs `argv`, writing the completion text to its stdin; exit 0 passes.
    ExternalCommand {
        argv: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_secs: Option<f64>,
    },
}

impl CheckerSpec {
    pub fn reference_match() -> Self {
        CheckerSpec::ReferenceMatch { reference: None }
    }

    /// Turns this description into a runnable checker. A missing reference is
    /// captured as `reference_model`'s greedy continuation of `prompt_ori`.
    pub fn resolve(
        &self,
        reference_model: &ModelBundle,
        prompt_ori: &[u32],
        max_new_tokens: usize,
    ) -> Result<ResolvedChecker> {
        match self {
            CheckerSpec::ReferenceMatch { reference } => {
                let reference = match reference {
                    Some(r) => r.clone(),
                    None => generate(
                        reference_model,
                        prompt_ori,
                        &GenerationParams::greedy(max_new_tokens),
                        None,
                    )?
                    .remove(0),
                };
                if reference.is_empty() {
                    return Err(Error::Checker(
                        "reference continuation is empty (model emitted eos first)".into(),
                    ));
                }
                Ok(ResolvedChecker::Reference(ReferenceMatch { reference }))
            }
            CheckerSpec::ExternalCommand { argv, timeout_secs } => {
                Ok(ResolvedChecker::External(ExternalCommand::new(
                    argv.clone(),
                    Duration::from_secs_f64(timeout_secs.unwrap_or(DEFAULT_TIMEOUT_SECS)),
                    reference_model.config.clone(),
                )?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceMatch {
    pub reference: Vec<u32>,
}

impl Checker for ReferenceMatch {
    fn check(&self, completion: &[u32]) -> Result<bool> {
        Ok(completion == self.reference.as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct ExternalCommand {
    argv: Vec<String>,
    timeout: Duration,
    tokenizer: ModelConfig,
}

impl ExternalCommand {
    pub fn new(argv: Vec<String>, timeout: Duration, tokenizer: ModelConfig) -> Result<Self> {
        if argv.is_empty() {
            return Err(Error::Checker("external command argv is empty".into()));
        }
        Ok(Self {
            argv,
            timeout,
            tokenizer,
        })
    }
}

impl Checker for ExternalCommand {
    fn check(&self, completion: &[u32]) -> Result<bool> {
        let text = self.tokenizer.decode(completion);
        let mut child = Command::new(&self.argv[0])
            .args(&self.argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Checker(format!("cannot spawn {:?}: {e}", self.argv[0])))?;
        if let Some(mut stdin) = child.stdin.take() {
            // a checker that exits without reading its input is not an error
            let _ = stdin.write_all(text.as_bytes());
        }
        match child
            .wait_timeout(self.timeout)
            .map_err(|e| Error::Checker(e.to_string()))?
        {
            Some(status) => Ok(status.success()),
            None => {
                let _ = child.kill();
                let _ = child.wait();
                Ok(false)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum ResolvedChecker {
    Reference(ReferenceMatch),
    External(ExternalCommand),
}

impl ResolvedChecker {
    /// Serializable form, with the reference filled in.
    pub fn to_spec(&self) -> CheckerSpec {
        match self {
            ResolvedChecker::Reference(r) => CheckerSpec::ReferenceMatch {
                reference: Some(r.reference.clone()),
            },
            ResolvedChecker::External(e) => CheckerSpec::ExternalCommand {
                argv: e.argv.clone(),
                timeout_secs: Some(e.timeout.as_secs_f64()),
            },
        }
    }
}

impl Checker for ResolvedChecker {
    fn check(&self, completion: &[u32]) -> Result<bool> {
        match self {
            ResolvedChecker::Reference(c) => c.check(completion),
            ResolvedChecker::External(c) => c.check(completion),
        }
    }
}

/// Number of completions the checker accepts.
pub fn count_passes(checker: &dyn Checker, completions: &[Vec<u32>]) -> Result<usize> {
    let mut c = 0;
    for comp in completions {
        if checker.check(comp)? {
            c += 1;
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::byte_level(1, 1, 4, 4, 16)
    }

    #[test]
    fn reference_match_is_exact() {
        let c = ReferenceMatch {
            reference: vec![1, 2],
        };
        assert!(c.check(&[1, 2]).unwrap());
        assert!(!c.check(&[1, 2, 3]).unwrap());
        assert!(!c.check(&[1]).unwrap());
    }

    #[test]
    fn checker_json_shape() {
        let s = CheckerSpec::ReferenceMatch {
            reference: Some(vec![104, 105]),
        };
        assert_eq!(
            serde_json::to_string(&s).unwrap(),
            r#"{"type":"reference_match","reference":[104,105]}"#
        );
        let e: CheckerSpec =
            serde_json::from_str(r#"{"type":"external_command","argv":["true"]}"#).unwrap();
        assert!(matches!(e, CheckerSpec::ExternalCommand { .. }));
    }

    #[cfg(unix)]
    #[test]
    fn external_command_exit_status() {
        let pass = ExternalCommand::new(vec!["true".into()], Duration::from_secs(5), cfg()).unwrap();
        assert!(pass.check(&[104]).unwrap());
        let fail = ExternalCommand::new(vec!["false".into()], Duration::from_secs(5), cfg()).unwrap();
        assert!(!fail.check(&[104]).unwrap());
        // stdin carries the decoded completion
        let grep = ExternalCommand::new(
            vec!["grep".into(), "-q".into(), "hi".into()],
            Duration::from_secs(5),
            cfg(),
        )
        .unwrap();
        assert!(grep.check(&cfg().encode("hi")[1..]).unwrap());
        assert!(!grep.check(&cfg().encode("ho")[1..]).unwrap());
    }

    #[cfg(unix)]
    #[test]
    fn external_command_timeout_fails() {
        let slow = ExternalCommand::new(
            vec!["sleep".into(), "5".into()],
            Duration::from_millis(100),
            cfg(),
        )
        .unwrap();
        assert!(!slow.check(&[]).unwrap());
    }

    #[test]
    fn missing_program_is_checker_error() {
        let c = ExternalCommand::new(
            vec!["/definitely/not/here".into()],
            Duration::from_secs(1),
            cfg(),
        )
        .unwrap();
        assert!(matches!(c.check(&[]), Err(Error::Checker(_))));
    }
}
