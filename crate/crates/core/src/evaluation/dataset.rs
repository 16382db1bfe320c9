//! JSON-lines task datasets.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tracing::PromptPair;

use super::checker::CheckerSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub category: String,
    pub prompt_ori: String,
    pub prompt_pert: String,
    pub checker: CheckerSpec,
}

impl TaskRecord {
    pub fn pair(&self) -> PromptPair {
        PromptPair {
            ori: self.prompt_ori.clone(),
            pert: self.prompt_pert.clone(),
        }
    }
}

pub fn validate_tasks(tasks: &[TaskRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for t in tasks {
        if !seen.insert(t.task_id.as_str()) {
            return Err(Error::Format(format!("duplicate task_id {:?}", t.task_id)));
        }
        if t.prompt_ori.is_empty() || t.prompt_pert.is_empty() {
            return Err(Error::Format(format!("task {:?} has an empty prompt", t.task_id)));
        }
    }
    Ok(())
}

pub fn parse_jsonl(text: &str) -> Result<Vec<TaskRecord>> {
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: TaskRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("dataset line {}: {e}", i + 1)))?;
        tasks.push(t);
    }
    validate_tasks(&tasks)?;
    Ok(tasks)
}

pub fn to_jsonl(tasks: &[TaskRecord]) -> Result<String> {
    let mut s = String::new();
    for t in tasks {
        s.push_str(&serde_json::to_string(t)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TaskRecord>> {
    parse_jsonl(&fs::read_to_string(path)?)
}

pub fn write_dataset(path: impl AsRef<Path>, tasks: &[TaskRecord]) -> Result<()> {
    validate_tasks(tasks)?;
    fs::write(path, to_jsonl(tasks)?)?;
    Ok(())
}

/// Categories in order of first appearance.
pub fn categories(tasks: &[TaskRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in tasks {
        if !out.contains(&t.category) {
            out.push(t.category.clone());
        }
    }
    out
}
