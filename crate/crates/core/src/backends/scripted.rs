//! Fixture-driven mock. Each fixture line is
//! `{"mcq_id": "q1", "iteration": 2, "kind": "generator", "text": "..."}`.
//!
//! Lines sharing a key form a sequence indexed by evaluation attempt. A line
//! may use `"mcq_id": "*"` or omit `iteration` to match any question or any
//! iteration; exact keys win over wildcards.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};

use super::{BackendError, CallContext, Completion, TextBackend};
use crate::prompts::{PromptRole, PromptText};
use crate::types::GenParams;

pub const ANY_QUESTION: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKind {
    Generator,
    Evaluator,
}

impl From<PromptRole> for ScriptKind {
    fn from(role: PromptRole) -> Self {
        match role {
            PromptRole::Generation => ScriptKind::Generator,
            PromptRole::Evaluation => ScriptKind::Evaluator,
        }
    }
}

impl ScriptKind {
    fn name(self) -> &'static str {
        match self {
            ScriptKind::Generator => "generator",
            ScriptKind::Evaluator => "evaluator",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub mcq_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    pub kind: ScriptKind,
    pub text: String,
}

type Key = (String, Option<usize>, ScriptKind);

#[derive(Debug, Clone, Default)]
pub struct ScriptedMock {
    id: String,
    script: HashMap<Key, Vec<String>>,
}

impl ScriptedMock {
    pub fn new(id: impl Into<String>, entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut script: HashMap<Key, Vec<String>> = HashMap::new();
        for e in entries {
            script.entry((e.mcq_id, e.iteration, e.kind)).or_default().push(e.text);
        }
        Self { id: id.into(), script }
    }

    /// Reads a JSON-lines fixture; blank lines are ignored.
    pub fn from_reader<R: Read>(id: impl Into<String>, reader: R) -> Result<Self, BackendError> {
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| BackendError::Malformed(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(&line)
                .map_err(|e| BackendError::Malformed(format!("script line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(Self::new(id, entries))
    }

    /// Adds one entry, appending to any existing sequence for its key.
    pub fn push(&mut self, entry: ScriptEntry) {
        self.script
            .entry((entry.mcq_id, entry.iteration, entry.kind))
            .or_default()
            .push(entry.text);
    }

    fn lookup(&self, mcq_id: &str, iteration: usize, kind: ScriptKind) -> Option<&Vec<String>> {
        [
            (mcq_id, Some(iteration)),
            (mcq_id, None),
            (ANY_QUESTION, Some(iteration)),
            (ANY_QUESTION, None),
        ]
        .into_iter()
        .find_map(|(id, it)| self.script.get(&(id.to_string(), it, kind)))
    }
}

impl TextBackend for ScriptedMock {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        prompt: &PromptText,
        _params: &GenParams,
        ctx: &CallContext<'_>,
    ) -> Result<Completion, BackendError> {
        let kind = ScriptKind::from(prompt.role);
        self.lookup(ctx.mcq_id, ctx.iteration, kind)
            .and_then(|seq| seq.get(ctx.attempt as usize))
            .map(|text| Completion {
                text: text.clone(),
                attempts: 1,
            })
            .ok_or_else(|| BackendError::ScriptMiss {
                mcq_id: ctx.mcq_id.to_string(),
                iteration: ctx.iteration,
                role: kind.name(),
                attempt: ctx.attempt,
            })
    }
}
