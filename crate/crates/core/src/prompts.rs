//! Instruction templates that wrap an input sentence before embedding.
//!
//! A template is a pattern with exactly one `[X]` placeholder. The seven
//! built-ins are compiled in; a TOML file of `name = "<pattern>"` records can
//! add or override entries.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PLACEHOLDER: &str = "[X]";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template {0:?} not found")]
    NotFound(String),
    #[error("template {name:?} must contain exactly one [X] placeholder (found {count})")]
    Placeholder { name: String, count: usize },
    #[error("template {0:?} has an empty pattern")]
    EmptyPattern(String),
    #[error("input text is empty")]
    EmptyText,
    #[error("input text contains the literal placeholder [X]")]
    AmbiguousText,
    #[error("template file: {0}")]
    File(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPosition {
    /// Instruction text follows the input: the last token is prompt text.
    Wrapped,
    /// Only punctuation follows the input.
    Prepended,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub pattern: String,
    pub position: PromptPosition,
}

/// Prompted string plus the byte range of the original text inside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptedText {
    pub text: String,
    pub content_span: Range<usize>,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, pattern: impl Into<String>) -> Result<Self, PromptError> {
        let name = name.into();
        let pattern = pattern.into();
        if pattern.trim().is_empty() {
            return Err(PromptError::EmptyPattern(name));
        }
        let count = pattern.matches(PLACEHOLDER).count();
        if count != 1 {
            return Err(PromptError::Placeholder { name, count });
        }
        let suffix = &pattern[pattern.find(PLACEHOLDER).unwrap() + PLACEHOLDER.len()..];
        let position = if suffix.chars().any(char::is_alphanumeric) {
            PromptPosition::Wrapped
        } else {
            PromptPosition::Prepended
        };
        Ok(Self {
            name,
            pattern,
            position,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.pattern[..self.pattern.find(PLACEHOLDER).unwrap()]
    }

    pub fn suffix(&self) -> &str {
        &self.pattern[self.pattern.find(PLACEHOLDER).unwrap() + PLACEHOLDER.len()..]
    }

    pub fn apply(&self, text: &str) -> Result<PromptedText, PromptError> {
        if text.is_empty() {
            return Err(PromptError::EmptyText);
        }
        if text.contains(PLACEHOLDER) {
            return Err(PromptError::AmbiguousText);
        }
        let prefix = self.prefix();
        let mut out = String::with_capacity(self.pattern.len() + text.len());
        out.push_str(prefix);
        out.push_str(text);
        out.push_str(self.suffix());
        Ok(PromptedText {
            text: out,
            content_span: prefix.len()..prefix.len() + text.len(),
        })
    }
}

/// (name, pattern) of the compiled-in templates.
pub const BUILTIN_PATTERNS: [(&str, &str); 7] = [
    ("EOL", "This sentence: \"[X]\" means in one word:"),
    (
        "PCoT",
        "After thinking step by step, this sentence: \"[X]\" means in one word:",
    ),
    ("SUM", "This sentence: \"[X]\" can be summarized as:"),
    ("CCW", "This sentence: \"[X]\" belongs to the following cluster:"),
    ("CCP", "Cluster the text: \"[X]\"."),
    (
        "Question",
        "Which cluster would you assign the sentence: \"[X]\" to?",
    ),
    ("CLS", "This sentence: \"[X]\" can be classified as:"),
];

pub fn builtin_templates() -> Vec<PromptTemplate> {
    BUILTIN_PATTERNS
        .iter()
        .map(|(n, p)| PromptTemplate::new(*n, *p).expect("built-in template is valid"))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PromptRegistry {
    templates: Vec<PromptTemplate>,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        Self {
            templates: builtin_templates(),
        }
    }
}

impl PromptRegistry {
    pub fn lookup(&self, name: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| PromptError::NotFound(name.to_string()))
    }

    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    /// Adds a template, replacing any existing one with the same name.
    pub fn insert(&mut self, template: PromptTemplate) {
        match self.templates.iter_mut().find(|t| t.name == template.name) {
            Some(slot) => *slot = template,
            None => self.templates.push(template),
        }
    }

    /// Built-ins overlaid with the records of a TOML template file.
    pub fn from_toml_str(src: &str) -> Result<Self, PromptError> {
        let table: BTreeMap<String, String> =
            toml::from_str(src).map_err(|e| PromptError::File(e.to_string()))?;
        let mut reg = Self::default();
        for (name, pattern) in table {
            reg.insert(PromptTemplate::new(name, pattern)?);
        }
        Ok(reg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let src = fs::read_to_string(path).map_err(|e| PromptError::File(e.to_string()))?;
        Self::from_toml_str(&src)
    }

    pub fn to_toml_string(&self) -> String {
        let table: BTreeMap<&str, &str> = self
            .templates
            .iter()
            .map(|t| (t.name.as_str(), t.pattern.as_str()))
            .collect();
        toml::to_string(&table).expect("string table serializes")
    }
}

pub fn lookup(name: &str) -> Result<PromptTemplate, PromptError> {
    PromptRegistry::default().lookup(name).cloned()
}
