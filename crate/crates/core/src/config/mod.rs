//! Channel configuration files (TOML, one file per channel) and assembly
//! into runnable channels.

mod assemble;
mod registry;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::Params;

pub use assemble::{assemble, check, AssemblyError, AssemblyErrors};
pub use registry::{Factory, ModuleRegistry, PassthroughTransform, RegistryError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub channel: ChannelSection,
    pub sources: Vec<ModuleEntry>,
    pub transforms: Vec<ModuleEntry>,
    pub publishers: Vec<ModuleEntry>,
    pub facts: Vec<FactEntry>,
    pub rules: Vec<RuleEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub id: String,
    pub period_s: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_retry_cap: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleEntry {
    pub name: String,
    pub implementation: String,
    #[serde(default)]
    pub consumes: Vec<String>,
    #[serde(default)]
    pub produces: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_s: Option<u64>,
    #[serde(default, skip_serializing_if = "Params::is_empty")]
    pub params: Params,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactEntry {
    pub name: String,
    pub expression: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleEntry {
    pub name: String,
    pub condition: String,
    pub actions: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub new_facts: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}{}: schema error at `{key_path}`: {message}", location_suffix(*.line, *.column))]
    Schema {
        path: PathBuf,
        key_path: String,
        line: Option<usize>,
        column: Option<usize>,
        message: String,
    },
}

fn location_suffix(line: Option<usize>, column: Option<usize>) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!(":{l}:{c}"),
        _ => String::new(),
    }
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.chars().count(), |nl| {
        before[nl + 1..].chars().count()
    }) + 1;
    (line, col)
}

impl ConfigDocument {
    /// Parses a document. `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| {
            let (line, column) = line_col(text, e.span().map_or(0, |s| s.start));
            ConfigError::Parse {
                path: path.to_path_buf(),
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key_path = e.path().to_string();
            let inner = e.into_inner();
            let (line, column) = match inner.span() {
                Some(s) => {
                    let (l, c) = line_col(text, s.start);
                    (Some(l), Some(c))
                }
                None => (None, None),
            };
            ConfigError::Schema {
                path: path.to_path_buf(),
                key_path,
                line,
                column,
                message: inner.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// Canonical text form; reloading it yields an equal document.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config document serializes")
    }
}

/// Channel files (`*.toml`) in a config directory, sorted by file name.
pub fn config_files(dir: &Path) -> Result<Vec<PathBuf>, ConfigError> {
    let io = |source| ConfigError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "toml") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
[channel]
id = "demo"
period_s = 60

[[sources]]
name = "feed"
implementation = "static_source"
consumes = []
produces = ["prices"]
period_s = 120
params = { spot = 0.1 }

[[transforms]]
name = "copy"
implementation = "passthrough"
consumes = ["prices"]
produces = ["prices_copy"]

[[publishers]]
name = "out"
implementation = "recorder"
consumes = ["prices_copy"]

[publishers.params]
mode = "all"
limits = { soft = 1, hard = [1, 2] }

[[facts]]
name = "cheap"
expression = "prices_copy.spot < 0.2"

[[rules]]
name = "go"
condition = "cheap"
actions = ["out"]
"#;

    #[test]
    fn minimal_document_loads() {
        let doc = ConfigDocument::parse(MINIMAL, Path::new("demo.toml")).unwrap();
        assert_eq!(doc.channel.id, "demo");
        assert_eq!(doc.sources.len(), 1);
        assert_eq!(doc.transforms.len(), 1);
        assert_eq!(doc.publishers.len(), 1);
        assert_eq!(doc.facts[0].expression, "prices_copy.spot < 0.2");
        assert_eq!(doc.rules[0].actions, vec!["out"]);
    }

    #[test]
    fn misspelled_section_names_the_key() {
        let text = MINIMAL.replace("[[transforms]]", "[[tranforms]]");
        let err = ConfigDocument::parse(&text, Path::new("x.toml")).unwrap_err();
        match err {
            ConfigError::Schema { message, .. } => {
                assert!(message.contains("tranforms"), "{message}")
            }
            other => panic!("expected schema error, got {other}"),
        }
    }

    #[test]
    fn missing_section_is_a_schema_error() {
        let text = MINIMAL.replace(
            "[[facts]]\nname = \"cheap\"\nexpression = \"prices_copy.spot < 0.2\"\n",
            "",
        );
        let err = ConfigDocument::parse(&text, Path::new("x.toml")).unwrap_err();
        assert!(
            matches!(err, ConfigError::Schema { ref message, .. } if message.contains("facts")),
            "{err}"
        );
    }

    #[test]
    fn syntax_errors_have_a_location() {
        let err = ConfigDocument::parse("[channel]\nid = \n", Path::new("x.toml")).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn wrong_type_reports_key_path() {
        let text = MINIMAL.replace("period_s = 60", "period_s = \"sixty\"");
        match ConfigDocument::parse(&text, Path::new("x.toml")).unwrap_err() {
            ConfigError::Schema { key_path, line, .. } => {
                assert_eq!(key_path, "channel.period_s");
                assert_eq!(line, Some(4));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn canonical_form_round_trips() {
        let doc = ConfigDocument::parse(MINIMAL, Path::new("x.toml")).unwrap();
        let again = ConfigDocument::parse(&doc.to_toml(), Path::new("y.toml")).unwrap();
        assert_eq!(doc, again);
        assert_eq!(doc.to_toml(), again.to_toml());
    }

    #[test]
    fn line_col_counts_from_one() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }
}
