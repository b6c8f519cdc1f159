//! Run configuration: one TOML file with `[model]`, `[task]` and `[train]` tables.

use std::path::{Path, PathBuf};

use mgru_core::network::ModelConfig;
use mgru_core::training::{TaskSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Relative paths are taken from the config file's directory.
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
}

/// A parsed config together with its source, for hashing and error anchoring.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub text: String,
    pub config: RunConfig,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("reading config {}", path.display()), e))?;
        Self::parse(path, text)
    }

    pub fn parse(path: &Path, text: String) -> Result<Self, CliError> {
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            line: e.span().map(|s| line_of_offset(&text, s.start)),
            message: e.message().to_string(),
        })?;
        if config.output_dir.is_relative() {
            if let Some(dir) = path.parent() {
                config.output_dir = dir.join(&config.output_dir);
            }
        }
        let loaded = LoadedConfig {
            path: path.to_path_buf(),
            text,
            config,
        };
        loaded.validate()?;
        Ok(loaded)
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        if c.train.learning_rate.is_nan() || c.train.learning_rate <= 0.0 {
            return Err(self.error_at("train", "learning_rate", format!(
                "learning_rate must be > 0, got {}",
                c.train.learning_rate
            )));
        }
        let checks: [(&str, Result<(), mgru_core::Error>); 3] = [
            ("model", c.model.validate()),
            ("task", c.task.validate()),
            ("train", c.train.validate()),
        ];
        for (section, result) in checks {
            if let Err(e) = result {
                let message = match e {
                    mgru_core::Error::InvalidConfig(m) => m,
                    other => other.to_string(),
                };
                let key = key_in_message(&message).to_string();
                return Err(self.error_at(section, &key, message));
            }
        }
        if c.model.input_dim != c.task.features {
            return Err(self.error_at("model", "input_dim", format!(
                "model input_dim {} does not match task features {}",
                c.model.input_dim, c.task.features
            )));
        }
        if c.model.output_dim != c.task.classes {
            return Err(self.error_at("model", "output_dim", format!(
                "model output_dim {} does not match task classes {}",
                c.model.output_dim, c.task.classes
            )));
        }
        Ok(())
    }

    pub fn error_at(&self, section: &str, key: &str, message: String) -> CliError {
        CliError::Config {
            path: self.path.clone(),
            line: find_key_line(&self.text, section, key),
            message: format!("[{section}] {message}"),
        }
    }
}

/// The key a validation message is about: its first word or a backquoted name.
fn key_in_message(message: &str) -> &str {
    if let Some(start) = message.find('`') {
        if let Some(len) = message[start + 1..].find('`') {
            return &message[start + 1..start + 1 + len];
        }
    }
    message.split([' ', ',']).next().unwrap_or("")
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// 1-based line of `key = …` inside `[section]`, else of the section header.
pub fn find_key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}
