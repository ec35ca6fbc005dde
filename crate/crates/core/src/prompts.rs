//! Text prompts, caption cleaning and the on-disk prompt/caption formats.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Captions shorter than this (after cleaning) are dropped.
pub const MIN_CAPTION_CHARS: usize = 20;

/// Prompt configuration, from a bare class name (P0) up to ensembles of
/// subtype-specific descriptions (P5).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptConfig {
    P0,
    P1,
    P2,
    P3,
    P4,
    P5,
}

impl PromptConfig {
    pub const ALL: [PromptConfig; 6] = [
        PromptConfig::P0,
        PromptConfig::P1,
        PromptConfig::P2,
        PromptConfig::P3,
        PromptConfig::P4,
        PromptConfig::P5,
    ];

    /// P4 and P5 average many prompts; the rest use a single line.
    pub fn is_ensemble(self) -> bool {
        matches!(self, PromptConfig::P4 | PromptConfig::P5)
    }

    /// P1, P3 and P5 name a subtype of the target.
    pub fn is_class_specific(self) -> bool {
        matches!(self, PromptConfig::P1 | PromptConfig::P3 | PromptConfig::P5)
    }
}

impl fmt::Display for PromptConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", *self as u8)
    }
}

impl FromStr for PromptConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P0" => Ok(PromptConfig::P0),
            "P1" => Ok(PromptConfig::P1),
            "P2" => Ok(PromptConfig::P2),
            "P3" => Ok(PromptConfig::P3),
            "P4" => Ok(PromptConfig::P4),
            "P5" => Ok(PromptConfig::P5),
            other => Err(Error::InvalidArgument(format!(
                "unknown prompt configuration '{other}' (expected P0..P5)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub text: String,
    pub class_label: Option<String>,
    pub config: PromptConfig,
}

impl TextPrompt {
    pub fn new(text: impl Into<String>, class_label: Option<String>, config: PromptConfig) -> Result<Self> {
        let text = text.into();
        if strip_special(&text).trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "prompt text is empty after cleaning: {text:?}"
            )));
        }
        Ok(Self {
            text,
            class_label,
            config,
        })
    }

    /// Unlabeled P0 prompt, convenient for captions and tests.
    pub fn plain(text: impl Into<String>) -> Result<Self> {
        Self::new(text, None, PromptConfig::P0)
    }
}

fn is_allowed(c: char) -> bool {
    c.is_alphabetic() || c.is_ascii_digit() || c == ' ' || ".,;:()%-/".contains(c)
}

fn strip_special(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .filter(|&c| is_allowed(c))
        .collect()
}

/// Removes special characters, trims, and drops captions shorter than
/// [`MIN_CAPTION_CHARS`].
///
/// Whitespace of any kind becomes a plain space; everything outside
/// letters, digits, `.,;:()%-/` and space is deleted.
pub fn clean_caption(text: &str) -> Option<String> {
    let cleaned = strip_special(text);
    let cleaned = cleaned.trim();
    (cleaned.chars().count() >= MIN_CAPTION_CHARS).then(|| cleaned.to_string())
}

/// Reads a prompt file: one prompt per non-blank line.
pub fn read_prompt_file(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if lines.is_empty() {
        return Err(Error::Empty(format!("prompt file {} has no prompts", path.display())));
    }
    Ok(lines)
}

/// `configuration → class label → prompt file`, as stored in `manifest.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptManifest {
    pub entries: BTreeMap<PromptConfig, BTreeMap<String, PathBuf>>,
}

impl PromptManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: PromptManifest = serde_json::from_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }

    pub fn classes(&self, config: PromptConfig) -> Vec<&str> {
        self.entries
            .get(&config)
            .map(|m| m.keys().map(String::as_str).collect())
            .unwrap_or_default()
    }

    /// Prompts for one configuration and class. With `class_label = None`
    /// the configuration must list exactly one class.
    pub fn prompts(&self, base: &Path, config: PromptConfig, class_label: Option<&str>) -> Result<Vec<TextPrompt>> {
        let by_class = self
            .entries
            .get(&config)
            .ok_or_else(|| Error::InvalidArgument(format!("manifest has no entry for {config}")))?;
        let (label, file) = match class_label {
            Some(label) => by_class
                .get_key_value(label)
                .ok_or_else(|| Error::InvalidArgument(format!("manifest {config} has no class '{label}'")))?,
            None if by_class.len() == 1 => by_class.iter().next().unwrap(),
            None => {
                return Err(Error::InvalidArgument(format!(
                    "manifest {config} lists {} classes; pick one",
                    by_class.len()
                )))
            }
        };
        read_prompt_file(base.join(file))?
            .into_iter()
            .map(|line| TextPrompt::new(line, Some(label.clone()), config))
            .collect()
    }
}

/// Reads `filename<TAB>caption` lines. Blank lines are skipped.
pub fn read_captions(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, caption) = line.split_once('\t').ok_or_else(|| {
            Error::Format(format!("{}:{}: expected filename<TAB>caption", path.display(), lineno + 1))
        })?;
        out.push((name.trim().to_string(), caption.to_string()));
    }
    Ok(out)
}

pub fn write_captions(path: impl AsRef<Path>, rows: &[(String, String)]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (name, caption) in rows {
        text.push_str(name);
        text.push('\t');
        text.push_str(caption);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
