pub mod eval;
pub mod finetune;
pub mod panel;
pub mod segment;
pub mod toy;
pub mod weak;

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::PartialFailure;

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

#[derive(Debug, Serialize)]
pub(crate) struct ItemStatus {
    pub name: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Logs failures, writes `status.json` and turns the batch outcome into a
/// result: a lone failed input returns its own error, a partly failed batch
/// a [`PartialFailure`].
pub(crate) fn finish_batch(out_dir: &Path, results: Vec<(String, Result<()>)>) -> Result<()> {
    let total = results.len();
    let mut statuses = Vec::with_capacity(total);
    let mut errors = Vec::new();
    for (name, r) in results {
        match r {
            Ok(()) => statuses.push(ItemStatus { name, ok: true, error: None }),
            Err(e) => {
                log::error!("{name}: {e:#}");
                statuses.push(ItemStatus {
                    name,
                    ok: false,
                    error: Some(format!("{e:#}")),
                });
                errors.push(e);
            }
        }
    }
    write_json(&out_dir.join("status.json"), &statuses)?;
    match errors.len() {
        0 => Ok(()),
        1 if total == 1 => Err(errors.pop().expect("one error")),
        failed => Err(PartialFailure { failed, total }.into()),
    }
}
