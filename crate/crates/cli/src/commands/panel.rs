use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use promptseg_core::io::{load_mask_png, load_saliency, load_uncertainty};
use promptseg_core::ImageTensor;

use crate::config::RunConfig;
use crate::panel::{build, PanelParts};
use crate::InputError;

#[derive(Args, Debug)]
pub struct PanelArgs {
    #[arg(long)]
    image: PathBuf,
    /// `.sal` map written by `segment`.
    #[arg(long)]
    saliency: Option<PathBuf>,
    #[arg(long)]
    coarse: Option<PathBuf>,
    /// Zero-shot mask.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Mask from `predict`.
    #[arg(long)]
    weak: Option<PathBuf>,
    /// `.unc` map from `predict`.
    #[arg(long)]
    uncertainty: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

pub fn run(_cfg: &RunConfig, a: &PanelArgs) -> Result<()> {
    let bad = |e: promptseg_core::Error| InputError(e.to_string());
    let image = ImageTensor::load(&a.image).map_err(bad)?;
    let sal = a.saliency.as_ref().map(load_saliency).transpose().map_err(bad)?;
    let mask = |p: &Option<PathBuf>| p.as_ref().map(load_mask_png).transpose().map_err(bad);
    let (coarse, zero_shot, weak) = (mask(&a.coarse)?, mask(&a.mask)?, mask(&a.weak)?);
    let unc = a.uncertainty.as_ref().map(load_uncertainty).transpose().map_err(bad)?;
    let parts = PanelParts {
        saliency: sal.as_ref().map(|s| &s.values),
        coarse: coarse.as_ref(),
        zero_shot: zero_shot.as_ref(),
        weak: weak.as_ref(),
        uncertainty: unc.as_ref().map(|u| (&u.entropy, u.max_entropy())),
    };
    let img = build(&image, &parts).map_err(|e| InputError(format!("{e:#}")))?;
    img.save(&a.output).with_context(|| format!("writing {}", a.output.display()))?;
    Ok(())
}
