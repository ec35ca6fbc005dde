use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use promptseg_core::io::load_mask_png;
use promptseg_core::metrics::{retrieval_protocol, SegScore, SegSummary};

use super::write_json;
use crate::config::RunConfig;
use crate::dataset::{list_images, load_captioned, stem};
use crate::InputError;

pub fn seg(cfg: &RunConfig, pred: &Path, gt: &Path, tolerance: Option<u32>, pred_suffix: &str) -> Result<()> {
    let tolerance = tolerance.unwrap_or(cfg.eval.nsd_tolerance);
    for d in [pred, gt] {
        if !d.is_dir() {
            bail!(InputError(format!("directory {} does not exist", d.display())));
        }
    }
    let gts = list_images(gt)?;
    if gts.is_empty() {
        bail!(InputError(format!("no masks in {}", gt.display())));
    }
    let mut csv = String::from("name,dsc,nsd\n");
    let mut scores = Vec::with_capacity(gts.len());
    for g in &gts {
        let name = stem(g);
        let candidates = [pred.join(format!("{name}{pred_suffix}")), pred.join(g.file_name().expect("listed file"))];
        let Some(p) = candidates.iter().find(|c| c.is_file()) else {
            bail!(InputError(format!("no prediction for {} in {}", name, pred.display())));
        };
        let a = load_mask_png(p).map_err(|e| InputError(e.to_string()))?;
        let b = load_mask_png(g).map_err(|e| InputError(e.to_string()))?;
        let s = SegScore::compute(&a, &b, tolerance).map_err(|e| InputError(format!("{name}: {e}")))?;
        writeln!(csv, "{name},{:.6},{:.6}", s.dsc, s.nsd).expect("writing to a String");
        scores.push(s);
    }
    let summary = SegSummary::from_scores(&scores, tolerance);
    let out = &cfg.out_dir;
    cfg.echo(out)?;
    let p = out.join("seg_scores.csv");
    std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?;
    write_json(&out.join("seg_summary.json"), &summary)?;
    log::info!(
        "DSC {:.2} ± {:.2}, NSD {:.2} ± {:.2} over {} masks (tolerance {tolerance} px)",
        summary.dsc_mean,
        summary.dsc_std,
        summary.nsd_mean,
        summary.nsd_std,
        summary.n
    );
    Ok(())
}

pub fn retrieval(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: Option<&Path>,
    runs: Option<usize>,
    batch_size: Option<usize>,
) -> Result<()> {
    let pairs = load_captioned(data)?;
    let enc = cfg.encoder(checkpoint)?;
    let runs = runs.unwrap_or(cfg.eval.runs);
    let bs = batch_size.unwrap_or(cfg.eval.batch_size);
    let out = &cfg.out_dir;
    cfg.echo(out)?;
    let report = cfg
        .thread_pool()?
        .install(|| retrieval_protocol(&enc, &pairs, runs, bs, cfg.seed))
        .map_err(|e| match e {
            promptseg_core::Error::InvalidArgument(m) => anyhow::Error::new(InputError(m)),
            other => other.into(),
        })?;
    write_json(&out.join("retrieval.json"), &report)?;
    log::info!(
        "top-1 image→text {:.2}%, text→image {:.2}%",
        report.top1_i2t.mean,
        report.top1_t2i.mean
    );
    Ok(())
}
