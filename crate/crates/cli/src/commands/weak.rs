use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use promptseg_core::io::{save_heat_overlay, save_mask_png, save_uncertainty};
use promptseg_core::weak::{
    binarize_final, ensemble_predict, entropy_uncertainty, read_manifest, train_weak, CheckpointEnsemble,
    PseudoDataset, TinyUNet, UNetConfig,
};
use promptseg_core::ImageTensor;
use rayon::prelude::*;

use super::finish_batch;
use crate::config::RunConfig;
use crate::dataset::{inputs, load_pairs, stem};
use crate::InputError;

pub fn train(cfg: &RunConfig, data: &Path, labels: Option<&Path>) -> Result<()> {
    let pairs = load_pairs(data, labels)?;
    let provenance = labels.unwrap_or(&data.join("masks")).display().to_string();
    let dataset = PseudoDataset::new(pairs.into_iter().map(|(_, i, m)| (i, m)).collect(), provenance)?;
    let out = &cfg.out_dir;
    cfg.echo(out)?;
    let model = TinyUNet::new(cfg.weak.unet())?;
    let schedule = cfg.weak.schedule();
    let mut csv = String::from("epoch,loss,lr\n");
    let pool = cfg.thread_pool()?;
    let ens = pool.install(|| {
        train_weak(model, &dataset, &cfg.weak, |epoch, _, loss| {
            let lr = schedule.lr(epoch)?;
            writeln!(csv, "{epoch},{loss:.10},{lr:.10}").expect("writing to a String");
            log::info!("epoch {epoch}: loss {loss:.6} lr {lr:.3e}");
            Ok(())
        })
    })?;
    let dir = out.join("weak");
    ens.save(&dir, &cfg.weak.unet())?;
    let p = out.join("weak_log.csv");
    std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?;
    log::info!("{} checkpoints written to {}", ens.len(), dir.display());
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<CheckpointEnsemble<TinyUNet>> {
    let (_, model) = read_manifest(dir).map_err(|e| InputError(format!("ensemble {}: {e}", dir.display())))?;
    let unet: UNetConfig =
        serde_json::from_value(model).map_err(|e| InputError(format!("ensemble model description: {e}")))?;
    let template = TinyUNet::new(unet)?;
    Ok(CheckpointEnsemble::load(dir, &template).map_err(|e| InputError(e.to_string()))?)
}

pub fn predict(cfg: &RunConfig, ensemble: &Path, input: &Path) -> Result<()> {
    let files = inputs(input)?;
    let ens = load_ensemble(ensemble)?;
    let out = &cfg.out_dir;
    cfg.echo(out)?;
    let pool = cfg.thread_pool()?;
    let results: Vec<(String, Result<()>)> = pool.install(|| {
        files
            .par_iter()
            .map(|path| {
                let name = stem(path);
                let r = (|| -> Result<()> {
                    let image = ImageTensor::load(path).map_err(|e| InputError(e.to_string()))?;
                    let prob = ensemble_predict(&ens, &image)?;
                    let mask = binarize_final(&prob, cfg.weak.threshold)?;
                    let unc = entropy_uncertainty(&prob)?;
                    save_mask_png(out.join(format!("{name}.weak.png")), &mask)?;
                    save_uncertainty(out.join(format!("{name}.unc")), &unc)?;
                    save_heat_overlay(out.join(format!("{name}.unc.png")), &image, &unc.entropy, 0.0, unc.max_entropy())?;
                    Ok(())
                })();
                (name, r)
            })
            .collect()
    });
    finish_batch(out, results)
}
