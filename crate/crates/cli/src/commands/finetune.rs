use std::path::Path;

use anyhow::Result;
use ndarray::ArrayD;
use promptseg_core::finetune::{finetune, TrainableEncoder};
use promptseg_core::io::write_params;
use promptseg_core::Error;
use serde::Serialize;

use super::{create_dir, write_json};
use crate::config::RunConfig;
use crate::dataset::load_captioned;

#[derive(Serialize)]
struct CheckpointMeta {
    epoch: usize,
    val_loss: Option<f64>,
    variant: &'static str,
}

fn projections<E: TrainableEncoder>(enc: &E) -> Vec<ArrayD<f64>> {
    let (wi, wt) = enc.projections();
    vec![wi.clone().into_dyn(), wt.clone().into_dyn()]
}

pub fn run(cfg: &RunConfig, data: &Path) -> Result<()> {
    let pairs = load_captioned(data)?;
    let enc = cfg.encoder(None)?;
    let out = &cfg.out_dir;
    cfg.echo(out)?;
    let variant = cfg.finetune.loss.variant.as_str();
    let pool = cfg.thread_pool()?;
    let res = pool.install(|| {
        finetune(&enc, &pairs, &cfg.finetune, |e, log| {
            let dir = out.join(format!("ckpt_epoch_{}", log.epoch));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_params(dir.join("params.bin"), &projections(e))?;
            let meta = CheckpointMeta {
                epoch: log.epoch,
                val_loss: log.val_loss.is_finite().then_some(log.val_loss),
                variant,
            };
            let meta_path = dir.join("meta.json");
            std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&meta_path, e))?;
            log::info!("epoch {}: train {:.6} val {:.6} lr {:.3e}", log.epoch, log.train_loss, log.val_loss, log.lr);
            Ok(())
        })
    })?;
    res.log.write_csv(out.join("train_log.csv"))?;
    let best = out.join("best");
    create_dir(&best)?;
    write_params(best.join("params.bin"), &projections(&res.best))?;
    write_json(
        &best.join("meta.json"),
        &CheckpointMeta {
            epoch: res.best_epoch,
            val_loss: res
                .log
                .epochs
                .get(res.best_epoch.wrapping_sub(1))
                .map(|e| e.val_loss)
                .filter(|v| v.is_finite()),
            variant,
        },
    )?;
    log::info!("best epoch {} written to {}", res.best_epoch, best.display());
    Ok(())
}
