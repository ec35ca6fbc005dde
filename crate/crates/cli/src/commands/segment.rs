use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array1;
use promptseg_core::io::{save_mask_png, save_saliency};
use promptseg_core::prompts::PromptManifest;
use promptseg_core::{ensemble_prompt_embedding, zero_shot_segment, Encoder, ImageTensor, TextPrompt};
use rayon::prelude::*;

use super::{create_dir, finish_batch};
use crate::config::RunConfig;
use crate::dataset::{inputs, stem};
use crate::{panel, InputError, TextArgs};

/// The text embedding to segment with and an identifier for it.
pub fn text_embedding(cfg: &RunConfig, enc: &dyn Encoder, args: &TextArgs) -> Result<(Array1<f64>, String)> {
    if let Some(pc) = args.prompt_config {
        let manifest = args.manifest.as_deref().expect("clap requires --manifest");
        let (m, base) = PromptManifest::load(manifest).map_err(|e| InputError(format!("manifest: {e}")))?;
        let prompts = m
            .prompts(&base, pc, args.class_label.as_deref())
            .map_err(|e| InputError(e.to_string()))?;
        let label = prompts.first().and_then(|p| p.class_label.clone()).unwrap_or_default();
        return Ok((ensemble_prompt_embedding(enc, &prompts)?, format!("{pc}:{label}")));
    }
    let text = match (&args.prompt, cfg.synthetic.planted.first()) {
        (Some(t), _) => t.clone(),
        (None, Some(c)) => c.prompt.clone(),
        (None, None) => bail!(InputError("no prompt given; use --prompt or --prompt-config".into())),
    };
    let prompt = TextPrompt::plain(text.clone()).map_err(|e| InputError(e.to_string()))?;
    Ok((enc.encode_text(&prompt)?, text))
}

pub fn run(cfg: &RunConfig, input: &Path, text: &TextArgs, checkpoint: Option<&Path>) -> Result<()> {
    let files = inputs(input)?;
    let enc = cfg.encoder(checkpoint)?;
    let (t, prompt_id) = text_embedding(cfg, &enc, text)?;
    let out = &cfg.out_dir;
    cfg.echo(out)?;
    let scratch = out.join("refiner_scratch");
    let refiner = cfg.refiner(&scratch);
    if cfg.refiner != "mock" {
        create_dir(&scratch)?;
    }
    let pool = cfg.thread_pool()?;
    let results: Vec<(String, Result<()>)> = pool.install(|| {
        files
            .par_iter()
            .map(|path| {
                let name = stem(path);
                let r = (|| -> Result<()> {
                    let image = ImageTensor::load(path).map_err(|e| InputError(e.to_string()))?;
                    let res = zero_shot_segment(&image, &enc, t.view(), &cfg.bottleneck, &cfg.pipeline, refiner.as_ref())
                        .with_context(|| format!("segmenting {}", path.display()))?;
                    let base = out.join(&name);
                    let with = |ext: &str| base.with_file_name(format!("{name}.{ext}"));
                    save_mask_png(with("mask.png"), &res.mask)?;
                    save_mask_png(with("coarse.png"), &res.coarse)?;
                    save_saliency(with("sal"), &res.saliency.clone().with_prompt_id(prompt_id.clone()))?;
                    let p = with("prompts.json");
                    std::fs::write(&p, res.prompts.to_json()? + "\n").with_context(|| format!("writing {}", p.display()))?;
                    let parts = panel::PanelParts {
                        saliency: Some(&res.saliency.values),
                        coarse: Some(&res.coarse),
                        zero_shot: Some(&res.mask),
                        ..Default::default()
                    };
                    panel::build(&image, &parts)?.save(with("panel.png"))?;
                    log::info!(
                        "{name}: {} foreground pixels, {} prompt boxes{}",
                        res.mask.count(),
                        res.prompts.boxes.len(),
                        if res.components.fallback { " (fallback component)" } else { "" }
                    );
                    Ok(())
                })();
                (name, r)
            })
            .collect()
    });
    if scratch.is_dir() {
        std::fs::remove_dir_all(&scratch).ok();
    }
    finish_batch(out, results)
}
