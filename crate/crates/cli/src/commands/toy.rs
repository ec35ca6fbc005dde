use std::path::Path;

use anyhow::Result;
use promptseg_core::finetune::FinetuneConfig;
use promptseg_core::io::save_mask_png;
use promptseg_core::prompts::{write_captions, PromptManifest};
use promptseg_core::synthetic::{paired_corpus, planted_shapes, render_planted_scene};
use promptseg_core::weak::WeakConfig;
use promptseg_core::{LossConfig, PatchRegion, PlantedConcept, PromptConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{create_dir, write_json};
use crate::config::RunConfig;

const SIDE: usize = 64;
const GRID: usize = 8;
const SHAPE_SIDE: usize = 32;

fn toy_config(concept: PlantedConcept) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synthetic.planted = vec![concept];
    cfg.finetune = FinetuneConfig {
        learning_rate: 20.0,
        decay_rate: 0.5,
        batch_size: 64,
        epochs: 5,
        split_fraction: 0.85,
        seed: 0,
        loss: LossConfig::default(),
    };
    cfg.weak = WeakConfig::toy();
    cfg
}

fn prompt_lines(pc: PromptConfig, text: &str) -> Vec<String> {
    match pc {
        PromptConfig::P0 => vec![text.to_string()],
        PromptConfig::P1 | PromptConfig::P4 => vec![format!("{text}."), text.to_uppercase()],
        _ => vec![text.to_string(), format!("{text}."), text.to_uppercase(), format!("{}!", text.to_uppercase())],
    }
}

/// Writes `scenes/` (planted scenes, masks, prompt manifest), `corpus/`
/// (captioned pairs), `shapes/` and `shapes_test/` (planted shapes) and a
/// `config.json` tying them together.
pub fn make_toy(dir: &Path, scenes: usize, pairs: usize, shapes: usize, seed: u64) -> Result<()> {
    let concept = PlantedConcept::new(PatchRegion {
        row: 2,
        col: 3,
        height: 3,
        width: 3,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_dir = dir.join("scenes");
    for sub in ["images", "masks", "prompts"] {
        create_dir(&scene_dir.join(sub))?;
    }
    for i in 0..scenes {
        let (img, mask) = render_planted_scene(&mut rng, SIDE, GRID, &concept, 0.03)?;
        img.save_png(scene_dir.join("images").join(format!("scene_{i:02}.png")))?;
        save_mask_png(scene_dir.join("masks").join(format!("scene_{i:02}.png")), &mask)?;
    }
    let mut manifest = PromptManifest::default();
    for pc in PromptConfig::ALL {
        let file = format!("{}.txt", pc.to_string().to_lowercase());
        let p = scene_dir.join("prompts").join(&file);
        std::fs::write(&p, prompt_lines(pc, &concept.prompt).join("\n") + "\n")?;
        manifest.entries.entry(pc).or_default().insert("target".into(), file.into());
    }
    write_json(&scene_dir.join("prompts").join("manifest.json"), &manifest)?;

    let corpus_dir = dir.join("corpus");
    create_dir(&corpus_dir.join("images"))?;
    let mut rows = Vec::with_capacity(pairs);
    for (i, p) in paired_corpus(seed, pairs, SIDE, GRID)?.into_iter().enumerate() {
        let name = format!("pair_{i:04}.png");
        p.image.save_png(corpus_dir.join("images").join(&name))?;
        rows.push((name, p.caption.text));
    }
    write_captions(corpus_dir.join("captions.tsv"), &rows)?;

    for (sub, n, s) in [("shapes", shapes, seed), ("shapes_test", 10, seed.wrapping_add(1))] {
        let d = dir.join(sub);
        create_dir(&d.join("images"))?;
        create_dir(&d.join("masks"))?;
        for (i, (img, mask)) in planted_shapes(s, n, SHAPE_SIDE)?.into_iter().enumerate() {
            img.save_png(d.join("images").join(format!("shape_{i:02}.png")))?;
            save_mask_png(d.join("masks").join(format!("shape_{i:02}.png")), &mask)?;
        }
    }
    write_json(&dir.join("config.json"), &toy_config(concept))?;
    log::info!("toy data written to {}", dir.display());
    Ok(())
}
