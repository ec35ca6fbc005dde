//! Promptable refiners: a deterministic mock and a subprocess adapter.

use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use super::components::connected_components;
use super::prompts::VisualPromptSet;
use super::BinaryMask;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Refines a coarse mask given visual prompts. Implementations must be safe
/// to call from several threads at once.
pub trait Refiner: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;

    fn refine(&self, image: &ImageTensor, prompts: &VisualPromptSet, coarse: &BinaryMask) -> Result<BinaryMask>;
}

/// Keeps the coarse pixels inside any box, plus the whole coarse component
/// under any point.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockRefiner;

pub fn make_mock_refiner() -> MockRefiner {
    MockRefiner
}

impl Refiner for MockRefiner {
    fn name(&self) -> &str {
        "mock"
    }

    fn refine(&self, _image: &ImageTensor, prompts: &VisualPromptSet, coarse: &BinaryMask) -> Result<BinaryMask> {
        let (h, w) = coarse.dim();
        let mut out = BinaryMask::zeros(h, w);
        if prompts.mode.uses_boxes() {
            for b in &prompts.boxes {
                if b[2] >= h || b[3] >= w || b[0] > b[2] || b[1] > b[3] {
                    return Err(Error::InvalidArgument(format!("box {b:?} outside {h}x{w} image")));
                }
                for r in b[0]..=b[2] {
                    for c in b[1]..=b[3] {
                        if coarse.get(r, c) {
                            out.set(r, c, true);
                        }
                    }
                }
            }
        }
        if prompts.mode.uses_points() && !prompts.points.is_empty() {
            let comps = connected_components(coarse);
            let mut wanted = vec![false; comps.len() + 1];
            for p in &prompts.points {
                if p[0] >= h || p[1] >= w {
                    return Err(Error::InvalidArgument(format!("point {p:?} outside {h}x{w} image")));
                }
                wanted[comps.labels[[p[0], p[1]]] as usize] = true;
            }
            wanted[0] = false;
            for ((r, c), &l) in comps.labels.indexed_iter() {
                if wanted[l as usize] {
                    out.set(r, c, true);
                }
            }
        }
        Ok(out)
    }
}

/// Runs `program <image.png> <prompts.json> <out.png>` and reads back the
/// mask (any nonzero pixel is foreground). Each call uses its own scratch
/// directory, so concurrent calls are safe when the program is.
#[derive(Debug, Clone)]
pub struct ExternalRefiner {
    name: String,
    program: PathBuf,
    scratch: PathBuf,
}

static CALLS: AtomicU64 = AtomicU64::new(0);

impl ExternalRefiner {
    pub fn new(name: impl Into<String>, program: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            program: program.into(),
            scratch: std::env::temp_dir(),
        }
    }

    pub fn with_scratch_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.scratch = dir.into();
        self
    }
}

impl Refiner for ExternalRefiner {
    fn name(&self) -> &str {
        &self.name
    }

    fn refine(&self, image: &ImageTensor, prompts: &VisualPromptSet, coarse: &BinaryMask) -> Result<BinaryMask> {
        let n = CALLS.fetch_add(1, Ordering::Relaxed);
        let dir = self.scratch.join(format!("refiner-{}-{}-{n}", self.name, std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let run = || -> Result<BinaryMask> {
            let img_path = dir.join("image.png");
            let prompt_path = dir.join("prompts.json");
            let out_path = dir.join("out.png");
            image.save_png(&img_path)?;
            std::fs::write(&prompt_path, prompts.to_json()?).map_err(|e| Error::io(&prompt_path, e))?;
            let status = Command::new(&self.program)
                .arg(&img_path)
                .arg(&prompt_path)
                .arg(&out_path)
                .status()
                .map_err(|e| Error::External(format!("cannot run {}: {e}", self.program.display())))?;
            if !status.success() {
                return Err(Error::External(format!("{} exited with {status}", self.program.display())));
            }
            let mask = crate::io::load_mask_png(&out_path)?;
            if mask.dim() != coarse.dim() {
                return Err(Error::Shape(format!(
                    "refiner returned {:?}, expected {:?}",
                    mask.dim(),
                    coarse.dim()
                )));
            }
            Ok(mask)
        };
        let res = run();
        let _ = std::fs::remove_dir_all(&dir);
        res
    }
}
