//! Dataset directories: `images/`, optional `masks/` with matching file
//! names, optional `prompts/manifest.json` and `captions.tsv`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use promptseg_core::io::load_mask_png;
use promptseg_core::prompts::read_captions;
use promptseg_core::{BinaryMask, ImageTensor, TextPrompt};

use crate::InputError;

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files of `dir` in name order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| InputError(format!("cannot read {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let p = entry?.path();
        if p.is_file() && is_image(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// A single image file, or every image in a directory.
pub fn inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let v = list_images(path)?;
        if v.is_empty() {
            bail!(InputError(format!("no images in {}", path.display())));
        }
        Ok(v)
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        bail!(InputError(format!("input {} does not exist", path.display())))
    }
}

/// File name without its final extension.
pub fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn require_dir(p: &Path) -> Result<()> {
    if !p.is_dir() {
        bail!(InputError(format!("data directory {} does not exist", p.display())));
    }
    Ok(())
}

/// `(name, image, mask)` for every image with a mask of the same file name.
pub fn load_pairs(root: &Path, masks: Option<&Path>) -> Result<Vec<(String, ImageTensor, BinaryMask)>> {
    require_dir(root)?;
    let mask_dir = masks.map(Path::to_path_buf).unwrap_or_else(|| root.join("masks"));
    require_dir(&mask_dir)?;
    let mut out = Vec::new();
    for img_path in list_images(&root.join("images"))? {
        let name = img_path.file_name().expect("listed file").to_owned();
        let mask_path = mask_dir.join(&name);
        if !mask_path.is_file() {
            bail!(InputError(format!("no mask {} for image {}", mask_path.display(), img_path.display())));
        }
        let img = ImageTensor::load(&img_path).map_err(|e| InputError(e.to_string()))?;
        let mask = load_mask_png(&mask_path).map_err(|e| InputError(e.to_string()))?;
        if mask.dim() != (img.height(), img.width()) {
            bail!(InputError(format!("{}: mask size differs from image", mask_path.display())));
        }
        out.push((stem(&img_path), img, mask));
    }
    for m in list_images(&mask_dir)? {
        if !root.join("images").join(m.file_name().expect("listed file")).is_file() {
            bail!(InputError(format!("mask {} has no matching image", m.display())));
        }
    }
    if out.is_empty() {
        bail!(InputError(format!("no images in {}", root.join("images").display())));
    }
    Ok(out)
}

/// Image/caption pairs listed in `captions.tsv`, in file order.
pub fn load_captioned(root: &Path) -> Result<Vec<(ImageTensor, TextPrompt)>> {
    require_dir(root)?;
    let rows = read_captions(root.join("captions.tsv")).map_err(|e| InputError(e.to_string()))?;
    rows.into_iter()
        .map(|(name, caption)| {
            let p = root.join("images").join(&name);
            let img = ImageTensor::load(&p).map_err(|e| InputError(e.to_string()))?;
            let text = TextPrompt::plain(caption).map_err(|e| InputError(format!("{name}: {e}")))?;
            Ok((img, text))
        })
        .collect()
}
