//! Side-by-side figure strips: input | saliency | coarse | zero-shot,
//! then weak | uncertainty when available.

use anyhow::{bail, Result};
use image::{Rgb, RgbImage};
use ndarray::Array2;
use promptseg_core::io::heat_overlay;
use promptseg_core::{BinaryMask, ImageTensor};

const GAP: u32 = 2;
const MASK_COLOR: [u8; 3] = [40, 220, 90];
const MASK_ALPHA: f64 = 0.5;

#[derive(Debug, Default)]
pub struct PanelParts<'a> {
    pub saliency: Option<&'a Array2<f64>>,
    pub coarse: Option<&'a BinaryMask>,
    pub zero_shot: Option<&'a BinaryMask>,
    pub weak: Option<&'a BinaryMask>,
    /// Entropy map and its maximum (ln of the class count).
    pub uncertainty: Option<(&'a Array2<f64>, f64)>,
}

pub fn mask_overlay(image: &ImageTensor, mask: &BinaryMask) -> Result<RgbImage> {
    if mask.dim() != (image.height(), image.width()) {
        bail!("mask {:?} does not match image {}x{}", mask.dim(), image.height(), image.width());
    }
    let mut out = image.to_rgb8();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get(y as usize, x as usize) {
            for k in 0..3 {
                px[k] = ((1.0 - MASK_ALPHA) * px[k] as f64 + MASK_ALPHA * MASK_COLOR[k] as f64).round() as u8;
            }
        }
    }
    Ok(out)
}

pub fn hstack(tiles: &[RgbImage]) -> RgbImage {
    let h = tiles.iter().map(|t| t.height()).max().unwrap_or(0);
    let w = tiles.iter().map(|t| t.width()).sum::<u32>() + GAP * tiles.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for t in tiles {
        image::imageops::replace(&mut out, t, x0 as i64, 0);
        x0 += t.width() + GAP;
    }
    out
}

pub fn build(image: &ImageTensor, parts: &PanelParts<'_>) -> Result<RgbImage> {
    let mut tiles = vec![image.to_rgb8()];
    if let Some(s) = parts.saliency {
        tiles.push(heat_overlay(image, s, 0.0, 1.0, 0.6)?);
    }
    for m in [parts.coarse, parts.zero_shot, parts.weak].into_iter().flatten() {
        tiles.push(mask_overlay(image, m)?);
    }
    if let Some((u, max)) = parts.uncertainty {
        tiles.push(heat_overlay(image, u, 0.0, max, 0.6)?);
    }
    Ok(hstack(&tiles))
}
