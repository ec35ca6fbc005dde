//! On-disk formats: float maps with JSON sidecars, mask PNGs, heat
//! overlays and parameter blobs.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::attribution::SaliencyMap;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::mask::BinaryMask;
use crate::weak::UncertaintyMap;

const PARAMS_MAGIC: &[u8; 4] = b"PSGP";

/// `name.sal` → `name.sal.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Row-major little-endian `f32` dump of a map.
pub fn write_f32_map(path: impl AsRef<Path>, values: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_map(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != height * width * 4 {
        return Err(Error::Format(format!(
            "{}: {} bytes, expected {} for {height}x{width}",
            path.display(),
            bytes.len(),
            height * width * 4
        )));
    }
    let vals = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((height, width), vals).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SaliencySidecar {
    height: usize,
    width: usize,
    prompt_id: String,
    gamma: f64,
    steps: usize,
    seed: u64,
}

/// Writes `path` (float32 values) and `path.json` (metadata).
pub fn save_saliency(path: impl AsRef<Path>, sal: &SaliencyMap) -> Result<()> {
    let path = path.as_ref();
    write_f32_map(path, &sal.values)?;
    write_json(
        &sidecar_path(path),
        &SaliencySidecar {
            height: sal.height(),
            width: sal.width(),
            prompt_id: sal.prompt_id.clone(),
            gamma: sal.gamma,
            steps: sal.steps,
            seed: sal.seed,
        },
    )
}

pub fn load_saliency(path: impl AsRef<Path>) -> Result<SaliencyMap> {
    let path = path.as_ref();
    let meta: SaliencySidecar = read_json(&sidecar_path(path))?;
    let values = read_f32_map(path, meta.height, meta.width)?;
    let mut sal = SaliencyMap::from_values(values)?;
    sal.prompt_id = meta.prompt_id;
    sal.gamma = meta.gamma;
    sal.steps = meta.steps;
    sal.seed = meta.seed;
    Ok(sal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct UncertaintySidecar {
    height: usize,
    width: usize,
    class_count: usize,
    units: String,
}

/// Writes `path` (float32 entropies, nats) and `path.json`.
pub fn save_uncertainty(path: impl AsRef<Path>, unc: &UncertaintyMap) -> Result<()> {
    let path = path.as_ref();
    write_f32_map(path, &unc.entropy)?;
    let (height, width) = unc.entropy.dim();
    write_json(
        &sidecar_path(path),
        &UncertaintySidecar {
            height,
            width,
            class_count: unc.class_count,
            units: "nats".into(),
        },
    )
}

pub fn load_uncertainty(path: impl AsRef<Path>) -> Result<UncertaintyMap> {
    let path = path.as_ref();
    let meta: UncertaintySidecar = read_json(&sidecar_path(path))?;
    Ok(UncertaintyMap {
        entropy: read_f32_map(path, meta.height, meta.width)?,
        class_count: meta.class_count,
    })
}

/// 8-bit single-channel PNG, 0 for background and 255 for foreground.
pub fn save_mask_png(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }]));
    img.save(path.as_ref())?;
    Ok(())
}

/// Reads a mask image; any nonzero luminance is foreground.
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(BinaryMask::from_fn(h as usize, w as usize, |r, c| img.get_pixel(c as u32, r as u32)[0] > 0))
}

/// Blue→cyan→yellow→red ramp for `t` in `[0, 1]`.
pub fn heat_color(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 0.5],
        [0.0, 0.5, 1.0],
        [0.5, 1.0, 0.5],
        [1.0, 0.8, 0.0],
        [0.8, 0.0, 0.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    std::array::from_fn(|k| ((STOPS[i][k] + (STOPS[i + 1][k] - STOPS[i][k]) * f) * 255.0).round() as u8)
}

/// Colorizes `values` over `[lo, hi]`.
pub fn heatmap_image(values: &Array2<f64>, lo: f64, hi: f64) -> RgbImage {
    let (h, w) = values.dim();
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(heat_color((values[[y as usize, x as usize]] - lo) / span)))
}

/// Blends a heat map over a decoded image with opacity `alpha`.
pub fn heat_overlay(image: &ImageTensor, values: &Array2<f64>, lo: f64, hi: f64, alpha: f64) -> Result<RgbImage> {
    if (image.height(), image.width()) != values.dim() {
        return Err(Error::Shape(format!(
            "overlay {:?} on {}x{} image",
            values.dim(),
            image.height(),
            image.width()
        )));
    }
    let base = image.to_rgb8();
    let heat = heatmap_image(values, lo, hi);
    Ok(RgbImage::from_fn(base.width(), base.height(), |x, y| {
        let (b, hc) = (base.get_pixel(x, y), heat.get_pixel(x, y));
        Rgb(std::array::from_fn(|k| {
            ((1.0 - alpha) * b[k] as f64 + alpha * hc[k] as f64).round().clamp(0.0, 255.0) as u8
        }))
    }))
}

pub fn save_heat_overlay(path: impl AsRef<Path>, image: &ImageTensor, values: &Array2<f64>, lo: f64, hi: f64) -> Result<()> {
    heat_overlay(image, values, lo, hi, 0.5)?.save(path.as_ref())?;
    Ok(())
}

/// Serializes tensors as: magic `PSGP`, `u32` count, then per tensor a
/// `u32` rank, `u64` dims and little-endian `f64` values.
pub fn write_params(path: impl AsRef<Path>, tensors: &[ArrayD<f64>]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: impl AsRef<Path>) -> Result<Vec<ArrayD<f64>>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated parameter file"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != PARAMS_MAGIC {
        return Err(bad("not a parameter file"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        let vals = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(ArrayD::from_shape_vec(IxDyn(&shape), vals).map_err(|e| bad(&e.to_string()))?);
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok(tensors)
}
