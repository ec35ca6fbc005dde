//! From saliency to a refined segmentation: Otsu binarization, component
//! confidence filtering, prompt extraction and refinement.

pub mod components;
pub mod otsu;
pub mod prompts;
pub mod refiner;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::attribution::{compute_saliency_sized, BottleneckConfig, SaliencyMap};
use crate::embedding::Encoder;
use crate::error::{Error, Result, StageExt};
use crate::image::ImageTensor;

pub use components::{connected_components, filter_components, score_components, ComponentSet};
pub use otsu::{otsu_binarize, OtsuResult};
pub use prompts::{extract_prompts, PromptMode, VisualPromptSet};
pub use refiner::{make_mock_refiner, ExternalRefiner, MockRefiner, Refiner};

/// A binary image, indexed `(row, col)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    values: Array2<bool>,
}

impl BinaryMask {
    pub fn new(values: Array2<bool>) -> Self {
        Self { values }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(Array2::from_elem((height, width), false))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self::new(Array2::from_shape_fn((height, width), |(r, c)| f(r, c)))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.values[[r, c]]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.values[[r, c]] = v;
    }

    pub fn values(&self) -> &Array2<bool> {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// True where both masks are set; shapes must match.
    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(Self::new(ndarray::Zip::from(&self.values).and(&other.values).map_collect(|&a, &b| a && b)))
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(Self::new(ndarray::Zip::from(&self.values).and(&other.values).map_collect(|&a, &b| a || b)))
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dim() == other.dim() && self.values.iter().zip(other.values.iter()).all(|(&a, &b)| !a || b)
    }

    pub fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!("mask {:?} vs {:?}", self.dim(), other.dim())));
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(|v| v as u8 as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Components need confidence strictly above this to be kept.
    pub eta_c: f64,
    /// Components smaller than this many pixels are dropped before scoring.
    pub min_component_size: usize,
    pub mode: PromptMode,
    pub points_per_component: usize,
    pub box_margin: usize,
    /// Seed for point sampling.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            eta_c: 0.5,
            min_component_size: 1,
            mode: PromptMode::Boxes,
            points_per_component: 1,
            box_margin: 0,
            seed: 0,
        }
    }
}

/// Every intermediate of a zero-shot run.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotOutput {
    pub mask: BinaryMask,
    pub coarse: BinaryMask,
    pub otsu: OtsuResult,
    pub components: ComponentSet,
    pub prompts: VisualPromptSet,
    pub saliency: SaliencyMap,
}

/// Runs the mask stages on an existing saliency map. `image` is the
/// decoded original the refiner sees; it must match the map's size.
pub fn segment_from_saliency(
    image: &ImageTensor,
    saliency: SaliencyMap,
    cfg: &PipelineConfig,
    refiner: &dyn Refiner,
) -> Result<ZeroShotOutput> {
    if (image.height(), image.width()) != saliency.values.dim() {
        return Err(Error::Shape(format!(
            "image {}x{} vs saliency {:?}",
            image.height(),
            image.width(),
            saliency.values.dim()
        ))
        .in_stage("otsu"));
    }
    let otsu = otsu_binarize(&saliency);
    let mut comps = connected_components(&otsu.mask).remove_small(cfg.min_component_size.max(1));
    comps.threshold = otsu.threshold;
    comps.degenerate = otsu.degenerate;
    if comps.is_empty() {
        // Everything was too small: fall back to the unfiltered components.
        comps = connected_components(&otsu.mask);
        comps.threshold = otsu.threshold;
        comps.degenerate = otsu.degenerate;
    }
    let scored = score_components(&comps, &saliency).stage("components")?;
    let kept = filter_components(&scored, cfg.eta_c).stage("components")?;
    let coarse = kept.kept_mask();
    let prompts =
        extract_prompts(&kept, cfg.mode, cfg.points_per_component, cfg.seed, cfg.box_margin).stage("prompts")?;
    let mask = refiner.refine(image, &prompts, &coarse).stage("refine")?;
    if mask.dim() != coarse.dim() {
        return Err(Error::Shape("refiner changed the mask size".into()).in_stage("refine"));
    }
    Ok(ZeroShotOutput {
        mask,
        coarse,
        otsu,
        components: kept,
        prompts,
        saliency,
    })
}

/// Text-prompted segmentation of a decoded image, end to end.
pub fn zero_shot_segment(
    image: &ImageTensor,
    enc: &dyn Encoder,
    text_embedding: ArrayView1<'_, f64>,
    btl_cfg: &BottleneckConfig,
    cfg: &PipelineConfig,
    refiner: &dyn Refiner,
) -> Result<ZeroShotOutput> {
    let prepared = enc.prepare(image).stage("saliency")?;
    let saliency = compute_saliency_sized(enc, &prepared, text_embedding, btl_cfg, image.height(), image.width())
        .stage("saliency")?;
    segment_from_saliency(image, saliency, cfg, refiner)
}
