//! Box and point prompts derived from kept components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::components::ComponentSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PromptMode {
    #[default]
    #[serde(rename = "boxes")]
    Boxes,
    #[serde(rename = "points")]
    Points,
    #[serde(rename = "boxes+points")]
    BoxesAndPoints,
}

impl PromptMode {
    pub fn uses_boxes(self) -> bool {
        matches!(self, PromptMode::Boxes | PromptMode::BoxesAndPoints)
    }

    pub fn uses_points(self) -> bool {
        matches!(self, PromptMode::Points | PromptMode::BoxesAndPoints)
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boxes" => Ok(PromptMode::Boxes),
            "points" => Ok(PromptMode::Points),
            "boxes+points" => Ok(PromptMode::BoxesAndPoints),
            _ => Err(Error::InvalidArgument(format!("unknown prompt mode '{s}'"))),
        }
    }
}

/// Inclusive boxes `[row_min, col_min, row_max, col_max]` and foreground
/// points `[row, col]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct VisualPromptSet {
    pub boxes: Vec<[usize; 4]>,
    pub points: Vec<[usize; 2]>,
    pub mode: PromptMode,
}

impl VisualPromptSet {
    /// Boxes as `(x_min, y_min, x_max, y_max)` with exclusive max corners.
    pub fn boxes_xyxy_exclusive(&self) -> Vec<[usize; 4]> {
        self.boxes.iter().map(|b| [b[1], b[0], b[3] + 1, b[2] + 1]).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One box per kept component (tight, grown by `box_margin` and clipped) and
/// up to `points_per_component` points drawn without replacement from each
/// kept component.
pub fn extract_prompts(
    comps: &ComponentSet,
    mode: PromptMode,
    points_per_component: usize,
    seed: u64,
    box_margin: usize,
) -> Result<VisualPromptSet> {
    if comps.kept.is_empty() {
        return Err(Error::Empty("no kept components to prompt from".into()));
    }
    let (h, w) = comps.labels.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = VisualPromptSet {
        mode,
        ..Default::default()
    };
    for &id in &comps.kept {
        let pixels = comps.pixels(id);
        if mode.uses_boxes() {
            let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
            for &(r, c) in &pixels {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
            out.boxes.push([
                r0.saturating_sub(box_margin),
                c0.saturating_sub(box_margin),
                (r1 + box_margin).min(h - 1),
                (c1 + box_margin).min(w - 1),
            ]);
        }
        if mode.uses_points() {
            let k = if points_per_component > pixels.len() {
                log::warn!(
                    "component {id} has {} pixels, fewer than the {points_per_component} points requested",
                    pixels.len()
                );
                pixels.len()
            } else {
                points_per_component
            };
            let mut picked = rand::seq::index::sample(&mut rng, pixels.len(), k).into_vec();
            picked.sort_unstable();
            out.points.extend(picked.into_iter().map(|i| [pixels[i].0, pixels[i].1]));
        }
    }
    Ok(out)
}
