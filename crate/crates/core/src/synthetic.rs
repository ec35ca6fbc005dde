//! A deterministic toy encoder pair plus scene and corpus generators with
//! known ground truth.
//!
//! Images are cut into a `grid × grid` patch lattice. Each patch is
//! summarized by its mean and standard deviation per channel (computed on
//! the de-standardized pixels) and lifted through normalized radial basis
//! features; a linear projection maps those into the shared space. Text is
//! tokenized into lowercase alphanumeric words, each word mapped to a
//! seeded Gaussian vector, averaged and linearly projected.
//!
//! A [`PlantedConcept`] ties one prompt to one color: its text embedding is
//! the projected feature of a flat patch of that color, so a scene with the
//! color painted into the concept's region has a known answer.

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{l2_normalize, Encoder, ImageFeatures};
use crate::error::{Error, Result};
use crate::image::{destandardize, ImageTensor};
use crate::mask::BinaryMask;
use crate::prompts::TextPrompt;

const STAT_WEIGHTS: [f64; 6] = [1.0, 1.0, 1.0, 0.5, 0.5, 0.5];
const RBF_WIDTH: f64 = 0.12;
const MAX_CENTER_STD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Shared embedding dimension.
    pub dim: usize,
    /// Number of radial basis features per patch.
    pub image_hidden: usize,
    /// Dimension of the per-word text vectors.
    pub text_hidden: usize,
    pub side: usize,
    pub grid: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 128,
            image_hidden: 128,
            text_hidden: 64,
            side: 64,
            grid: 8,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(Error::InvalidArgument(format!("synthetic encoder needs dim >= 4, got {}", self.dim)));
        }
        if self.image_hidden == 0 || self.text_hidden == 0 {
            return Err(Error::InvalidArgument("hidden sizes must be positive".into()));
        }
        if self.grid == 0 || self.side % self.grid != 0 || self.side < crate::image::MIN_SIDE {
            return Err(Error::InvalidArgument(format!(
                "side {} must be >= {} and divisible by grid {}",
                self.side,
                crate::image::MIN_SIDE,
                self.grid
            )));
        }
        Ok(())
    }
}

/// A rectangle on the patch grid: top-left patch plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRegion {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchRegion {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.height).contains(&r) && (self.col..self.col + self.width).contains(&c)
    }

    /// Pixel mask of the region for an image of `side` pixels cut into `grid` patches.
    pub fn pixel_mask(&self, side: usize, grid: usize) -> BinaryMask {
        let ps = side / grid;
        BinaryMask::from_fn(side, side, |r, c| self.contains(r / ps, c / ps))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConcept {
    pub region: PatchRegion,
    pub prompt: String,
    pub color: [f64; 3],
}

impl PlantedConcept {
    pub const DEFAULT_PROMPT: &'static str = "planted target";
    pub const DEFAULT_COLOR: [f64; 3] = [0.9, 0.2, 0.2];

    pub fn new(region: PatchRegion) -> Self {
        Self {
            region,
            prompt: Self::DEFAULT_PROMPT.into(),
            color: Self::DEFAULT_COLOR,
        }
    }

    /// Random region of 2–3 patches per side inside a `grid × grid` lattice.
    pub fn random(rng: &mut impl Rng, grid: usize) -> Self {
        let height = rng.random_range(2..=3.min(grid));
        let width = rng.random_range(2..=3.min(grid));
        let row = rng.random_range(0..=grid - height);
        let col = rng.random_range(0..=grid - width);
        Self::new(PatchRegion { row, col, height, width })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEncoder {
    cfg: SyntheticConfig,
    centers: Array2<f64>,
    w_img: Array2<f64>,
    w_txt: Array2<f64>,
    planted: Vec<PlantedConcept>,
}

/// Builds the toy encoder with the default layout and the given dimension.
pub fn make_synthetic_encoder(seed: u64, dim: usize, planted: Option<PlantedConcept>) -> Result<SyntheticEncoder> {
    let cfg = SyntheticConfig {
        seed,
        dim,
        ..SyntheticConfig::default()
    };
    SyntheticEncoder::new(cfg, planted.into_iter().collect())
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

pub(crate) fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl SyntheticEncoder {
    pub fn new(cfg: SyntheticConfig, planted: Vec<PlantedConcept>) -> Result<Self> {
        cfg.validate()?;
        for p in &planted {
            let r = p.region;
            if r.height == 0 || r.width == 0 || r.row + r.height > cfg.grid || r.col + r.width > cfg.grid {
                return Err(Error::InvalidArgument(format!("planted region {r:?} outside {0}x{0} grid", cfg.grid)));
            }
            if tokens(&p.prompt).is_empty() {
                return Err(Error::InvalidArgument("planted prompt has no words".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let h = cfg.image_hidden;
        let centers = Array2::from_shape_fn((h, 6), |(_, k)| {
            let u: f64 = rng.random();
            if k < 3 {
                u
            } else {
                u * MAX_CENTER_STD
            }
        });
        let w_img = gaussian_matrix(&mut rng, cfg.dim, h, 1.0 / (h as f64).sqrt());
        let w_txt = gaussian_matrix(&mut rng, cfg.dim, cfg.text_hidden, 1.0 / (cfg.text_hidden as f64).sqrt());
        Ok(Self {
            cfg,
            centers,
            w_img,
            w_txt,
            planted,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    pub fn planted(&self) -> &[PlantedConcept] {
        &self.planted
    }

    pub fn image_projection(&self) -> &Array2<f64> {
        &self.w_img
    }

    pub fn text_projection(&self) -> &Array2<f64> {
        &self.w_txt
    }

    /// Replaces both projection matrices; shapes must match the current ones.
    pub fn set_projections(&mut self, w_img: Array2<f64>, w_txt: Array2<f64>) -> Result<()> {
        if w_img.dim() != self.w_img.dim() || w_txt.dim() != self.w_txt.dim() {
            return Err(Error::Shape(format!(
                "projection shapes {:?}/{:?}, expected {:?}/{:?}",
                w_img.dim(),
                w_txt.dim(),
                self.w_img.dim(),
                self.w_txt.dim()
            )));
        }
        if w_img.iter().chain(w_txt.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projection parameters".into()));
        }
        self.w_img = w_img;
        self.w_txt = w_txt;
        Ok(())
    }

    /// Normalized radial basis features of one `[mean rgb, std rgb]` summary.
    fn rbf(&self, stats: &[f64; 6]) -> Array1<f64> {
        let denom = 2.0 * RBF_WIDTH * RBF_WIDTH;
        let phi = Array1::from_iter(self.centers.rows().into_iter().map(|c| {
            let d2: f64 = (0..6).map(|k| STAT_WEIGHTS[k] * (stats[k] - c[k]).powi(2)).sum();
            (-d2 / denom).exp()
        }));
        let n = phi.dot(&phi).sqrt();
        phi / (n + 1e-12)
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.channels() != 3 {
            return Err(Error::ChannelMismatch(image.channels()));
        }
        if image.height() != self.cfg.side || image.width() != self.cfg.side {
            return Err(Error::Shape(format!(
                "synthetic encoder expects {0}x{0} input, got {1}x{2}",
                self.cfg.side,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// `P × 6` per-patch color statistics of a prepared image.
    pub fn patch_stats(&self, image: &ImageTensor) -> Result<Array2<f64>> {
        self.check_image(image)?;
        let g = self.cfg.grid;
        let ps = self.cfg.side / g;
        let px = image.pixels();
        let n = (ps * ps) as f64;
        let mut out = Array2::zeros((g * g, 6));
        for pr in 0..g {
            for pc in 0..g {
                let block = px.slice(s![pr * ps..(pr + 1) * ps, pc * ps..(pc + 1) * ps, ..]);
                let mut sum = [0.0; 3];
                let mut sq = [0.0; 3];
                for r in 0..ps {
                    for c in 0..ps {
                        let v = destandardize([block[[r, c, 0]], block[[r, c, 1]], block[[r, c, 2]]]);
                        for k in 0..3 {
                            sum[k] += v[k];
                            sq[k] += v[k] * v[k];
                        }
                    }
                }
                let mut row = out.row_mut(pr * g + pc);
                for k in 0..3 {
                    let mean = sum[k] / n;
                    row[k] = mean;
                    row[3 + k] = (sq[k] / n - mean * mean).max(0.0).sqrt();
                }
            }
        }
        Ok(out)
    }

    /// `P × h` radial basis features of every patch.
    pub fn patch_base_features(&self, image: &ImageTensor) -> Result<Array2<f64>> {
        let stats = self.patch_stats(image)?;
        let mut out = Array2::zeros((stats.nrows(), self.cfg.image_hidden));
        for (i, st) in stats.rows().into_iter().enumerate() {
            let a = [st[0], st[1], st[2], st[3], st[4], st[5]];
            out.row_mut(i).assign(&self.rbf(&a));
        }
        Ok(out)
    }

    /// Mean patch feature; the pooled embedding is the normalized projection of this.
    pub fn image_base(&self, image: &ImageTensor) -> Result<Array1<f64>> {
        Ok(self.patch_base_features(image)?.mean_axis(Axis(0)).expect("grid is non-empty"))
    }

    fn token_vector(&self, token: &str) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.cfg.seed, token.as_bytes()));
        let scale = 1.0 / (self.cfg.text_hidden as f64).sqrt();
        Array1::from_shape_simple_fn(self.cfg.text_hidden, || {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
    }

    /// Mean word vector of the prompt, before projection.
    pub fn text_base(&self, prompt: &TextPrompt) -> Result<Array1<f64>> {
        let toks = tokens(&prompt.text);
        if toks.is_empty() {
            return Err(Error::InvalidArgument(format!("prompt {:?} has no words", prompt.text)));
        }
        let mut acc = Array1::zeros(self.cfg.text_hidden);
        for t in &toks {
            acc += &self.token_vector(t);
        }
        Ok(acc / toks.len() as f64)
    }

    fn planted_for(&self, text: &str) -> Option<&PlantedConcept> {
        let toks = tokens(text);
        self.planted.iter().find(|p| tokens(&p.prompt) == toks)
    }

    /// Shared-space embedding of a flat patch of `color`.
    pub fn color_embedding(&self, color: [f64; 3]) -> Result<Array1<f64>> {
        let phi = self.rbf(&[color[0], color[1], color[2], 0.0, 0.0, 0.0]);
        l2_normalize(self.w_img.dot(&phi).view())
    }
}

impl Encoder for SyntheticEncoder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn input_side(&self) -> usize {
        self.cfg.side
    }

    fn params_version(&self) -> String {
        let mut bytes = Vec::with_capacity(8 * (self.w_img.len() + self.w_txt.len()));
        for v in self.w_img.iter().chain(self.w_txt.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        format!("synthetic-{:016x}", fnv1a(self.cfg.seed, &bytes))
    }

    fn patch_grid(&self) -> (usize, usize) {
        (self.cfg.grid, self.cfg.grid)
    }

    fn encode_image(&self, image: &ImageTensor) -> Result<ImageFeatures> {
        let phi = self.patch_base_features(image)?;
        let patches = phi.dot(&self.w_img.t());
        let mean = patches.mean_axis(Axis(0)).expect("grid is non-empty");
        Ok(ImageFeatures {
            pooled: l2_normalize(mean.view())?,
            patches: Some(patches),
        })
    }

    fn encode_text(&self, prompt: &TextPrompt) -> Result<Array1<f64>> {
        if let Some(p) = self.planted_for(&prompt.text) {
            return self.color_embedding(p.color);
        }
        let psi = self.text_base(prompt)?;
        l2_normalize(self.w_txt.dot(&psi).view())
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Cluttered scene with the concept's color painted into its region.
///
/// Returns the decoded image (values in `[0, 1]`) and the region's pixel
/// mask. `region_noise` is the per-pixel noise inside the region; zero gives
/// a perfectly flat patch.
pub fn render_planted_scene(
    rng: &mut impl Rng,
    side: usize,
    grid: usize,
    concept: &PlantedConcept,
    region_noise: f64,
) -> Result<(ImageTensor, BinaryMask)> {
    if grid == 0 || side % grid != 0 {
        return Err(Error::InvalidArgument(format!("side {side} not divisible by grid {grid}")));
    }
    let mut px = ndarray::Array3::<f64>::zeros((side, side, 3));
    for v in px.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = clamp01(0.35 + 0.15 * z);
    }
    let scale = side as f64 / 64.0;
    for _ in 0..4 {
        let cy = rng.random_range(0.0..side as f64);
        let cx = rng.random_range(0.0..side as f64);
        let rad = rng.random_range(4.0..12.0) * scale;
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.6));
        for r in 0..side {
            for c in 0..side {
                if (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2) < rad * rad {
                    for k in 0..3 {
                        let z: f64 = rng.sample(StandardNormal);
                        px[[r, c, k]] = clamp01(color[k] + 0.05 * z);
                    }
                }
            }
        }
    }
    let mask = concept.region.pixel_mask(side, grid);
    for r in 0..side {
        for c in 0..side {
            if mask.get(r, c) {
                for k in 0..3 {
                    let z: f64 = if region_noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                    px[[r, c, k]] = clamp01(concept.color[k] + region_noise * z);
                }
            }
        }
    }
    Ok((ImageTensor::new(px)?, mask))
}

/// Named colors used by the paired corpus. The first six belong to class
/// `alpha`, the rest to class `beta`.
pub const PALETTE: [(&str, [f64; 3]); 12] = [
    ("crimson", [0.85, 0.15, 0.20]),
    ("amber", [0.95, 0.70, 0.10]),
    ("olive", [0.50, 0.55, 0.15]),
    ("teal", [0.10, 0.55, 0.55]),
    ("navy", [0.10, 0.15, 0.50]),
    ("violet", [0.55, 0.25, 0.75]),
    ("coral", [0.95, 0.50, 0.45]),
    ("lime", [0.60, 0.90, 0.30]),
    ("forest", [0.10, 0.40, 0.15]),
    ("sky", [0.45, 0.75, 0.95]),
    ("plum", [0.40, 0.10, 0.30]),
    ("sand", [0.85, 0.80, 0.60]),
];

const CLASS_WORDS: [&str; 2] = ["alpha", "beta"];

/// Image/caption pair from [`paired_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPair {
    pub image: ImageTensor,
    pub caption: TextPrompt,
    pub class: usize,
}

/// Two-cluster paired corpus of `n` mosaic images with descriptive captions.
///
/// The patch grid is split into 2×2-patch blocks. Each image draws three
/// colors from its class half of [`PALETTE`] and distributes the blocks
/// among them; the caption names the class and repeats each color word once
/// per block. Classes alternate with the index.
pub fn paired_corpus(seed: u64, n: usize, side: usize, grid: usize) -> Result<Vec<CorpusPair>> {
    if grid < 2 || grid % 2 != 0 || side % grid != 0 {
        return Err(Error::InvalidArgument(format!(
            "corpus needs an even grid dividing the side, got side {side}, grid {grid}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = side / grid;
    let blocks_per_side = grid / 2;
    let nblocks = blocks_per_side * blocks_per_side;
    if nblocks < 3 {
        return Err(Error::InvalidArgument("corpus grid too small".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let mut choices: Vec<usize> = (0..6).map(|c| c + 6 * class).collect();
        choices.shuffle(&mut rng);
        let colors = &choices[..3];
        let mut cuts: Vec<usize> = (1..nblocks).collect();
        cuts.shuffle(&mut rng);
        let (mut a, mut b) = (cuts[0], cuts[1]);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        let counts = [a, b - a, nblocks - b];
        let mut assign: Vec<usize> = colors
            .iter()
            .zip(counts)
            .flat_map(|(&c, k)| std::iter::repeat_n(c, k))
            .collect();
        assign.shuffle(&mut rng);

        let mut px = ndarray::Array3::<f64>::zeros((side, side, 3));
        let bs = 2 * ps;
        for (blk, &color_idx) in assign.iter().enumerate() {
            let base = PALETTE[color_idx].1;
            let jitter: [f64; 3] = std::array::from_fn(|_| 0.02 * rng.sample::<f64, _>(StandardNormal));
            let (br, bc) = (blk / blocks_per_side, blk % blocks_per_side);
            for r in br * bs..(br + 1) * bs {
                for c in bc * bs..(bc + 1) * bs {
                    for k in 0..3 {
                        let z: f64 = rng.sample(StandardNormal);
                        px[[r, c, k]] = clamp01(base[k] + jitter[k] + 0.03 * z);
                    }
                }
            }
        }
        let mut caption = format!("{} specimen showing", CLASS_WORDS[class]);
        for (&c, k) in colors.iter().zip(counts) {
            for _ in 0..k {
                caption.push(' ');
                caption.push_str(PALETTE[c].0);
            }
        }
        out.push(CorpusPair {
            image: ImageTensor::new(px)?,
            caption: TextPrompt::plain(caption)?,
            class,
        });
    }
    Ok(out)
}

/// `n` noisy scenes of `side × side` pixels, each holding one bright
/// ellipse on a textured background, with the ellipse as ground truth.
pub fn planted_shapes(seed: u64, n: usize, side: usize) -> Result<Vec<(ImageTensor, BinaryMask)>> {
    if side < 8 {
        return Err(Error::InvalidArgument(format!("side must be at least 8, got {side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let ry = rng.random_range(0.15..0.3) * s;
        let rx = rng.random_range(0.15..0.3) * s;
        let cy = rng.random_range(ry..s - ry);
        let cx = rng.random_range(rx..s - rx);
        let fg: [f64; 3] = std::array::from_fn(|k| [0.85, 0.7, 0.35][k] + rng.random_range(-0.05..0.05));
        let mask = BinaryMask::from_fn(side, side, |y, x| {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            dy * dy + dx * dx <= 1.0
        });
        let mut px = ndarray::Array3::<f64>::zeros((side, side, 3));
        for ((y, x, k), v) in px.indexed_iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            let base = if mask.get(y, x) { fg[k] } else { 0.3 + 0.1 * ((x + 2 * y) % 5) as f64 / 4.0 };
            *v = clamp01(base + 0.08 * z);
        }
        out.push((ImageTensor::new(px)?, mask));
    }
    Ok(out)
}
