//! Text-conditioned saliency via a per-patch information bottleneck.
//!
//! A mask `λ = sigmoid(θ)` over the patch grid mixes each patch embedding
//! with Gaussian noise fitted to the patch statistics:
//! `Z_p = λ_p·E_p + (1 − λ_p)·ε_p`. The mask is pushed up by relevance
//! (temperature-scaled cosine between the mean-pooled `Z` and the text
//! embedding, averaged over noise draws and scaled by the patch count) and
//! down by `γ` times the analytic KL divergence of `Z` from the noise prior.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::Encoder;
use crate::error::{Error, Result};
use crate::image::{resize_bilinear_2d, ImageTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BottleneckConfig {
    pub gamma: f64,
    pub steps: usize,
    pub step_size: f64,
    pub noise_samples: usize,
    pub seed: u64,
    /// Starting logit of every patch.
    pub init_logit: f64,
    /// Divides both the relevance and the compression term.
    pub temperature: f64,
    /// Reuse one set of noise draws and halve the step until the objective
    /// does not decrease.
    pub line_search: bool,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            steps: 10,
            step_size: 1.0,
            noise_samples: 10,
            seed: 0,
            init_logit: 5.0,
            temperature: 0.1,
            line_search: false,
        }
    }
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.noise_samples == 0 {
            return Err(Error::InvalidArgument("bottleneck steps and noise_samples must be >= 1".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) || !self.init_logit.is_finite() {
            return Err(Error::InvalidArgument("temperature must be > 0 and init_logit finite".into()));
        }
        Ok(())
    }
}

/// Per-pixel relevance in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub values: Array2<f64>,
    pub prompt_id: String,
    pub gamma: f64,
    pub steps: usize,
    pub seed: u64,
}

impl SaliencyMap {
    /// Wraps raw values (checked for range and finiteness).
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("saliency map is empty".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("saliency values must lie in [0, 1]".into()));
        }
        Ok(Self {
            values,
            prompt_id: String::new(),
            gamma: 0.0,
            steps: 0,
            seed: 0,
        })
    }

    pub fn with_prompt_id(mut self, id: impl Into<String>) -> Self {
        self.prompt_id = id.into();
        self
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn mass(&self) -> f64 {
        self.values.sum()
    }
}

/// Bilinear upsampling of a patch-grid mask to `height × width` pixels.
pub fn saliency_to_image_space(patch_mask: ArrayView2<'_, f64>, height: usize, width: usize) -> Array2<f64> {
    resize_bilinear_2d(patch_mask, height, width).mapv(|v| v.clamp(0.0, 1.0))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct Problem<'a> {
    e: ArrayView2<'a, f64>,
    t: ArrayView1<'a, f64>,
    mu: Array1<f64>,
    sd: Array1<f64>,
    /// Squared standardized patch embeddings.
    r2: Array2<f64>,
    gamma: f64,
    temperature: f64,
}

impl<'a> Problem<'a> {
    fn new(e: ArrayView2<'a, f64>, t: ArrayView1<'a, f64>, cfg: &BottleneckConfig) -> Self {
        let mu = e.mean_axis(Axis(0)).expect("non-empty patches");
        let sd = e.std_axis(Axis(0), 0.0).mapv(|s| s + 1e-6);
        let r2 = Array2::from_shape_fn(e.dim(), |(p, k)| ((e[[p, k]] - mu[k]) / sd[k]).powi(2));
        Self {
            e,
            t,
            mu,
            sd,
            r2,
            gamma: cfg.gamma,
            temperature: cfg.temperature,
        }
    }

    fn draw_noise(&self, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let (p, d) = self.e.dim();
        let mut n = Array2::zeros((p, d));
        for ((_, k), v) in n.indexed_iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = self.mu[k] + self.sd[k] * z;
        }
        n
    }

    /// Objective and its gradient with respect to the logits, for the given noise draws.
    fn evaluate(&self, theta: &Array1<f64>, noise: &[Array2<f64>]) -> (f64, Array1<f64>) {
        let (np, _) = self.e.dim();
        let pf = np as f64;
        let lam = theta.mapv(sigmoid);
        let oml = theta.mapv(|x| sigmoid(-x));
        let ns = noise.len() as f64;

        let mut relevance = 0.0;
        let mut g_rel = Array1::<f64>::zeros(np);
        for eps in noise {
            let mut z = eps.clone();
            Zip::from(z.rows_mut())
                .and(self.e.rows())
                .and(&lam)
                .for_each(|mut zr, er, &l| zr.zip_mut_with(&er, |zv, &ev| *zv = l * ev + (1.0 - l) * *zv));
            let q = z.mean_axis(Axis(0)).expect("non-empty");
            let nq = q.dot(&q).sqrt().max(1e-300);
            let c = q.dot(&self.t) / nq;
            relevance += pf * c / self.temperature / ns;
            // ∂(P·cos/T)/∂q, then ∂q/∂λ_p = (E_p − ε_p)/P.
            let dq = (&self.t - &(&q * (c / nq))) / (nq * self.temperature);
            for p in 0..np {
                let mut acc = 0.0;
                for k in 0..dq.len() {
                    acc += (self.e[[p, k]] - eps[[p, k]]) * dq[k];
                }
                g_rel[p] += acc / ns;
            }
        }

        let d = self.e.ncols() as f64;
        let mut compression = 0.0;
        let mut g = Array1::zeros(np);
        for p in 0..np {
            let (l, o) = (lam[p], oml[p]);
            let sp = softplus(theta[p]);
            let mut kl = 0.0;
            let mut dkl = 0.0;
            for &r2 in self.r2.row(p) {
                kl += 0.5 * (o * o + l * l * r2 - 1.0 + 2.0 * sp);
                dkl += l * o * (-o + l * r2) + l;
            }
            compression += kl / d / self.temperature;
            g[p] = l * o * g_rel[p] - self.gamma * dkl / d / self.temperature;
        }
        (relevance - self.gamma * compression, g)
    }
}

/// Result of the bottleneck optimization on the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckTrace {
    /// `rows × cols` mask.
    pub patch_mask: Array2<f64>,
    /// Objective value before the first step and after every accepted step.
    pub objective: Vec<f64>,
}

fn check_text(enc: &dyn Encoder, t: ArrayView1<'_, f64>) -> Result<()> {
    if t.len() != enc.dim() {
        return Err(Error::Shape(format!("text embedding has {} dims, encoder {}", t.len(), enc.dim())));
    }
    let n = t.dot(&t).sqrt();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("text embedding must be unit length, norm {n}")));
    }
    Ok(())
}

/// Optimizes the patch mask for a prepared image.
pub fn optimize_patch_mask(
    enc: &dyn Encoder,
    image: &ImageTensor,
    text_embedding: ArrayView1<'_, f64>,
    cfg: &BottleneckConfig,
) -> Result<BottleneckTrace> {
    cfg.validate()?;
    check_text(enc, text_embedding)?;
    let patches = enc.encode_image(image)?.patches.ok_or(Error::NoPatchFeatures)?;
    let (rows, cols) = enc.patch_grid();
    if patches.nrows() != rows * cols || patches.ncols() != enc.dim() {
        return Err(Error::Shape(format!(
            "patch embeddings {:?} do not match grid {rows}x{cols} and dim {}",
            patches.dim(),
            enc.dim()
        )));
    }
    let problem = Problem::new(patches.view(), text_embedding, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = Array1::from_elem(rows * cols, cfg.init_logit);
    let mut objective = Vec::with_capacity(cfg.steps + 1);

    if cfg.line_search {
        let noise: Vec<_> = (0..cfg.noise_samples).map(|_| problem.draw_noise(&mut rng)).collect();
        let (mut j, mut g) = problem.evaluate(&theta, &noise);
        objective.push(j);
        for _ in 0..cfg.steps {
            let mut step = cfg.step_size;
            let mut accepted = false;
            for _ in 0..40 {
                let cand = &theta + &(&g * step);
                let (jc, gc) = problem.evaluate(&cand, &noise);
                if jc.is_finite() && jc >= j {
                    theta = cand;
                    j = jc;
                    g = gc;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            objective.push(j);
        }
    } else {
        for _ in 0..cfg.steps {
            let noise: Vec<_> = (0..cfg.noise_samples).map(|_| problem.draw_noise(&mut rng)).collect();
            let (j, g) = problem.evaluate(&theta, &noise);
            objective.push(j);
            theta.scaled_add(cfg.step_size, &g);
        }
    }
    if theta.iter().any(|v| v.is_nan()) || objective.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bottleneck optimization diverged".into()));
    }
    // Stored at single precision so persisted maps round-trip exactly.
    let mask = theta.mapv(|x| sigmoid(x) as f32 as f64);
    Ok(BottleneckTrace {
        patch_mask: mask.into_shape_with_order((rows, cols)).expect("grid shape"),
        objective,
    })
}

/// Saliency map at the resolution of `image` (a prepared encoder input).
pub fn compute_saliency(
    enc: &dyn Encoder,
    image: &ImageTensor,
    text_embedding: ArrayView1<'_, f64>,
    cfg: &BottleneckConfig,
) -> Result<SaliencyMap> {
    compute_saliency_sized(enc, image, text_embedding, cfg, image.height(), image.width())
}

/// Like [`compute_saliency`] but upsampled to an explicit output size, e.g.
/// the original image before resizing.
pub fn compute_saliency_sized(
    enc: &dyn Encoder,
    image: &ImageTensor,
    text_embedding: ArrayView1<'_, f64>,
    cfg: &BottleneckConfig,
    height: usize,
    width: usize,
) -> Result<SaliencyMap> {
    let trace = optimize_patch_mask(enc, image, text_embedding, cfg)?;
    let values = saliency_to_image_space(trace.patch_mask.view(), height, width).mapv(|v| v as f32 as f64);
    Ok(SaliencyMap {
        values,
        prompt_id: String::new(),
        gamma: cfg.gamma,
        steps: cfg.steps,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ImageFeatures;
    use crate::prompts::TextPrompt;
    use crate::synthetic::{make_synthetic_encoder, render_planted_scene, PlantedConcept, SyntheticEncoder};
    use ndarray::array;

    fn setup(seed: u64) -> (SyntheticEncoder, ImageTensor, Array1<f64>, PlantedConcept) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let concept = PlantedConcept::random(&mut rng, 8);
        let enc = make_synthetic_encoder(7, 64, Some(concept.clone())).unwrap();
        let (raw, _) = render_planted_scene(&mut rng, 64, 8, &concept, 0.03).unwrap();
        let img = enc.prepare(&raw).unwrap();
        let t = enc.encode_text(&TextPrompt::plain(&concept.prompt).unwrap()).unwrap();
        (enc, img, t, concept)
    }

    fn inside_outside(map: &Array2<f64>, c: &PlantedConcept) -> (f64, f64) {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0.0, 0.0, 0.0);
        for ((r, col), &v) in map.indexed_iter() {
            if c.region.contains(r / 8, col / 8) {
                si += v;
                ni += 1.0;
            } else {
                so += v;
                no += 1.0;
            }
        }
        (si / ni, so / no)
    }

    #[test]
    fn upsampling_examples() {
        let c = saliency_to_image_space(Array2::from_elem((3, 4), 0.7).view(), 10, 9);
        assert!(c.iter().all(|&v| v == 0.7));
        let one = saliency_to_image_space(array![[0.25]].view(), 5, 7);
        assert!(one.iter().all(|&v| v == 0.25));
        let g = array![[0.1, 0.2], [0.3, 0.4]];
        let up = saliency_to_image_space(g.view(), 4, 4);
        assert_eq!(up[[0, 0]], 0.1);
        assert_eq!(up[[0, 3]], 0.2);
        assert_eq!(up[[3, 0]], 0.3);
        assert_eq!(up[[3, 3]], 0.4);
    }

    #[test]
    fn planted_region_is_more_salient() {
        for seed in 0..5 {
            let (enc, img, t, concept) = setup(seed);
            let sal = compute_saliency(&enc, &img, t.view(), &BottleneckConfig::default()).unwrap();
            assert_eq!(sal.values.dim(), (64, 64));
            let (inside, outside) = inside_outside(&sal.values, &concept);
            assert!(inside > outside, "seed {seed}: {inside} <= {outside}");
        }
    }

    #[test]
    fn mass_shrinks_with_gamma_and_saturates_without_it() {
        let (enc, img, t, _) = setup(3);
        let mut last = f64::INFINITY;
        for gamma in [0.0, 0.1, 1.0, 10.0] {
            let cfg = BottleneckConfig {
                gamma,
                ..Default::default()
            };
            let sal = compute_saliency(&enc, &img, t.view(), &cfg).unwrap();
            assert!(sal.mass() <= last, "gamma {gamma}");
            last = sal.mass();
            if gamma == 0.0 {
                assert!(sal.values.mean().unwrap() > 0.9);
            }
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let (enc, img, t, _) = setup(1);
        let cfg = BottleneckConfig {
            seed: 42,
            ..Default::default()
        };
        let a = compute_saliency(&enc, &img, t.view(), &cfg).unwrap();
        let b = compute_saliency(&enc, &img, t.view(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn line_search_objective_never_decreases() {
        let (enc, img, t, _) = setup(2);
        for gamma in [0.0, 0.1, 1.0] {
            let cfg = BottleneckConfig {
                gamma,
                line_search: true,
                steps: 15,
                ..Default::default()
            };
            let tr = optimize_patch_mask(&enc, &img, t.view(), &cfg).unwrap();
            assert!(tr.objective.windows(2).all(|w| w[1] >= w[0]), "{:?}", tr.objective);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (enc, img, t, _) = setup(4);
        let e = enc.encode_image(&img).unwrap().patches.unwrap();
        let cfg = BottleneckConfig {
            gamma: 0.7,
            ..Default::default()
        };
        let pb = Problem::new(e.view(), t.view(), &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise: Vec<_> = (0..3).map(|_| pb.draw_noise(&mut rng)).collect();
        let theta = Array1::from_shape_fn(64, |i| (i as f64 * 0.37).sin() * 2.0);
        let (_, g) = pb.evaluate(&theta, &noise);
        let h = 1e-5;
        for p in [0, 9, 33, 63] {
            let mut a = theta.clone();
            a[p] += h;
            let mut b = theta.clone();
            b[p] -= h;
            let num = (pb.evaluate(&a, &noise).0 - pb.evaluate(&b, &noise).0) / (2.0 * h);
            assert!((num - g[p]).abs() < 1e-5 * num.abs().max(1.0), "{p}: {num} vs {}", g[p]);
        }
    }

    #[derive(Debug)]
    struct PooledOnly;

    impl Encoder for PooledOnly {
        fn dim(&self) -> usize {
            2
        }
        fn input_side(&self) -> usize {
            16
        }
        fn params_version(&self) -> String {
            "pooled".into()
        }
        fn patch_grid(&self) -> (usize, usize) {
            (1, 1)
        }
        fn encode_image(&self, _: &ImageTensor) -> Result<ImageFeatures> {
            Ok(ImageFeatures {
                patches: None,
                pooled: array![1.0, 0.0],
            })
        }
        fn encode_text(&self, _: &TextPrompt) -> Result<Array1<f64>> {
            Ok(array![1.0, 0.0])
        }
    }

    #[test]
    fn encoder_without_patches_is_rejected() {
        let img = ImageTensor::filled(16, 16, [0.0; 3]).unwrap();
        let err = compute_saliency(&PooledOnly, &img, array![1.0, 0.0].view(), &BottleneckConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "attribution requires patch-level features");
    }
}
