//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use promptseg_core::mask::BinaryMask;
use promptseg_core::synthetic::render_planted_scene;
use promptseg_core::{make_synthetic_encoder, EmbeddingBatch, Encoder, ImageTensor, PlantedConcept, SyntheticEncoder, TextPrompt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_batch(seed: u64, b: usize, d: usize) -> EmbeddingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || Array2::from_shape_simple_fn((b, d), || rng.random_range(-1.0..1.0));
    let (i, t) = (draw(), draw());
    EmbeddingBatch::normalized(i, t).unwrap()
}

pub struct Scene {
    pub encoder: SyntheticEncoder,
    pub image: ImageTensor,
    pub text: ndarray::Array1<f64>,
    pub truth: BinaryMask,
}

/// Planted-concept scene at side 64 with its encoder and prompt embedding.
pub fn planted_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let concept = PlantedConcept::random(&mut rng, 8);
    let encoder = make_synthetic_encoder(seed, 128, Some(concept.clone())).unwrap();
    let (image, truth) = render_planted_scene(&mut rng, 64, 8, &concept, 0.03).unwrap();
    let text = encoder.encode_text(&TextPrompt::plain(&concept.prompt).unwrap()).unwrap();
    Scene {
        encoder,
        image,
        text,
        truth,
    }
}

/// Blobby random mask, for the metric benchmarks.
pub fn random_mask(seed: u64, side: usize) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cy, cx) = (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64));
    let r = side as f64 / 4.0;
    BinaryMask::from_fn(side, side, |y, x| {
        (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) < r * r || (y * 7 + x * 13) % 97 == 0
    })
}
