use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{encode_batch, EmbeddingBatch, Encoder};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::prompts::TextPrompt;

/// Top-k accuracy in percent for both retrieval directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub image_to_text: f64,
    pub text_to_image: f64,
}

/// Within-batch top-`k` retrieval. A query's rank is the number of
/// candidates with strictly higher similarity than its true partner; it is
/// a hit when the rank is below `k`.
pub fn retrieval_topk(batch: &EmbeddingBatch, k: usize) -> Result<TopK> {
    let b = batch.len();
    if k == 0 || k >= b {
        return Err(Error::InvalidArgument(format!("k must be in 1..{b}, got {k}")));
    }
    if !batch.is_normalized() {
        return Err(Error::InvalidArgument("retrieval expects unit-norm embeddings".into()));
    }
    let s = batch.image().dot(&batch.text().t());
    let hits = |get: &dyn Fn(usize, usize) -> f64| -> usize {
        (0..b)
            .filter(|&i| {
                let own = get(i, i);
                (0..b).filter(|&j| get(i, j) > own).count() < k
            })
            .count()
    };
    let i2t = hits(&|i, j| s[[i, j]]);
    let t2i = hits(&|i, j| s[[j, i]]);
    Ok(TopK {
        image_to_text: 100.0 * i2t as f64 / b as f64,
        text_to_image: 100.0 * t2i as f64 / b as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = super::mean_std(values);
        Self { mean, std }
    }
}

/// Top-1/top-2 accuracy (percent) across shuffled runs, mean and sample
/// standard deviation over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub top1_i2t: MeanStd,
    pub top2_i2t: MeanStd,
    pub top1_t2i: MeanStd,
    pub top2_t2i: MeanStd,
    pub runs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Runs the protocol on pre-computed embeddings of all pairs. Each run
/// shuffles the pairs, cuts them into full batches (the remainder is
/// dropped) and averages per-batch accuracy.
pub fn retrieval_from_embeddings(all: &EmbeddingBatch, runs: usize, batch_size: usize, seed: u64) -> Result<RetrievalReport> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    if batch_size < 3 {
        return Err(Error::InvalidArgument(format!("batch size {batch_size} too small for top-2")));
    }
    if all.len() < batch_size {
        return Err(Error::InvalidArgument(format!(
            "need at least {batch_size} pairs, got {}",
            all.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nbatches = all.len() / batch_size;
    let mut acc = [vec![], vec![], vec![], vec![]];
    let mut idx: Vec<usize> = (0..all.len()).collect();
    for _ in 0..runs {
        idx.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for chunk in idx.chunks_exact(batch_size) {
            let batch = all.select(chunk);
            let t1 = retrieval_topk(&batch, 1)?;
            let t2 = retrieval_topk(&batch, 2)?;
            sums[0] += t1.image_to_text;
            sums[1] += t2.image_to_text;
            sums[2] += t1.text_to_image;
            sums[3] += t2.text_to_image;
        }
        for (a, s) in acc.iter_mut().zip(sums) {
            a.push(s / nbatches as f64);
        }
    }
    Ok(RetrievalReport {
        top1_i2t: MeanStd::of(&acc[0]),
        top2_i2t: MeanStd::of(&acc[1]),
        top1_t2i: MeanStd::of(&acc[2]),
        top2_t2i: MeanStd::of(&acc[3]),
        runs,
        batch_size,
        seed,
    })
}

/// Encodes `pairs` and runs [`retrieval_from_embeddings`].
pub fn retrieval_protocol(
    enc: &dyn Encoder,
    pairs: &[(ImageTensor, TextPrompt)],
    runs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    if pairs.len() < batch_size {
        return Err(Error::InvalidArgument(format!(
            "need at least {batch_size} pairs, got {}",
            pairs.len()
        )));
    }
    let (images, prompts): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    let all = encode_batch(enc, &images, &prompts)?;
    retrieval_from_embeddings(&all, runs, batch_size, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Axis};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> EmbeddingBatch {
        let mut m = || Array2::from_shape_simple_fn((b, d), || rng.sample::<f64, _>(StandardNormal));
        let (i, t) = (m(), m());
        EmbeddingBatch::normalized(i, t).unwrap()
    }

    #[test]
    fn identity_structure_is_perfect() {
        let e = Array2::<f64>::eye(50);
        let b = EmbeddingBatch::new(e.clone(), e).unwrap();
        let r = retrieval_topk(&b, 1).unwrap();
        assert_eq!((r.image_to_text, r.text_to_image), (100.0, 100.0));
        assert!(retrieval_topk(&b, 50).is_err());
        assert!(retrieval_topk(&b, 0).is_err());
        let rep = retrieval_from_embeddings(&b, 5, 50, 3).unwrap();
        assert_eq!(rep.top1_i2t, MeanStd { mean: 100.0, std: 0.0 });
        assert_eq!(rep.top2_t2i, MeanStd { mean: 100.0, std: 0.0 });
    }

    #[test]
    fn random_embeddings_hit_chance_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut total = 0.0;
        for _ in 0..300 {
            total += retrieval_topk(&random_batch(&mut rng, 50, 16), 1).unwrap().image_to_text;
        }
        assert!((total / 300.0 - 2.0).abs() < 1.0);
    }

    #[test]
    fn remainder_is_dropped_and_runs_reproduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_batch(&mut rng, 73, 8);
        let a = retrieval_from_embeddings(&b, 3, 50, 9).unwrap();
        assert_eq!(a, retrieval_from_embeddings(&b, 3, 50, 9).unwrap());
        assert!(retrieval_from_embeddings(&b.select(&(0..40).collect::<Vec<_>>()), 3, 50, 9).is_err());
    }

    proptest! {
        #[test]
        fn top2_dominates_and_rotation_is_irrelevant(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_batch(&mut rng, 12, 4);
            let t1 = retrieval_topk(&b, 1).unwrap();
            let t2 = retrieval_topk(&b, 2).unwrap();
            prop_assert!(t2.image_to_text >= t1.image_to_text && t2.text_to_image >= t1.text_to_image);
            // Coordinate permutation with sign flips is an orthogonal map.
            let perm = [2usize, 0, 3, 1];
            let rot = |m: &Array2<f64>| {
                let mut out = m.select(Axis(1), &perm);
                out.column_mut(1).mapv_inplace(|v| -v);
                out
            };
            let rb = EmbeddingBatch::new(rot(b.image()), rot(b.text())).unwrap();
            prop_assert_eq!(retrieval_topk(&rb, 1).unwrap(), t1);
        }
    }
}
