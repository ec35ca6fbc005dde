//! Contrastive fine-tuning of an encoder's projection layers.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::Encoder;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{loss_from_similarity, LossConfig};
use crate::prompts::TextPrompt;
use crate::synthetic::SyntheticEncoder;

/// An encoder whose shared-space embeddings are linear projections
/// `normalize(W·x)` of fixed base features, with trainable `W`.
pub trait TrainableEncoder: Encoder + Clone {
    /// Base feature of a prepared image.
    fn image_base(&self, image: &ImageTensor) -> Result<Array1<f64>>;
    fn text_base(&self, prompt: &TextPrompt) -> Result<Array1<f64>>;
    /// `(W_img, W_txt)`.
    fn projections(&self) -> (&Array2<f64>, &Array2<f64>);
    fn set_projections(&mut self, w_img: Array2<f64>, w_txt: Array2<f64>) -> Result<()>;
}

impl TrainableEncoder for SyntheticEncoder {
    fn image_base(&self, image: &ImageTensor) -> Result<Array1<f64>> {
        SyntheticEncoder::image_base(self, image)
    }

    fn text_base(&self, prompt: &TextPrompt) -> Result<Array1<f64>> {
        SyntheticEncoder::text_base(self, prompt)
    }

    fn projections(&self) -> (&Array2<f64>, &Array2<f64>) {
        (self.image_projection(), self.text_projection())
    }

    fn set_projections(&mut self, w_img: Array2<f64>, w_txt: Array2<f64>) -> Result<()> {
        SyntheticEncoder::set_projections(self, w_img, w_txt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    /// Learning rate multiplier applied after every epoch.
    pub decay_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Share of pairs used for training; the rest validates.
    pub split_fraction: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            decay_rate: 0.5,
            batch_size: 64,
            epochs: 10,
            split_fraction: 0.85,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!("decay_rate must be in (0, 1], got {}", self.decay_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "split_fraction must be in (0, 1), got {}",
                self.split_fraction
            )));
        }
        self.loss.validate()
    }

    /// Learning rate used during epoch `k` (0-based).
    pub fn lr_at(&self, k: usize) -> f64 {
        self.learning_rate * self.decay_rate.powi(k as i32)
    }
}

/// Deterministic shuffled split into `⌈fraction·N⌉` training items and the
/// remainder.
pub fn split_dataset<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    if items.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    let n = items.len();
    // The small slack keeps products like 0.85·100 from rounding up past an integer.
    let n_train = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    if n_train == n {
        log::warn!("split of {n} items leaves no validation data");
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = idx[..n_train].iter().map(|&i| items[i].clone()).collect();
    let val = idx[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when there is no validation batch.
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,train_loss,val_loss,lr,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{:.6}", e.epoch, e.train_loss, e.val_loss, e.lr, e.seconds);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneResult<E> {
    /// Parameters with the lowest validation loss (training loss when there
    /// is no validation data); the starting encoder if no epoch ran.
    pub best: E,
    pub best_epoch: usize,
    pub last: E,
    pub log: TrainLog,
}

struct Cached {
    img: Array2<f64>,
    txt: Array2<f64>,
}

fn cache_features<E: TrainableEncoder>(enc: &E, data: &[(ImageTensor, TextPrompt)]) -> Result<Cached> {
    let rows: Vec<(Array1<f64>, Array1<f64>)> = data
        .par_iter()
        .map(|(img, txt)| Ok((enc.image_base(&enc.prepare(img)?)?, enc.text_base(txt)?)))
        .collect::<Result<_>>()?;
    let stack = |f: &dyn Fn(&(Array1<f64>, Array1<f64>)) -> &Array1<f64>| -> Result<Array2<f64>> {
        let views: Vec<_> = rows.iter().map(|r| f(r).view()).collect();
        if views.is_empty() {
            return Ok(Array2::zeros((0, 0)));
        }
        ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    };
    Ok(Cached {
        img: stack(&|r| &r.0)?,
        txt: stack(&|r| &r.1)?,
    })
}

fn normalized(x: Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| !(n > 0.0 && n.is_finite())) {
        return Err(Error::NonFinite("projected embedding has zero or non-finite norm".into()));
    }
    let unit = &x / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Gradient of `normalize(x)` pulled back through the normalization.
fn pull_back(g: &Array2<f64>, unit: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let radial = (g * unit).sum_axis(Axis(1)).insert_axis(Axis(1));
    (g - unit * &radial) / norms.view().insert_axis(Axis(1))
}

/// Loss and parameter gradients for one batch of cached base features.
fn batch_step(
    w_img: &Array2<f64>,
    w_txt: &Array2<f64>,
    fi: &Array2<f64>,
    ft: &Array2<f64>,
    loss: &LossConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (ui, ni) = normalized(fi.dot(&w_img.t()))?;
    let (ut, nt) = normalized(ft.dot(&w_txt.t()))?;
    let (value, gs) = loss_from_similarity(&ui.dot(&ut.t()), loss)?;
    let gi = pull_back(&gs.dot(&ut), &ui, &ni);
    let gt = pull_back(&gs.t().dot(&ui), &ut, &nt);
    Ok((value.total, gi.t().dot(fi), gt.t().dot(ft)))
}

fn eval_loss(w_img: &Array2<f64>, w_txt: &Array2<f64>, c: &Cached, batch_size: usize, loss: &LossConfig) -> Result<f64> {
    let n = c.img.nrows();
    let mut total = 0.0;
    let mut count = 0;
    let mut start = 0;
    while start + 2 <= n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (v, _, _) = batch_step(w_img, w_txt, &c.img.select(Axis(0), &idx), &c.txt.select(Axis(0), &idx), loss)?;
        total += v;
        count += 1;
        start = end;
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

/// Trains the projections with plain SGD on the given pairs (decoded
/// images and captions). `on_epoch` sees each epoch's parameters and log
/// row, e.g. to write checkpoints.
pub fn finetune<E, F>(
    enc: &E,
    data: &[(ImageTensor, TextPrompt)],
    cfg: &FinetuneConfig,
    mut on_epoch: F,
) -> Result<FinetuneResult<E>>
where
    E: TrainableEncoder,
    F: FnMut(&E, &EpochLog) -> Result<()>,
{
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(FinetuneResult {
            best: enc.clone(),
            best_epoch: 0,
            last: enc.clone(),
            log: TrainLog::default(),
        });
    }
    let (train, val) = split_dataset(data, cfg.split_fraction, cfg.seed)?;
    if train.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 training pairs, got {}", train.len())));
    }
    let train_c = cache_features(enc, &train)?;
    let val_c = cache_features(enc, &val)?;
    let (w_img, w_txt) = enc.projections();
    let (mut w_img, mut w_txt) = (w_img.clone(), w_txt.clone());

    let mut log = TrainLog::default();
    let mut current = enc.clone();
    let mut best: Option<(f64, usize, E)> = None;
    for k in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(k);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k as u64 + 1)));
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in idx.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let fi = train_c.img.select(Axis(0), chunk);
            let ft = train_c.txt.select(Axis(0), chunk);
            let (v, gi, gt) = batch_step(&w_img, &w_txt, &fi, &ft, &cfg.loss)
                .map_err(|e| Error::NonFinite(format!("epoch {} batch {bi}: {e}", k + 1)))?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("epoch {} batch {bi}: loss {v}", k + 1)));
            }
            if lr != 0.0 {
                w_img.scaled_add(-lr, &gi);
                w_txt.scaled_add(-lr, &gt);
            }
            total += v;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let val_loss = eval_loss(&w_img, &w_txt, &val_c, cfg.batch_size, &cfg.loss)?;
        current.set_projections(w_img.clone(), w_txt.clone())?;
        let entry = EpochLog {
            epoch: k + 1,
            train_loss,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log.epochs.push(entry);
        on_epoch(&current, &entry)?;
        let score = if val_loss.is_nan() { train_loss } else { val_loss };
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, k + 1, current.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(FinetuneResult {
        best,
        best_epoch,
        last: current,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::encode_batch;
    use crate::losses::LossVariant;
    use crate::metrics::retrieval_from_embeddings;
    use crate::synthetic::{make_synthetic_encoder, paired_corpus};

    fn corpus(seed: u64, n: usize) -> Vec<(ImageTensor, TextPrompt)> {
        paired_corpus(seed, n, 64, 8)
            .unwrap()
            .into_iter()
            .map(|p| (p.image, p.caption))
            .collect()
    }

    fn toy_cfg() -> FinetuneConfig {
        FinetuneConfig {
            learning_rate: 20.0,
            decay_rate: 0.5,
            batch_size: 64,
            epochs: 5,
            split_fraction: 0.85,
            seed: 3,
            loss: LossConfig::default(),
        }
    }

    #[test]
    fn split_sizes() {
        let items: Vec<usize> = (0..100).collect();
        let (a, b) = split_dataset(&items, 0.85, 1).unwrap();
        assert_eq!((a.len(), b.len()), (85, 15));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split_dataset(&items, 0.85, 1).unwrap(), (a, b));
        let (a, b) = split_dataset(&[7], 0.85, 0).unwrap();
        assert_eq!((a.len(), b.len()), (1, 0));
        assert!(split_dataset(&items, 1.0, 0).is_err());
        assert!(split_dataset(&items, 0.0, 0).is_err());
    }

    #[test]
    fn halving_decay_schedule() {
        let cfg = FinetuneConfig::default();
        for k in 0..6 {
            assert_eq!(cfg.lr_at(k), 1e-6 * 0.5f64.powi(k as i32));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let enc = make_synthetic_encoder(2, 8, None).unwrap();
        let data = corpus(4, 6);
        let c = cache_features(&enc, &data).unwrap();
        let (wi, wt) = enc.projections();
        let loss = LossConfig::new(LossVariant::DhnNce, 0.6, 0.15, 0.3);
        let (_, gi, gt) = batch_step(wi, wt, &c.img, &c.txt, &loss).unwrap();
        let h = 1e-5;
        for &(r, col) in &[(0, 0), (3, 17), (7, 100)] {
            let mut a = wi.clone();
            a[[r, col]] += h;
            let mut b = wi.clone();
            b[[r, col]] -= h;
            let num = (batch_step(&a, wt, &c.img, &c.txt, &loss).unwrap().0
                - batch_step(&b, wt, &c.img, &c.txt, &loss).unwrap().0)
                / (2.0 * h);
            assert!((num - gi[[r, col]]).abs() < 1e-6, "{num} vs {}", gi[[r, col]]);
        }
        let mut a = wt.clone();
        a[[1, 5]] += h;
        let mut b = wt.clone();
        b[[1, 5]] -= h;
        let num = (batch_step(wi, &a, &c.img, &c.txt, &loss).unwrap().0 - batch_step(wi, &b, &c.img, &c.txt, &loss).unwrap().0) / (2.0 * h);
        assert!((num - gt[[1, 5]]).abs() < 1e-6);
    }

    #[test]
    fn validation_loss_falls_and_retrieval_improves() {
        let enc = make_synthetic_encoder(1, 64, None).unwrap();
        let data = corpus(10, 400);
        let res = finetune(&enc, &data, &toy_cfg(), |_, _| Ok(())).unwrap();
        let v: Vec<f64> = res.log.epochs.iter().map(|e| e.val_loss).collect();
        assert!(v.windows(2).all(|w| w[1] < w[0]), "{v:?}");
        let best_val = res.log.epochs[res.best_epoch - 1].val_loss;
        assert!(best_val <= res.log.epochs.last().unwrap().val_loss);

        let test = corpus(11, 200);
        let (imgs, caps): (Vec<_>, Vec<_>) = test.into_iter().unzip();
        let before = retrieval_from_embeddings(&encode_batch(&enc, &imgs, &caps).unwrap(), 2, 50, 0).unwrap();
        let after = retrieval_from_embeddings(&encode_batch(&res.best, &imgs, &caps).unwrap(), 2, 50, 0).unwrap();
        assert!(after.top1_i2t.mean > before.top1_i2t.mean + 30.0, "{before:?} {after:?}");
    }

    #[test]
    fn deterministic_zero_lr_and_zero_epochs() {
        let enc = make_synthetic_encoder(1, 16, None).unwrap();
        let data = corpus(5, 40);
        let mut cfg = toy_cfg();
        cfg.epochs = 2;
        cfg.batch_size = 8;
        let a = finetune(&enc, &data, &cfg, |_, _| Ok(())).unwrap();
        let b = finetune(&enc, &data, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(a.last, b.last);
        let strip = |l: &TrainLog| l.epochs.iter().map(|e| (e.train_loss, e.val_loss, e.lr)).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));

        cfg.learning_rate = 0.0;
        let z = finetune(&enc, &data, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(z.last.projections(), enc.projections());

        cfg.epochs = 0;
        let none = finetune(&enc, &data, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(none.best, enc);
        assert!(none.log.epochs.is_empty());
    }

    #[test]
    fn csv_has_one_row_per_epoch() {
        let log = TrainLog {
            epochs: vec![EpochLog {
                epoch: 1,
                train_loss: 0.5,
                val_loss: f64::NAN,
                lr: 1e-6,
                seconds: 0.25,
            }],
        };
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TrainLog::HEADER);
        assert_eq!(lines[1], "1,0.5,NaN,0.000001,0.250000");
    }
}
