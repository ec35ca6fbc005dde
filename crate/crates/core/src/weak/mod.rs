//! Weak supervision on zero-shot pseudo-labels: cyclic training,
//! checkpoint ensembling and entropy uncertainty.

pub mod model;
pub mod schedule;

use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io::{read_params, write_params};
use crate::mask::BinaryMask;
use crate::metrics::seg::boundary;

pub use model::{composite_loss, SegModel, TinyUNet, UNetConfig};
pub use schedule::CycleSchedule;

/// Images paired with the masks used as training targets.
#[derive(Debug, Clone, Default)]
pub struct PseudoDataset {
    pub pairs: Vec<(ImageTensor, BinaryMask)>,
    /// Identifies the pipeline configuration that produced the labels.
    pub provenance: String,
}

impl PseudoDataset {
    pub fn new(pairs: Vec<(ImageTensor, BinaryMask)>, provenance: impl Into<String>) -> Result<Self> {
        for (i, (img, m)) in pairs.iter().enumerate() {
            if (img.height(), img.width()) != m.dim() {
                return Err(Error::Shape(format!(
                    "pair {i}: image {}x{} vs mask {}x{}",
                    img.height(),
                    img.width(),
                    m.height(),
                    m.width()
                )));
            }
        }
        Ok(Self {
            pairs,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakConfig {
    pub epochs: usize,
    pub cycles: usize,
    pub checkpoints_per_cycle: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Foreground probability at or above which the final mask is set.
    pub threshold: f64,
    pub seed: u64,
    pub momentum: f64,
    pub batch_size: usize,
    pub channels: usize,
}

impl Default for WeakConfig {
    fn default() -> Self {
        let s = CycleSchedule::default();
        Self {
            epochs: s.total_epochs,
            cycles: s.cycles,
            checkpoints_per_cycle: s.checkpoints_per_cycle,
            lr_max: s.lr_max,
            lr_min: s.lr_min,
            threshold: 0.5,
            seed: 0,
            momentum: 0.9,
            batch_size: 4,
            channels: 8,
        }
    }
}

impl WeakConfig {
    pub fn schedule(&self) -> CycleSchedule {
        CycleSchedule {
            total_epochs: self.epochs,
            cycles: self.cycles,
            checkpoints_per_cycle: self.checkpoints_per_cycle,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument("batch_size and channels must be positive".into()));
        }
        Ok(())
    }

    /// Six epochs in three cycles with two snapshots each, tuned for the
    /// 32-pixel planted-shape scenes.
    pub fn toy() -> Self {
        Self {
            epochs: 6,
            cycles: 3,
            checkpoints_per_cycle: 2,
            lr_max: 0.05,
            lr_min: 5e-4,
            batch_size: 2,
            ..Self::default()
        }
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            channels: self.channels,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub cycle: usize,
    pub epoch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<M> {
    pub meta: CheckpointMeta,
    /// Position within its cycle, from 0.
    pub slot: usize,
    pub model: M,
}

/// Snapshots in the order they were taken.
#[derive(Debug, Clone)]
pub struct CheckpointEnsemble<M> {
    pub checkpoints: Vec<Checkpoint<M>>,
    pub schedule: CycleSchedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnsembleManifest {
    schedule: CycleSchedule,
    model: serde_json::Value,
}

impl<M: SegModel> CheckpointEnsemble<M> {
    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.len() == self.schedule.total_checkpoints()
    }

    /// Writes `cycle_{d}/ckpt_{g}/{params.bin,meta.json}` under `dir` and an
    /// `ensemble.json` describing the schedule and model.
    pub fn save(&self, dir: impl AsRef<Path>, model_info: &impl Serialize) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for ck in &self.checkpoints {
            let sub = checkpoint_dir(dir, ck.meta.cycle, ck.slot);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            write_params(sub.join("params.bin"), &ck.model.params())?;
            let meta = serde_json::to_string_pretty(&ck.meta)?;
            let p = sub.join("meta.json");
            std::fs::write(&p, meta + "\n").map_err(|e| Error::io(&p, e))?;
        }
        let manifest = EnsembleManifest {
            schedule: self.schedule,
            model: serde_json::to_value(model_info)?,
        };
        let p = dir.join("ensemble.json");
        std::fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&p, e))
    }

    /// Loads every checkpoint the stored schedule calls for; any missing
    /// directory is an error naming it.
    pub fn load(dir: impl AsRef<Path>, template: &M) -> Result<Self> {
        let dir = dir.as_ref();
        let schedule = read_manifest(dir)?.0;
        schedule.validate()?;
        let mut checkpoints = Vec::with_capacity(schedule.total_checkpoints());
        for cycle in 0..schedule.cycles {
            for slot in 0..schedule.checkpoints_per_cycle {
                let sub = checkpoint_dir(dir, cycle, slot);
                let params_path = sub.join("params.bin");
                let meta_path = sub.join("meta.json");
                if !params_path.is_file() || !meta_path.is_file() {
                    return Err(Error::InvalidArgument(format!(
                        "missing checkpoint cycle {cycle} slot {slot} ({})",
                        sub.display()
                    )));
                }
                let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
                let meta: CheckpointMeta = serde_json::from_str(&text)?;
                let mut model = template.clone();
                model.set_params(read_params(&params_path)?)?;
                checkpoints.push(Checkpoint { meta, slot, model });
            }
        }
        Ok(Self { checkpoints, schedule })
    }
}

fn checkpoint_dir(dir: &Path, cycle: usize, slot: usize) -> std::path::PathBuf {
    dir.join(format!("cycle_{cycle}")).join(format!("ckpt_{slot}"))
}

/// Schedule and model description stored beside an ensemble.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<(CycleSchedule, serde_json::Value)> {
    let p = dir.as_ref().join("ensemble.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: EnsembleManifest = serde_json::from_str(&text)?;
    Ok((m.schedule, m.model))
}

/// Trains `model` for the scheduled epochs with momentum SGD on the
/// composite loss and snapshots it during the last epochs of each cycle.
///
/// `on_epoch(epoch, model, mean_loss)` runs after every epoch.
pub fn train_weak<M: SegModel>(
    mut model: M,
    data: &PseudoDataset,
    cfg: &WeakConfig,
    mut on_epoch: impl FnMut(usize, &M, f64) -> Result<()>,
) -> Result<CheckpointEnsemble<M>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("pseudo-label dataset".into()));
    }
    let schedule = cfg.schedule();
    let mut params = model.params();
    let mut velocity: Vec<ArrayD<f64>> = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut checkpoints = Vec::with_capacity(schedule.total_checkpoints());
    for epoch in 0..schedule.total_epochs {
        let lr = schedule.lr(epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<ArrayD<f64>>)> = batch
                .par_iter()
                .map(|&i| model.loss_and_grad(&data.pairs[i].0, &data.pairs[i].1))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            for (loss, grads) in &results {
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
                }
                epoch_loss += loss;
                for (v, g) in velocity.iter_mut().zip(grads) {
                    v.scaled_add(scale, g);
                }
            }
            for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
                p.scaled_add(-lr, v);
                v.mapv_inplace(|x| x * cfg.momentum);
            }
            model.set_params(params.clone())?;
        }
        epoch_loss /= data.len() as f64;
        log::debug!("weak epoch {epoch}: loss {epoch_loss:.6} lr {lr:.3e}");
        on_epoch(epoch, &model, epoch_loss)?;
        if let Some((cycle, slot)) = schedule.checkpoint_slot(epoch) {
            checkpoints.push(Checkpoint {
                meta: CheckpointMeta { cycle, epoch, lr },
                slot,
                model: model.clone(),
            });
        }
    }
    Ok(CheckpointEnsemble { checkpoints, schedule })
}

/// Mean of the checkpoints' class probabilities. Checkpoints run in
/// parallel; the sum is taken in checkpoint order.
pub fn ensemble_predict<M: SegModel>(ens: &CheckpointEnsemble<M>, image: &ImageTensor) -> Result<Array3<f64>> {
    if ens.is_empty() {
        return Err(Error::Empty("checkpoint ensemble".into()));
    }
    let preds: Vec<Array3<f64>> = ens
        .checkpoints
        .par_iter()
        .map(|c| c.model.predict(image))
        .collect::<Result<_>>()?;
    let mut sum = Array3::zeros(preds[0].raw_dim());
    for p in &preds {
        sum += p;
    }
    Ok(sum / preds.len() as f64)
}

/// Foreground (class 1) where its probability is at least `threshold`.
pub fn binarize_final(prob: &Array3<f64>, threshold: f64) -> Result<BinaryMask> {
    if prob.dim().0 < 2 {
        return Err(Error::Shape("need at least two classes".into()));
    }
    Ok(BinaryMask::new(prob.index_axis(Axis(0), 1).mapv(|p| p >= threshold)))
}

/// Per-pixel Shannon entropy of a class distribution, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub entropy: Array2<f64>,
    pub class_count: usize,
}

impl UncertaintyMap {
    pub fn max_entropy(&self) -> f64 {
        (self.class_count as f64).ln()
    }

    /// Mean entropy over the set pixels of `region`; `None` when empty.
    pub fn region_mean(&self, region: &BinaryMask) -> Option<f64> {
        let n = region.count();
        (n > 0).then(|| {
            self.entropy
                .iter()
                .zip(region.values().iter())
                .filter(|(_, &m)| m)
                .map(|(v, _)| v)
                .sum::<f64>()
                / n as f64
        })
    }
}

pub fn entropy_uncertainty(prob: &Array3<f64>) -> Result<UncertaintyMap> {
    let (r, h, w) = prob.dim();
    if r == 0 {
        return Err(Error::Shape("probability map has no classes".into()));
    }
    let max = (r as f64).ln();
    let mut entropy = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let col = prob.slice(ndarray::s![.., y, x]);
            if col.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("invalid probability at ({y}, {x})")));
            }
            let sum: f64 = col.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("class probabilities at ({y}, {x}) sum to {sum}")));
            }
            let e: f64 = -col.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
            entropy[[y, x]] = e.clamp(0.0, max);
        }
    }
    Ok(UncertaintyMap { entropy, class_count: r })
}

/// Edge pixels of `gt` grown by one pixel in every direction (8-neighbourhood).
pub fn boundary_band(gt: &BinaryMask) -> BinaryMask {
    let edge = boundary(gt);
    let (h, w) = gt.dim();
    BinaryMask::from_fn(h, w, |y, x| {
        (y.saturating_sub(1)..(y + 2).min(h)).any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| edge.get(yy, xx)))
    })
}

/// Foreground of `gt` outside [`boundary_band`].
pub fn interior(gt: &BinaryMask) -> BinaryMask {
    let band = boundary_band(gt);
    let (h, w) = gt.dim();
    BinaryMask::from_fn(h, w, |y, x| gt.get(y, x) && !band.get(y, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::planted_shapes;
    use proptest::prelude::*;
    use rand::Rng;

    /// Returns a fixed probability map regardless of input.
    #[derive(Clone)]
    struct Constant(Array3<f64>);

    impl SegModel for Constant {
        fn num_classes(&self) -> usize {
            self.0.dim().0
        }
        fn predict(&self, _: &ImageTensor) -> Result<Array3<f64>> {
            Ok(self.0.clone())
        }
        fn loss_and_grad(&self, _: &ImageTensor, _: &BinaryMask) -> Result<(f64, Vec<ArrayD<f64>>)> {
            Ok((0.0, vec![]))
        }
        fn params(&self) -> Vec<ArrayD<f64>> {
            vec![self.0.clone().into_dyn()]
        }
        fn set_params(&mut self, mut p: Vec<ArrayD<f64>>) -> Result<()> {
            self.0 = p.remove(0).into_dimensionality().unwrap();
            Ok(())
        }
    }

    fn ensemble_of(maps: Vec<Array3<f64>>) -> CheckpointEnsemble<Constant> {
        let n = maps.len();
        CheckpointEnsemble {
            checkpoints: maps
                .into_iter()
                .enumerate()
                .map(|(i, m)| Checkpoint {
                    meta: CheckpointMeta { cycle: 0, epoch: i, lr: 0.0 },
                    slot: i,
                    model: Constant(m),
                })
                .collect(),
            schedule: CycleSchedule {
                total_epochs: n.max(1),
                cycles: 1,
                checkpoints_per_cycle: n.max(1),
                lr_max: 0.0,
                lr_min: 0.0,
            },
        }
    }

    fn binary(fg: f64) -> Array3<f64> {
        Array3::from_shape_fn((2, 1, 1), |(c, _, _)| if c == 1 { fg } else { 1.0 - fg })
    }

    fn img() -> ImageTensor {
        ImageTensor::filled(4, 4, [0.5; 3]).unwrap()
    }

    #[test]
    fn two_checkpoint_mean() {
        let p = ensemble_predict(&ensemble_of(vec![binary(0.2), binary(0.6)]), &img()).unwrap();
        assert!((p[[1, 0, 0]] - 0.4).abs() < 1e-15);
        assert!((p[[0, 0, 0]] + p[[1, 0, 0]] - 1.0).abs() < 1e-15);
        assert!(ensemble_predict(&ensemble_of(vec![]), &img()).is_err());
    }

    #[test]
    fn identical_checkpoints() {
        let m = binary(0.37);
        let p = ensemble_predict(&ensemble_of(vec![m.clone(); 5]), &img()).unwrap();
        assert!((p[[1, 0, 0]] - 0.37).abs() < 1e-15);
    }

    fn random_prob(rng: &mut ChaCha8Rng, r: usize, h: usize, w: usize) -> Array3<f64> {
        let mut p = Array3::from_shape_simple_fn((r, h, w), || rng.random::<f64>() + 1e-3);
        for mut col in p.lanes_mut(Axis(0)) {
            let s = col.sum();
            col.mapv_inplace(|v| v / s);
        }
        p
    }

    proptest! {
        #[test]
        fn ensemble_matches_oracle_and_is_convex(seed in any::<u64>(), g in 1usize..6, r in 2usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps: Vec<_> = (0..g).map(|_| random_prob(&mut rng, r, 3, 5)).collect();
            let p = ensemble_predict(&ensemble_of(maps.clone()), &img()).unwrap();
            for (idx, &v) in p.indexed_iter() {
                let vals: Vec<f64> = maps.iter().map(|m| m[idx]).collect();
                let oracle = vals.iter().sum::<f64>() / g as f64;
                prop_assert!((v - oracle).abs() < 1e-9);
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
            }
            for col in p.lanes(Axis(0)) {
                prop_assert!((col.sum() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_bounds(seed in any::<u64>(), r in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_prob(&mut rng, r, 4, 4);
            let u = entropy_uncertainty(&p).unwrap();
            prop_assert!(u.entropy.iter().all(|&e| e > 0.0 && e <= (r as f64).ln()));
        }
    }

    #[test]
    fn entropy_values() {
        let u = entropy_uncertainty(&binary(0.5)).unwrap();
        assert_eq!(u.entropy[[0, 0]], std::f64::consts::LN_2);
        assert_eq!(entropy_uncertainty(&binary(1.0)).unwrap().entropy[[0, 0]], 0.0);
        assert_eq!(entropy_uncertainty(&binary(0.0)).unwrap().entropy[[0, 0]], 0.0);
        let e = entropy_uncertainty(&binary(0.1)).unwrap().entropy[[0, 0]];
        let oracle = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((e - oracle).abs() < 1e-15);
        assert!((e - 0.3251).abs() < 1e-4);
        let uniform = Array3::from_elem((3, 1, 1), 1.0 / 3.0);
        let e3 = entropy_uncertainty(&uniform).unwrap().entropy[[0, 0]];
        assert!(e3 <= 3f64.ln() && (e3 - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn entropy_rejects_bad_distributions() {
        let mut p = binary(0.5);
        p[[0, 0, 0]] = -0.1;
        p[[1, 0, 0]] = 1.1;
        assert!(entropy_uncertainty(&p).is_err());
        assert!(entropy_uncertainty(&Array3::from_elem((2, 1, 1), 0.4)).is_err());
    }

    #[test]
    fn binarize_convention() {
        let m = binarize_final(&binary(0.5), 0.5).unwrap();
        assert!(m.get(0, 0));
        let zeros = Array3::from_shape_fn((2, 3, 3), |(c, _, _)| if c == 0 { 1.0 } else { 0.0 });
        assert!(binarize_final(&zeros, 0.5).unwrap().is_empty());
        assert_eq!(binarize_final(&zeros, 0.0).unwrap().count(), 9);
    }

    #[test]
    fn band_and_interior_partition_foreground() {
        let gt = BinaryMask::from_fn(12, 12, |y, x| (2..10).contains(&y) && (3..9).contains(&x));
        let band = boundary_band(&gt);
        let inner = interior(&gt);
        assert!(band.get(2, 3) && band.get(1, 3) && band.get(3, 4) && !band.get(4, 5));
        assert_eq!(inner.count(), 4 * 2);
        assert!(inner.is_subset_of(&gt));
        assert!(inner.and(&band).unwrap().is_empty());
    }

    fn toy_cfg() -> WeakConfig {
        WeakConfig {
            epochs: 6,
            cycles: 3,
            checkpoints_per_cycle: 2,
            lr_max: 0.05,
            lr_min: 1e-3,
            channels: 4,
            batch_size: 2,
            ..WeakConfig::default()
        }
    }

    #[test]
    fn toy_training_checkpoints_and_determinism() {
        let pairs = planted_shapes(1, 6, 16).unwrap();
        let data = PseudoDataset::new(pairs, "toy").unwrap();
        let cfg = toy_cfg();
        let run = || train_weak(TinyUNet::new(cfg.unet()).unwrap(), &data, &cfg, |_, _, _| Ok(())).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.len(), 6);
        assert!(a.is_complete());
        let epochs: Vec<_> = a.checkpoints.iter().map(|c| (c.meta.cycle, c.meta.epoch, c.slot)).collect();
        assert_eq!(epochs, vec![(0, 0, 0), (0, 1, 1), (1, 2, 0), (1, 3, 1), (2, 4, 0), (2, 5, 1)]);
        for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
            assert_eq!(x.model.params(), y.model.params());
        }

        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path(), &cfg.unet()).unwrap();
        let template = TinyUNet::new(UNetConfig { channels: 4, seed: 99 }).unwrap();
        let loaded = CheckpointEnsemble::load(dir.path(), &template).unwrap();
        assert_eq!(loaded.len(), 6);
        for (x, y) in a.checkpoints.iter().zip(&loaded.checkpoints) {
            assert_eq!(x.model.params(), y.model.params());
            assert_eq!(x.meta, y.meta);
        }
        std::fs::remove_dir_all(dir.path().join("cycle_1").join("ckpt_1")).unwrap();
        let err = CheckpointEnsemble::load(dir.path(), &template).unwrap_err();
        assert!(err.to_string().contains("cycle 1 slot 1"), "{err}");
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = toy_cfg();
        let r = train_weak(TinyUNet::new(cfg.unet()).unwrap(), &PseudoDataset::default(), &cfg, |_, _, _| Ok(()));
        assert!(r.is_err());
    }
}
