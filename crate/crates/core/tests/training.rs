use promptseg_core::synthetic::{paired_corpus, planted_shapes};
use promptseg_core::weak::{ensemble_predict, train_weak, CheckpointEnsemble, PseudoDataset, TinyUNet, WeakConfig};
use promptseg_core::{finetune, make_synthetic_encoder, FinetuneConfig, ImageTensor, LossConfig, TextPrompt};

fn corpus(seed: u64, n: usize) -> Vec<(ImageTensor, TextPrompt)> {
    paired_corpus(seed, n, 64, 8).unwrap().into_iter().map(|p| (p.image, p.caption)).collect()
}

#[test]
fn finetuning_is_seeded_and_lowers_the_loss() {
    let data = corpus(5, 120);
    let enc = make_synthetic_encoder(2, 128, None).unwrap();
    let cfg = FinetuneConfig {
        learning_rate: 20.0,
        decay_rate: 0.5,
        batch_size: 32,
        epochs: 3,
        split_fraction: 0.8,
        seed: 9,
        loss: LossConfig::default(),
    };
    let a = finetune(&enc, &data, &cfg, |_, _| Ok(())).unwrap();
    let b = finetune(&enc, &data, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(a.last, b.last);
    let losses: Vec<f64> = a.log.epochs.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses, b.log.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>());
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
}

#[test]
fn saved_ensemble_predicts_identically() {
    let data = PseudoDataset::new(planted_shapes(3, 4, 16).unwrap(), "shapes").unwrap();
    let cfg = WeakConfig {
        channels: 4,
        seed: 1,
        ..WeakConfig::toy()
    };
    let template = TinyUNet::new(cfg.unet()).unwrap();
    let ens = train_weak(template.clone(), &data, &cfg, |_, _, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ens.save(dir.path(), &cfg.unet()).unwrap();
    let back = CheckpointEnsemble::load(dir.path(), &template).unwrap();
    assert_eq!(back.len(), ens.len());
    let probe = &data.pairs[0].0;
    assert_eq!(ensemble_predict(&back, probe).unwrap(), ensemble_predict(&ens, probe).unwrap());
}
