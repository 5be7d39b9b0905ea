use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unictr_core::autodiff::Tape;
use unictr_core::backbone::BackboneConfig;
use unictr_core::batch::{Batch, EncodedSample};
use unictr_core::checkpoint;
use unictr_core::data::{generate, Dataset, Split, SynthConfig};
use unictr_core::dsn::DsnConfig;
use unictr_core::general::GeneralConfig;
use unictr_core::model::{MaskMode, ModelConfig, UniCtr};
use unictr_core::optim::Optimizer;
use unictr_core::prompt::PromptMode;
use unictr_core::trainer::{
    build_vocab, encode_dataset, evaluate, fit, masked_loss, train_step, Scoring, TrainConfig,
};
use unictr_core::{Error, Scalar};

fn data(seed: u64) -> Dataset {
    generate(&SynthConfig {
        samples_per_domain: vec![160, 160, 60],
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
    .dataset
}

fn model<T: Scalar>(ds: &Dataset, seed: u64) -> UniCtr<T> {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 64,
            ..Default::default()
        },
        general: GeneralConfig { tower_dims: vec![6] },
        ..Default::default()
    };
    let vocab = build_vocab(ds, PromptMode::Full, cfg.max_history, 4000).unwrap();
    let dsns = ds
        .domains()
        .iter()
        .map(|d| DsnConfig {
            domain_name: d.clone(),
            tap_frequency: 1,
            ladder_dim: 4,
            tower_dims: vec![6],
            ..Default::default()
        })
        .collect();
    UniCtr::new(cfg, vocab, dsns, seed).unwrap()
}

fn batch(enc: &[EncodedSample], idx: &[usize]) -> Batch {
    let refs: Vec<&EncodedSample> = idx.iter().map(|&i| &enc[i]).collect();
    Batch::from_samples(&refs)
}

fn loss<T: Scalar>(m: &UniCtr<T>, b: &Batch, mode: MaskMode) -> f64 {
    let mut tape = Tape::new();
    let vars = m.register(&mut tape);
    let taps = m.taps(&mut tape, &vars, b).unwrap();
    let pos = m.positions(b);
    let d = m.routed_domain_pred(&mut tape, &vars, &taps, &pos, mode, None).unwrap().unwrap();
    let g = m.general_out(&mut tape, &vars, &taps, None).unwrap();
    let t = masked_loss(&mut tape, d, g.tower.prob, &b.labels, 1.0).unwrap();
    tape.value(t.total).item().as_f64()
}

#[test]
fn strict_and_dispatch_losses_agree_over_100_seeds() {
    let ds = data(1);
    let m: UniCtr<f64> = model(&ds, 1);
    let enc = encode_dataset(&m, &ds).unwrap();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=12);
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ds.len())).collect();
        let b = batch(&enc, &idx);
        let (s, d) = (loss(&m, &b, MaskMode::Strict), loss(&m, &b, MaskMode::Dispatch));
        assert!((s - d).abs() <= 1e-7, "seed {seed}: {s} vs {d}");
    }
}

#[test]
fn corrupted_mask_is_caught() {
    let ds = data(2);
    let mut m: UniCtr<f32> = model(&ds, 2);
    let enc = encode_dataset(&m, &ds).unwrap();
    let one_domain = ds.indices(Split::Train, Some(&ds.domains()[0]));
    let cfg = TrainConfig {
        mask_mode: MaskMode::Strict,
        corrupt_mask: true,
        ..TrainConfig::default()
    };
    let mut opt = Optimizer::new(cfg.optimizer_config());
    let err = train_step(&mut m, &batch(&enc, &one_domain[..4]), &cfg, &mut opt, 1e-3, 1).unwrap_err();
    assert!(matches!(err, Error::Audit(_)), "{err}");

    let clean = TrainConfig {
        corrupt_mask: false,
        ..cfg
    };
    train_step(&mut m, &batch(&enc, &one_domain[..4]), &clean, &mut opt, 1e-3, 1).unwrap();
}

#[test]
fn frozen_groups_never_move() {
    let ds = data(3);
    let mut m: UniCtr<f32> = model(&ds, 3);
    let frozen = format!("dsn.{}", ds.domains()[1]);
    let before = m.fingerprints();
    let cfg = TrainConfig {
        epochs: 1,
        freeze: vec!["backbone".into(), frozen.clone()],
        ..TrainConfig::default()
    };
    fit(&mut m, &ds, &cfg).unwrap();
    let after = m.fingerprints();
    assert_eq!(before["backbone"], after["backbone"]);
    assert_eq!(before[&frozen], after[&frozen]);
    assert_ne!(before["general"], after["general"]);
}

#[test]
fn training_is_reproducible_and_checkpoints_preserve_predictions() {
    let ds = data(4);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m: UniCtr<f32> = model(&ds, 4);
        let r = fit(&mut m, &ds, &cfg).unwrap();
        (m, r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a.fingerprints(), b.fingerprints());
    assert_eq!(ra.records, rb.records);

    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&a, dir.path()).unwrap();
    let back: UniCtr<f32> = checkpoint::load(dir.path()).unwrap();
    let x = evaluate(&a, &ds, Split::Test, Scoring::Routed, 64).unwrap();
    let y = evaluate(&back, &ds, Split::Test, Scoring::Routed, 64).unwrap();
    for d in &x.domains {
        assert_eq!(d.auc, y.auc_of(&d.domain));
    }
}

#[test]
fn best_epoch_matches_reported_validation() {
    let ds = data(5);
    let mut m: UniCtr<f32> = model(&ds, 5);
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let r = fit(&mut m, &ds, &cfg).unwrap();
    let v = evaluate(&m, &ds, Split::Valid, Scoring::Routed, 64).unwrap();
    for d in ds.domains() {
        let series = r.series(&d, Split::Valid, "auc");
        assert_eq!(series.len(), 3);
        let kept = series[r.best_epoch - 1];
        assert!((kept - v.auc_of(&d).unwrap()).abs() <= 1e-7);
    }
}
