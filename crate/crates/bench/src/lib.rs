//! Fixtures shared by the benchmarks.

use unictr_core::backbone::BackboneConfig;
use unictr_core::batch::{Batch, EncodedSample};
use unictr_core::data::{generate, Dataset, SynthConfig};
use unictr_core::dsn::DsnConfig;
use unictr_core::general::GeneralConfig;
use unictr_core::model::{ModelConfig, UniCtr};
use unictr_core::prompt::PromptMode;
use unictr_core::trainer::{build_vocab, encode_dataset};

/// Three-domain synthetic data and the small model used by the acceptance
/// experiments.
pub fn tiny_setup(samples_per_domain: usize) -> (Dataset, UniCtr<f32>, Vec<EncodedSample>) {
    let ds = generate(&SynthConfig {
        samples_per_domain: vec![samples_per_domain; 3],
        ..SynthConfig::default()
    })
    .expect("valid synthetic config")
    .dataset;
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            max_seq_len: 64,
            ..Default::default()
        },
        general: GeneralConfig { tower_dims: vec![16, 8] },
        ..Default::default()
    };
    let vocab = build_vocab(&ds, PromptMode::Full, cfg.max_history, 8000).expect("vocabulary");
    let dsns = ds
        .domains()
        .iter()
        .map(|d| DsnConfig {
            domain_name: d.clone(),
            tap_frequency: 1,
            ladder_dim: 8,
            ladder_heads: 2,
            tower_dims: vec![16, 8],
            ..Default::default()
        })
        .collect();
    let model = UniCtr::new(cfg, vocab, dsns, 0).expect("model");
    let enc = encode_dataset(&model, &ds).expect("encoding");
    (ds, model, enc)
}

pub fn batch(enc: &[EncodedSample], size: usize) -> Batch {
    let refs: Vec<&EncodedSample> = enc.iter().step_by(enc.len() / size).take(size).collect();
    Batch::from_samples(&refs)
}
