//! Tokenized samples and mini-batches.

use std::sync::Arc;

use sha2::{Digest, Sha256};

/// A record after rendering and tokenization. Ids past `len` are padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSample {
    pub ids: Vec<u32>,
    pub len: usize,
    pub label: u8,
    pub domain: Arc<str>,
    pub sample_id: u64,
}

/// Row-major `[B, S]` token ids trimmed to the longest sample in the batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
    pub labels: Vec<u8>,
    pub domains: Vec<Arc<str>>,
    pub sample_ids: Vec<u64>,
}

impl Batch {
    pub fn from_samples(samples: &[&EncodedSample]) -> Self {
        let seq = samples.iter().map(|s| s.len).max().unwrap_or(1).max(1);
        let batch = samples.len();
        let mut ids = Vec::with_capacity(batch * seq);
        let mut mask = Vec::with_capacity(batch * seq);
        for s in samples {
            for p in 0..seq {
                ids.push(s.ids.get(p).copied().unwrap_or(0) as usize);
                mask.push(p < s.len);
            }
        }
        Batch {
            ids,
            mask,
            batch,
            seq,
            labels: samples.iter().map(|s| s.label).collect(),
            domains: samples.iter().map(|s| s.domain.clone()).collect(),
            sample_ids: samples.iter().map(|s| s.sample_id).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    /// Short hash of the sample ids, for error messages.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.sample_ids {
            h.update(id.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}
