//! Masked-loss training: loss composition, single optimizer steps with
//! decoupling audits, the epoch loop with best-validation retention, and
//! domain extension on a frozen model.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var, BCE_EPS};
use crate::batch::{Batch, EncodedSample};
use crate::data::{Dataset, Split};
use crate::dsn::DsnConfig;
use crate::error::{Error, Result};
use crate::gradcheck::Parametrized;
use crate::layers::{mix, Dropout};
use crate::metrics::MetricsReport;
use crate::model::{MaskMode, ModelVars, Predictions, UniCtr};
use crate::optim::{cyclic_lr, Optimizer, OptimizerConfig, OptimizerKind};
use crate::params::ParamGroup;
use crate::prompt::{render_prompt, PromptMode};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_low: f64,
    pub lr_high: f64,
    /// Length of one triangular learning-rate cycle, in epochs.
    pub cycle_epochs: f64,
    pub optimizer: OptimizerKind,
    /// Decoupled for AdamW, added to the gradient for SGD.
    pub weight_decay: f64,
    pub dropout: f64,
    /// Weight of the general-head term in the total loss.
    pub general_loss_weight: f64,
    pub mask_mode: MaskMode,
    pub eval_batch_size: usize,
    /// Parameter groups kept frozen for the whole run.
    pub freeze: Vec<String>,
    pub seed: u64,
    /// Test hook: every domain network contributes to every sample, which
    /// must trip the decoupling audit.
    #[doc(hidden)]
    #[serde(skip)]
    pub corrupt_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 8,
            lr_low: 1e-4,
            lr_high: 1e-3,
            cycle_epochs: 4.0,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.0,
            dropout: 0.3,
            general_loss_weight: 1.0,
            mask_mode: MaskMode::Dispatch,
            eval_batch_size: 256,
            freeze: Vec::new(),
            seed: 0,
            corrupt_mask: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr_low > 0.0 && self.lr_low <= self.lr_high && self.lr_high.is_finite()) {
            return Err(Error::Config(format!(
                "learning-rate bounds must satisfy 0 < low <= high, got [{}, {}]",
                self.lr_low, self.lr_high
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.weight_decay >= 0.0 && self.general_loss_weight >= 0.0) {
            return Err(Error::Config("weight decay and general loss weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            weight_decay: self.weight_decay,
            ..OptimizerConfig::default()
        }
    }

    pub fn lr_at(&self, progress: f64) -> f64 {
        cyclic_lr(self.lr_low, self.lr_high, self.cycle_epochs, progress)
    }
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// `L^D + w·L^G`.
    pub total: Var,
    pub domain: Var,
    pub general: Var,
    /// Per-sample domain BCE, `[B, 1]`.
    pub domain_per_sample: Var,
    pub general_per_sample: Var,
}

/// `L^D` from the routed domain predictions and `L^G` from the general
/// predictions, both `[B, 1]`. Each term is the per-sample BCE summed in
/// batch order and scaled by `1/B`.
pub fn masked_loss<T: Scalar>(
    tape: &mut Tape<T>,
    domain_pred: Var,
    general_pred: Var,
    labels: &[u8],
    general_weight: f64,
) -> Result<LossTerms> {
    let b = labels.len();
    if b == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    let y: Arc<[T]> = labels.iter().map(|&l| T::of(f64::from(l))).collect();
    crate::autodiff::validate_labels(&y)?;
    let inv_b = T::of(1.0 / b as f64);
    let eps = T::of(BCE_EPS);
    let domain_per_sample = tape.bce(domain_pred, y.clone(), eps)?;
    let ld = tape.sum(domain_per_sample)?;
    let ld = tape.scale(ld, inv_b)?;
    let general_per_sample = tape.bce(general_pred, y, eps)?;
    let lg = tape.sum(general_per_sample)?;
    let lg = tape.scale(lg, inv_b)?;
    let weighted = tape.scale(lg, T::of(general_weight))?;
    let total = tape.add(ld, weighted)?;
    Ok(LossTerms {
        total,
        domain: ld,
        general: lg,
        domain_per_sample,
        general_per_sample,
    })
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAudit {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub domain_loss: f64,
    pub general_loss: f64,
    pub batch: String,
    pub batch_size: usize,
    /// Groups whose gradient norm was nonzero, in model order.
    pub updated: Vec<String>,
    #[serde(skip)]
    pub per_sample_domain_loss: Vec<f64>,
    #[serde(skip)]
    pub per_sample_general_loss: Vec<f64>,
}

fn group_grad_sq_norm<T: Scalar>(g: &ParamGroup<T>, grads: &Gradients<T>) -> Option<f64> {
    let mut any = false;
    let mut s = 0.0;
    for i in 0..g.len() {
        if let Some(t) = grads.param(g.key(i)) {
            any = true;
            s += t.sq_norm();
        }
    }
    any.then_some(s)
}

/// Forward, backward and one update on `batch`.
///
/// Before updating it checks that (a) every domain network without samples
/// in the batch has an exactly zero gradient, (b) frozen groups received no
/// gradient, and (c) the backbone and general head, unless frozen, received
/// one. Domain networks without samples are then left out of the update, so
/// optimizer state only advances for groups the batch actually trained.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    model: &mut UniCtr<T>,
    batch: &Batch,
    cfg: &TrainConfig,
    opt: &mut Optimizer<T>,
    lr: f64,
    epoch: usize,
) -> Result<StepAudit> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let positions = model.positions(batch);
    if let Some(r) = positions.iter().position(|p| p.is_none()) {
        return Err(Error::Registry(format!(
            "training sample from unregistered domain `{}`",
            batch.domains[r]
        )));
    }
    let step = opt.steps();
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let taps = model.taps(&mut tape, &vars, batch)?;
    let dropout = (cfg.dropout > 0.0).then(|| Dropout {
        rate: cfg.dropout,
        seed: mix(&[cfg.seed, 0xD0]),
        step,
        sample_ids: batch.sample_ids.as_slice().into(),
    });
    let domain_pred = if cfg.corrupt_mask {
        corrupted_pred(model, &mut tape, &vars, &taps, dropout.as_ref())?
    } else {
        model
            .routed_domain_pred(&mut tape, &vars, &taps, &positions, cfg.mask_mode, dropout.as_ref())?
            .ok_or_else(|| Error::Registry("model has no domain networks".into()))?
    };
    let general = model.general_out(&mut tape, &vars, &taps, dropout.as_ref())?;
    let terms = masked_loss(&mut tape, domain_pred, general.tower.prob, &batch.labels, cfg.general_loss_weight)?;
    let loss = tape.value(terms.total).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss at step {step}, batch {}",
            batch.fingerprint()
        )));
    }
    let grads = tape.backward(terms.total)?;

    let mut present = vec![false; model.dsns().len()];
    for p in positions.iter().flatten() {
        present[*p] = true;
    }
    let mut updated = Vec::new();
    let mut active = Vec::new();
    let n_dsn = model.dsns().len();
    for (gi, g) in model.groups().into_iter().enumerate() {
        let norm = group_grad_sq_norm(g, &grads);
        let is_dsn = (1..=n_dsn).contains(&gi);
        if g.frozen {
            if norm.is_some() {
                return Err(Error::Audit(format!("frozen group {} received a gradient", g.name())));
            }
            continue;
        }
        if is_dsn && !present[gi - 1] {
            if norm.is_some_and(|n| n != 0.0) {
                return Err(Error::Audit(format!(
                    "domain network {} has no samples in batch {} but a nonzero gradient",
                    g.name(),
                    batch.fingerprint()
                )));
            }
            continue;
        }
        if !is_dsn && norm.is_none() {
            return Err(Error::Audit(format!("group {} received no gradient", g.name())));
        }
        if norm.is_some_and(|n| n != 0.0) {
            updated.push(g.name().to_string());
        }
        active.push(gi);
    }
    {
        let mut groups: Vec<&mut ParamGroup<T>> = model
            .groups_mut()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| active.contains(i))
            .map(|(_, g)| g)
            .collect();
        opt.step(&mut groups, &grads, lr)?;
    }
    Ok(StepAudit {
        step,
        epoch,
        lr,
        loss,
        domain_loss: tape.value(terms.domain).item().as_f64(),
        general_loss: tape.value(terms.general).item().as_f64(),
        batch: batch.fingerprint(),
        batch_size: batch.batch,
        updated,
        per_sample_domain_loss: tape.value(terms.domain_per_sample).to_f64_vec(),
        per_sample_general_loss: tape.value(terms.general_per_sample).to_f64_vec(),
    })
}

/// Sum over all domain networks with an all-ones mask.
fn corrupted_pred<T: Scalar>(
    model: &UniCtr<T>,
    tape: &mut Tape<T>,
    vars: &ModelVars,
    taps: &crate::backbone::TapSet,
    dropout: Option<&Dropout>,
) -> Result<Var> {
    let all = model.all_dsn_probs(tape, vars, taps, dropout)?;
    let ones = tape.constant(Tensor::full(&[taps.batch, model.dsns().len()], T::one()));
    let masked = tape.mul(all, ones)?;
    let s = tape.sum_last(masked)?;
    let scaled = tape.scale(s, T::of(1.0 / model.dsns().len() as f64))?;
    tape.reshape(scaled, vec![taps.batch, 1])
}

/// Vocabulary over the rendered prompts of the training split.
pub fn build_vocab(dataset: &Dataset, mode: PromptMode, max_history: usize, max_size: usize) -> Result<Vocabulary> {
    let mut texts = Vec::new();
    for i in dataset.indices(Split::Train, None) {
        let mut r = dataset.records[i].clone();
        r.truncate_history(max_history);
        texts.push(render_prompt(&r, mode)?);
    }
    Vocabulary::build(texts.iter().map(String::as_str), max_size)
}

/// Encodes every record; the sample id is the record index.
pub fn encode_dataset<T: Scalar>(model: &UniCtr<T>, dataset: &Dataset) -> Result<Vec<EncodedSample>> {
    dataset
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| model.encode(r, i as u64))
        .collect()
}

fn worker_count() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(16)
}

/// Evaluation-mode predictions for `samples`, in the given order. Samples
/// are batched by length; each prediction depends only on its own sample,
/// so batching and sharding do not change any value.
pub fn predict_samples<T: Scalar>(
    model: &UniCtr<T>,
    samples: &[&EncodedSample],
    batch_size: usize,
    mode: MaskMode,
) -> Result<Predictions<T>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by_key(|&i| samples[i].len);
    let chunks: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    let workers = worker_count().min(chunks.len()).max(1);
    let results: Vec<Result<Vec<(usize, Predictions<T>)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let chunks = &chunks;
                s.spawn(move || {
                    let mut out = Vec::new();
                    for (c, chunk) in chunks.iter().enumerate().skip(w).step_by(workers) {
                        let refs: Vec<&EncodedSample> = chunk.iter().map(|&i| samples[i]).collect();
                        out.push((c, model.predict(&Batch::from_samples(&refs), mode)?));
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("prediction worker panicked")).collect()
    });
    let n = samples.len();
    let mut routed = vec![T::zero(); n];
    let mut general = vec![T::zero(); n];
    let mut positions = vec![None; n];
    for part in results {
        for (c, p) in part? {
            for (k, &i) in chunks[c].iter().enumerate() {
                routed[i] = p.routed[k];
                general[i] = p.general[k];
                positions[i] = p.positions[k];
            }
        }
    }
    Ok(Predictions {
        routed,
        general,
        positions,
    })
}

/// Which output is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scoring {
    /// Own domain network for known domains, general head otherwise.
    Routed,
    /// General head for every sample.
    General,
}

/// Per-sample scores of one split.
pub struct SplitScores {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub domains: Vec<String>,
}

impl SplitScores {
    pub fn report(&self) -> MetricsReport {
        let d: Vec<&str> = self.domains.iter().map(String::as_str).collect();
        MetricsReport::from_scores(&self.scores, &self.labels, &d)
    }
}

pub fn score_split<T: Scalar>(
    model: &UniCtr<T>,
    dataset: &Dataset,
    encoded: &[EncodedSample],
    split: Split,
    scoring: Scoring,
    batch_size: usize,
) -> Result<SplitScores> {
    let indices = dataset.indices(split, None);
    let refs: Vec<&EncodedSample> = indices.iter().map(|&i| &encoded[i]).collect();
    let p = predict_samples(model, &refs, batch_size, MaskMode::Dispatch)?;
    let src = match scoring {
        Scoring::Routed => &p.routed,
        Scoring::General => &p.general,
    };
    Ok(SplitScores {
        scores: src.iter().map(|v| v.as_f64()).collect(),
        labels: indices.iter().map(|&i| dataset.records[i].label).collect(),
        domains: indices.iter().map(|&i| dataset.records[i].domain_name.clone()).collect(),
        indices,
    })
}

/// Encodes the dataset and scores one split.
pub fn evaluate<T: Scalar>(
    model: &UniCtr<T>,
    dataset: &Dataset,
    split: Split,
    scoring: Scoring,
    batch_size: usize,
) -> Result<MetricsReport> {
    let encoded = encode_dataset(model, dataset)?;
    Ok(score_split(model, dataset, &encoded, split, scoring, batch_size)?.report())
}

/// One line of a training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub epoch: usize,
    pub domain: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    pub records: Vec<ReportRecord>,
    pub audits: Vec<StepAudit>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub best_valid_auc: Option<f64>,
    /// Checksums of groups verified unchanged by a domain extension.
    pub frozen_checksums: BTreeMap<String, String>,
}

impl TrainReport {
    /// Values of `metric` for `domain` on `split`, in epoch order.
    pub fn series(&self, domain: &str, split: Split, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.domain == domain && r.split == split.as_str() && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    /// Metric records as JSONL.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_lines(path, &self.records)
    }

    /// One JSONL line per optimizer step.
    pub fn write_audit_jsonl(&self, path: &Path) -> Result<()> {
        write_lines(path, &self.audits)
    }
}

fn write_lines<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Shuffled training batches for one epoch.
pub fn epoch_batches(train: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0xE0, epoch as u64]));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Trains for `cfg.epochs` epochs and leaves `model` at the epoch with the
/// best mean validation AUC over registered domains.
pub fn fit<T: Scalar>(model: &mut UniCtr<T>, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut opt = Optimizer::new(cfg.optimizer_config());
    fit_with(model, dataset, cfg, &mut opt, |_, _| {})
}

/// [`fit`] with a caller-owned optimizer and a callback run after every
/// step with the batch and its audit.
pub fn fit_with<T: Scalar>(
    model: &mut UniCtr<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    opt: &mut Optimizer<T>,
    mut on_step: impl FnMut(&Batch, &StepAudit),
) -> Result<TrainReport> {
    cfg.validate()?;
    for name in &cfg.freeze {
        model.set_frozen(name, true)?;
    }
    let train = dataset.indices(Split::Train, None);
    let valid = dataset.indices(Split::Valid, None);
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Validation("training needs non-empty train and valid splits".into()));
    }
    for i in &train {
        let d = &dataset.records[*i].domain_name;
        if model.registry().position(d).is_none() {
            return Err(Error::Registry(format!("training sample from unregistered domain `{d}`")));
        }
    }
    let encoded = encode_dataset(model, dataset)?;
    let domains: Vec<String> = model
        .registry()
        .names()
        .iter()
        .filter(|d| dataset.count(d) > 0)
        .cloned()
        .collect();

    let mut report = TrainReport::default();
    let mut best: Option<(f64, UniCtr<T>)> = None;
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(&train, cfg.batch_size, cfg.seed, epoch);
        let nb = batches.len() as f64;
        let mut loss_sum: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
        for (k, rows) in batches.iter().enumerate() {
            let refs: Vec<&EncodedSample> = rows.iter().map(|&i| &encoded[i]).collect();
            let batch = Batch::from_samples(&refs);
            let lr = cfg.lr_at(epoch as f64 + k as f64 / nb);
            let audit = train_step(model, &batch, cfg, opt, lr, epoch + 1)?;
            for (j, &i) in rows.iter().enumerate() {
                let e = loss_sum.entry(dataset.records[i].domain_name.as_str()).or_default();
                e.0 += audit.per_sample_domain_loss[j];
                e.1 += audit.per_sample_general_loss[j];
                e.2 += 1;
            }
            on_step(&batch, &audit);
            report.audits.push(audit);
        }
        for (d, (ld, lg, n)) in &loss_sum {
            for (metric, v) in [("loss", ld), ("general_loss", lg)] {
                report.records.push(ReportRecord {
                    epoch: epoch + 1,
                    domain: d.to_string(),
                    split: "train".into(),
                    metric: metric.into(),
                    value: v / *n as f64,
                });
            }
        }
        let routed = score_split(model, dataset, &encoded, Split::Valid, Scoring::Routed, cfg.eval_batch_size)?.report();
        let general = score_split(model, dataset, &encoded, Split::Valid, Scoring::General, cfg.eval_batch_size)?.report();
        let mut aucs = Vec::new();
        for d in &domains {
            if let Some(a) = routed.auc_of(d) {
                aucs.push(a);
                report.records.push(ReportRecord {
                    epoch: epoch + 1,
                    domain: d.clone(),
                    split: "valid".into(),
                    metric: "auc".into(),
                    value: a,
                });
            }
            if let Some(a) = general.auc_of(d) {
                report.records.push(ReportRecord {
                    epoch: epoch + 1,
                    domain: d.clone(),
                    split: "valid".into(),
                    metric: "general_auc".into(),
                    value: a,
                });
            }
        }
        let score = if aucs.is_empty() {
            f64::NEG_INFINITY
        } else {
            aucs.iter().sum::<f64>() / aucs.len() as f64
        };
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            report.best_epoch = epoch + 1;
            report.best_valid_auc = score.is_finite().then_some(score);
            best = Some((score, model.clone()));
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(report)
}

/// Adds a domain network for a new domain and trains only it. Every group
/// that existed before is frozen for the run and verified bit-identical
/// afterwards; their frozen flags are then restored.
pub fn extend_domain<T: Scalar>(
    model: &mut UniCtr<T>,
    new_data: &Dataset,
    dsn_cfg: DsnConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let name = dsn_cfg.domain_name.clone();
    if model.registry().position(&name).is_some() {
        return Err(Error::Registry(format!("domain `{name}` is already registered")));
    }
    let data = new_data.restrict(&[name.as_str()]);
    if data.is_empty() {
        return Err(Error::Validation(format!("no samples for new domain `{name}`")));
    }
    let before = model.fingerprints();
    let checksums = model.checksums();
    let flags: Vec<(String, bool)> = model.groups().iter().map(|g| (g.name().to_string(), g.frozen)).collect();
    model.freeze_all();
    let dsn = model.build_dsn(dsn_cfg)?;
    model.attach(dsn)?;
    let cfg = TrainConfig {
        freeze: Vec::new(),
        ..cfg.clone()
    };
    let mut report = fit(model, &data, &cfg)?;
    let after = model.fingerprints();
    for (g, fp) in &before {
        if after.get(g) != Some(fp) {
            return Err(Error::Audit(format!("frozen group {g} changed during domain extension")));
        }
    }
    for (g, frozen) in flags {
        model.set_frozen(&g, frozen)?;
    }
    report.frozen_checksums = checksums;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_loss_is_two_ln_two() {
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let g = tape.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let t = masked_loss(&mut tape, d, g, &[1], 1.0).unwrap();
        let l = tape.value(t.total).item();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn additivity() {
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::new(vec![3, 1], vec![0.2, 0.7, 0.9]).unwrap());
        let g = tape.constant(Tensor::new(vec![3, 1], vec![0.4, 0.5, 0.1]).unwrap());
        let t = masked_loss(&mut tape, d, g, &[0, 1, 1], 1.0).unwrap();
        let sum = tape.value(t.domain).item() + tape.value(t.general).item();
        assert!((tape.value(t.total).item() - sum).abs() < 1e-12);
    }

    #[test]
    fn lr_bounds() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0.0), cfg.lr_low);
        assert_eq!(cfg.lr_at(2.0), cfg.lr_high);
        assert_eq!(cfg.lr_at(4.0), cfg.lr_low);
        assert!(TrainConfig { lr_low: 2.0, lr_high: 1.0, ..cfg }.validate().is_err());
    }
}
