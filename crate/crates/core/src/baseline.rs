//! Shared-bottom reference model over categorical IDs: one embedding table
//! per field, a shared MLP, and a linear head per domain. It sees no text.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, BCE_EPS};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::layers::{mix, Linear};
use crate::metrics::MetricsReport;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::ParamGroup;
use crate::prompt::InteractionRecord;
use crate::trainer::{epoch_batches, ReportRecord, TrainConfig, TrainReport};

/// Categorical fields, in feature order.
pub const FIELDS: [&str; 6] = ["domain", "user_id", "item_id", "brand", "history_1", "history_2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharedBottomConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Constant learning rate.
    pub lr: f64,
}

impl Default for SharedBottomConfig {
    fn default() -> Self {
        SharedBottomConfig {
            embed_dim: 16,
            hidden: vec![64, 32],
            lr: 1e-3,
        }
    }
}

fn field_values(r: &InteractionRecord) -> [&str; 6] {
    let h = &r.history;
    let last = h.last().map_or("", String::as_str);
    let prev = if h.len() >= 2 { h[h.len() - 2].as_str() } else { "" };
    [&r.domain_name, &r.user_id, &r.item_id, &r.brand, last, prev]
}

#[derive(Clone, Debug)]
pub struct SharedBottom {
    pub cfg: SharedBottomConfig,
    /// Per field: value → row. Row 0 is shared by unseen and empty values.
    vocab: Vec<HashMap<String, usize>>,
    domains: Vec<String>,
    pub group: ParamGroup<f32>,
    tables: Vec<usize>,
    bottom: Vec<Linear>,
    heads: Vec<Linear>,
}

impl SharedBottom {
    /// Field vocabularies come from the training split of `dataset`; one
    /// head per domain present there.
    pub fn new(cfg: SharedBottomConfig, dataset: &Dataset, seed: u64) -> Result<Self> {
        let train = dataset.indices(Split::Train, None);
        if train.is_empty() {
            return Err(Error::Validation("empty train split".into()));
        }
        let mut vocab: Vec<HashMap<String, usize>> = vec![HashMap::new(); FIELDS.len()];
        let mut domains = Vec::new();
        for &i in &train {
            let r = &dataset.records[i];
            if !domains.contains(&r.domain_name) {
                domains.push(r.domain_name.clone());
            }
            for (f, v) in field_values(r).iter().enumerate() {
                if !v.is_empty() {
                    let next = vocab[f].len() + 1;
                    vocab[f].entry(v.to_string()).or_insert(next);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0x5B]));
        let mut group = ParamGroup::new("shared_bottom");
        let e = cfg.embed_dim;
        let tables = FIELDS
            .iter()
            .enumerate()
            .map(|(f, name)| group.add_normal(format!("emb.{name}"), &[vocab[f].len() + 1, e], 0.05, &mut rng))
            .collect();
        let mut bottom = Vec::new();
        let mut prev = e * FIELDS.len();
        for (i, &h) in cfg.hidden.iter().enumerate() {
            bottom.push(Linear::new(&mut group, &format!("bottom.{i}"), prev, h, true, &mut rng));
            prev = h;
        }
        let heads = domains
            .iter()
            .enumerate()
            .map(|(m, _)| Linear::new(&mut group, &format!("head.{m}"), prev, 1, true, &mut rng))
            .collect();
        Ok(SharedBottom {
            cfg,
            vocab,
            domains,
            group,
            tables,
            bottom,
            heads,
        })
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    /// Row of each field for one record.
    pub fn features(&self, r: &InteractionRecord) -> [usize; 6] {
        let vals = field_values(r);
        std::array::from_fn(|f| self.vocab[f].get(vals[f]).copied().unwrap_or(0))
    }

    /// Click probabilities `[B, 1]`. Samples of a domain without a head get
    /// the mean of all heads.
    fn forward(&self, tape: &mut Tape<f32>, vars: &[Var], recs: &[&InteractionRecord]) -> Result<Var> {
        let b = recs.len();
        let feats: Vec<[usize; 6]> = recs.iter().map(|r| self.features(r)).collect();
        let mut embs = Vec::with_capacity(FIELDS.len());
        for (f, &t) in self.tables.iter().enumerate() {
            let ids: Arc<[usize]> = feats.iter().map(|x| x[f]).collect();
            embs.push(tape.gather(vars[t], ids, vec![b])?);
        }
        let mut h = tape.concat_last(&embs)?;
        for l in &self.bottom {
            h = l.forward(tape, vars, h)?;
            h = tape.relu(h)?;
        }
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); self.heads.len()];
        let mut unknown = Vec::new();
        for (i, r) in recs.iter().enumerate() {
            match self.domains.iter().position(|d| d == &r.domain_name) {
                Some(m) => rows[m].push(i),
                None => unknown.push(i),
            }
        }
        let mut out: Option<Var> = None;
        let mut place = |tape: &mut Tape<f32>, p: Var, rows: Arc<[usize]>| -> Result<()> {
            let placed = tape.scatter_rows(p, rows, b)?;
            out = Some(match out {
                Some(o) => tape.add(o, placed)?,
                None => placed,
            });
            Ok(())
        };
        for (m, rs) in rows.into_iter().enumerate() {
            if rs.is_empty() {
                continue;
            }
            let rs: Arc<[usize]> = rs.into();
            let x = tape.select_rows(h, rs.clone())?;
            let logit = self.heads[m].forward(tape, vars, x)?;
            let p = tape.sigmoid(logit)?;
            place(tape, p, rs)?;
        }
        if !unknown.is_empty() {
            let rs: Arc<[usize]> = unknown.into();
            let x = tape.select_rows(h, rs.clone())?;
            let mut acc: Option<Var> = None;
            for head in &self.heads {
                let logit = head.forward(tape, vars, x)?;
                let p = tape.sigmoid(logit)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, p)?,
                    None => p,
                });
            }
            let mean = tape.scale(acc.expect("at least one head"), 1.0 / self.heads.len() as f32)?;
            place(tape, mean, rs)?;
        }
        Ok(out.expect("non-empty batch"))
    }

    pub fn predict(&self, recs: &[&InteractionRecord]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(recs.len());
        for chunk in recs.chunks(512) {
            let mut tape = Tape::new();
            let vars = self.group.register(&mut tape);
            let p = self.forward(&mut tape, &vars, chunk)?;
            out.extend(tape.value(p).to_f64_vec());
        }
        Ok(out)
    }

    /// Per-domain AUC of one split.
    pub fn evaluate(&self, dataset: &Dataset, split: Split) -> Result<MetricsReport> {
        let idx = dataset.indices(split, None);
        let recs: Vec<&InteractionRecord> = idx.iter().map(|&i| &dataset.records[i]).collect();
        let scores = self.predict(&recs)?;
        let labels: Vec<u8> = recs.iter().map(|r| r.label).collect();
        let domains: Vec<&str> = recs.iter().map(|r| r.domain_name.as_str()).collect();
        Ok(MetricsReport::from_scores(&scores, &labels, &domains))
    }

    fn step(&mut self, recs: &[&InteractionRecord], opt: &mut Optimizer<f32>, lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.group.register(&mut tape);
        let p = self.forward(&mut tape, &vars, recs)?;
        let y: Arc<[f32]> = recs.iter().map(|r| f32::from(r.label)).collect();
        let per = tape.bce(p, y, BCE_EPS as f32)?;
        let s = tape.sum(per)?;
        let loss = tape.scale(s, 1.0 / recs.len() as f32)?;
        let value = f64::from(tape.value(loss).item());
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite shared-bottom loss".into()));
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut [&mut self.group], &grads, lr)?;
        Ok(value)
    }
}

/// Trains the shared-bottom model on the training split with the batch
/// size, epoch count, optimizer and seed of `train_cfg` and a constant
/// learning rate, keeping the epoch with the best mean validation AUC.
pub fn train_shared_bottom(
    dataset: &Dataset,
    cfg: &SharedBottomConfig,
    train_cfg: &TrainConfig,
) -> Result<(SharedBottom, TrainReport)> {
    train_cfg.validate()?;
    let mut model = SharedBottom::new(cfg.clone(), dataset, train_cfg.seed)?;
    let train = dataset.indices(Split::Train, None);
    if dataset.indices(Split::Valid, None).is_empty() {
        return Err(Error::Validation("empty valid split".into()));
    }
    let mut opt = Optimizer::new(OptimizerConfig {
        kind: train_cfg.optimizer,
        weight_decay: train_cfg.weight_decay,
        ..OptimizerConfig::default()
    });
    let mut report = TrainReport::default();
    let mut best: Option<(f64, SharedBottom)> = None;
    for epoch in 0..train_cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(&train, train_cfg.batch_size, train_cfg.seed, epoch);
        for rows in &batches {
            let recs: Vec<&InteractionRecord> = rows.iter().map(|&i| &dataset.records[i]).collect();
            total += model.step(&recs, &mut opt, cfg.lr)? * rows.len() as f64;
        }
        report.records.push(ReportRecord {
            epoch: epoch + 1,
            domain: "all".into(),
            split: "train".into(),
            metric: "loss".into(),
            value: total / train.len() as f64,
        });
        let valid = model.evaluate(dataset, Split::Valid)?;
        let mut aucs = Vec::new();
        for d in &valid.domains {
            if let Some(a) = d.auc {
                aucs.push(a);
                report.records.push(ReportRecord {
                    epoch: epoch + 1,
                    domain: d.domain.clone(),
                    split: "valid".into(),
                    metric: "auc".into(),
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
        model = m;
    }
    Ok((model, report))
}
