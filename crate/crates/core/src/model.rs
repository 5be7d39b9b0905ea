//! The assembled model: shared backbone, one domain network per registered
//! domain, and the general head.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, TapSet};
use crate::batch::{Batch, EncodedSample};
use crate::dsn::{DomainSpecificNetwork, DsnConfig, DsnOut};
use crate::error::{Error, Result};
use crate::general::{GeneralConfig, GeneralHead, GeneralOut};
use crate::gradcheck::Parametrized;
use crate::layers::{mix, site_of, Dropout};
use crate::params::ParamGroup;
use crate::prompt::{render_prompt, InteractionRecord, PromptMode, DEFAULT_MAX_HISTORY};
use crate::registry::DomainRegistry;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::{tokenize, Vocabulary};

/// How domain-network outputs are combined with the domain mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Each sample goes only through its own domain's network.
    #[default]
    Dispatch,
    /// Every network runs on every sample and the mask zeroes the others.
    Strict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub general: GeneralConfig,
    pub prompt_mode: PromptMode,
    pub max_history: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            general: GeneralConfig::default(),
            prompt_mode: PromptMode::Full,
            max_history: DEFAULT_MAX_HISTORY,
        }
    }
}

/// Parameter registrations of every group on one tape.
pub struct ModelVars {
    pub backbone: Vec<Var>,
    pub dsns: Vec<Vec<Var>>,
    pub general: Vec<Var>,
}

/// Per-sample outputs of one evaluation pass.
#[derive(Clone, Debug)]
pub struct Predictions<T> {
    /// Routed prediction: own domain network for known domains, general head
    /// otherwise.
    pub routed: Vec<T>,
    pub general: Vec<T>,
    /// Registry position of each sample's domain.
    pub positions: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct UniCtr<T> {
    pub cfg: ModelConfig,
    pub backbone: Backbone<T>,
    dsns: Vec<DomainSpecificNetwork<T>>,
    pub general: GeneralHead<T>,
    registry: DomainRegistry,
    pub vocab: Vocabulary,
    seed: u64,
}

impl<T: Scalar> UniCtr<T> {
    /// Builds a model with one domain network per entry of `dsn_cfgs`, in
    /// order. `cfg.backbone.vocab_size` is taken from `vocab`.
    pub fn new(mut cfg: ModelConfig, vocab: Vocabulary, dsn_cfgs: Vec<DsnConfig>, seed: u64) -> Result<Self> {
        cfg.backbone.vocab_size = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 1]));
        let backbone = Backbone::new(cfg.backbone.clone(), &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 2]));
        let general = GeneralHead::new(cfg.general.clone(), &cfg.backbone, &mut rng);
        let mut model = UniCtr {
            cfg,
            backbone,
            dsns: Vec::new(),
            general,
            registry: DomainRegistry::new(),
            vocab,
            seed,
        };
        for c in dsn_cfgs {
            let dsn = model.build_dsn(c)?;
            model.attach(dsn)?;
        }
        Ok(model)
    }

    /// Fresh domain network compatible with this backbone. Its
    /// initialization depends on the model seed and the domain name only.
    pub fn build_dsn(&self, cfg: DsnConfig) -> Result<DomainSpecificNetwork<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.seed, 3, site_of(&cfg.domain_name, 0)]));
        DomainSpecificNetwork::new(cfg, &self.cfg.backbone, &mut rng)
    }

    pub fn attach(&mut self, dsn: DomainSpecificNetwork<T>) -> Result<()> {
        if self.registry.position(dsn.domain()).is_some() {
            return Err(Error::Registry(format!("domain `{}` is already registered", dsn.domain())));
        }
        dsn.cfg.num_ladders(self.cfg.backbone.num_layers)?;
        self.registry.register(dsn.domain())?;
        self.dsns.push(dsn);
        Ok(())
    }

    pub fn detach(&mut self, name: &str) -> Result<DomainSpecificNetwork<T>> {
        let pos = self.registry.remove(name)?;
        Ok(self.dsns.remove(pos))
    }

    pub fn registry(&self) -> &DomainRegistry {
        &self.registry
    }

    pub fn dsns(&self) -> &[DomainSpecificNetwork<T>] {
        &self.dsns
    }

    pub fn dsns_mut(&mut self) -> &mut [DomainSpecificNetwork<T>] {
        &mut self.dsns
    }

    pub fn dsn(&self, name: &str) -> Option<&DomainSpecificNetwork<T>> {
        self.registry.position(name).map(|i| &self.dsns[i])
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup<T>> {
        self.groups().into_iter().find(|g| g.name() == name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup<T>> {
        self.groups_mut().into_iter().find(|g| g.name() == name)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let g = self
            .group_mut(name)
            .ok_or_else(|| Error::Registry(format!("no parameter group `{name}`")))?;
        g.frozen = frozen;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for g in self.groups_mut() {
            g.frozen = true;
        }
    }

    /// Checkpoint-encoding checksum of every group.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.groups()
            .into_iter()
            .map(|g| (g.name().to_string(), g.checksum()))
            .collect()
    }

    /// Bit-exact fingerprint of every group in its own precision.
    pub fn fingerprints(&self) -> BTreeMap<String, String> {
        self.groups()
            .into_iter()
            .map(|g| (g.name().to_string(), g.fingerprint()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.groups().iter().map(|g| g.num_scalars()).sum()
    }

    pub fn encode(&self, rec: &InteractionRecord, sample_id: u64) -> Result<EncodedSample> {
        let mut rec = rec.clone();
        rec.truncate_history(self.cfg.max_history);
        let text = render_prompt(&rec, self.cfg.prompt_mode)?;
        let seq = tokenize(&text, &self.vocab, self.cfg.backbone.max_seq_len)?;
        Ok(EncodedSample {
            len: seq.len_unpadded(),
            ids: seq.ids.iter().map(|&i| i as u32).collect(),
            label: rec.label,
            domain: rec.domain_name.as_str().into(),
            sample_id,
        })
    }

    pub fn register(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            backbone: self.backbone.group.register(tape),
            dsns: self.dsns.iter().map(|d| d.group.register(tape)).collect(),
            general: self.general.group.register(tape),
        }
    }

    pub fn taps(&self, tape: &mut Tape<T>, vars: &ModelVars, batch: &Batch) -> Result<TapSet> {
        let h0 = self.backbone.embed(tape, &vars.backbone, &batch.ids, batch.batch, batch.seq)?;
        self.backbone
            .forward_collect(tape, &vars.backbone, h0, batch.mask.as_slice().into(), batch.batch, batch.seq)
    }

    pub fn dsn_out(
        &self,
        m: usize,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        taps: &TapSet,
        rows: Option<&Arc<[usize]>>,
        dropout: Option<&Dropout>,
    ) -> Result<DsnOut> {
        self.dsns[m].forward(tape, &vars.dsns[m], taps, rows, dropout)
    }

    pub fn general_out(&self, tape: &mut Tape<T>, vars: &ModelVars, taps: &TapSet, dropout: Option<&Dropout>) -> Result<GeneralOut> {
        self.general.forward(tape, &vars.general, taps, dropout)
    }

    pub fn positions(&self, batch: &Batch) -> Vec<Option<usize>> {
        batch.domains.iter().map(|d| self.registry.position(d)).collect()
    }

    /// Rows of the batch belonging to each registered domain, in batch order.
    pub fn rows_by_domain(&self, positions: &[Option<usize>]) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.dsns.len()];
        for (r, p) in positions.iter().enumerate() {
            if let Some(m) = p {
                rows[*m].push(r);
            }
        }
        rows
    }

    /// Domain predictions `[B, 1]` for known-domain samples. Rows of unknown
    /// domains hold 0. In strict mode every network scores every sample and
    /// the prediction is `sum(mask ⊙ [ŷ_1 … ŷ_M])`.
    pub fn routed_domain_pred(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        taps: &TapSet,
        positions: &[Option<usize>],
        mode: MaskMode,
        dropout: Option<&Dropout>,
    ) -> Result<Option<Var>> {
        let b = taps.batch;
        match mode {
            MaskMode::Dispatch => {
                let mut pred: Option<Var> = None;
                for (m, rows) in self.rows_by_domain(positions).into_iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    let rows: Arc<[usize]> = rows.into();
                    let out = self.dsn_out(m, tape, vars, taps, Some(&rows), dropout)?;
                    let placed = tape.scatter_rows(out.tower.prob, rows, b)?;
                    pred = Some(match pred {
                        Some(p) => tape.add(p, placed)?,
                        None => placed,
                    });
                }
                Ok(pred)
            }
            MaskMode::Strict => {
                if self.dsns.is_empty() {
                    return Ok(None);
                }
                let all = self.all_dsn_probs(tape, vars, taps, dropout)?;
                let mask = tape.constant(self.mask_matrix(positions));
                let masked = tape.mul(all, mask)?;
                let summed = tape.sum_last(masked)?;
                Ok(Some(tape.reshape(summed, vec![b, 1])?))
            }
        }
    }

    /// Every domain network on every sample, `[B, M]`.
    pub fn all_dsn_probs(&self, tape: &mut Tape<T>, vars: &ModelVars, taps: &TapSet, dropout: Option<&Dropout>) -> Result<Var> {
        let mut cols = Vec::with_capacity(self.dsns.len());
        for m in 0..self.dsns.len() {
            cols.push(self.dsn_out(m, tape, vars, taps, None, dropout)?.tower.prob);
        }
        if cols.len() == 1 {
            Ok(cols[0])
        } else {
            tape.concat_last(&cols)
        }
    }

    /// Stacked domain masks `[B, M]`.
    pub fn mask_matrix(&self, positions: &[Option<usize>]) -> Tensor<T> {
        let m = self.dsns.len();
        let mut data = vec![T::zero(); positions.len() * m];
        for (r, p) in positions.iter().enumerate() {
            if let Some(k) = p {
                data[r * m + k] = T::one();
            }
        }
        Tensor::from_parts(vec![positions.len(), m], data)
    }

    /// Evaluation-mode predictions with routing: known domains through their
    /// network, unknown domains through the general head.
    pub fn predict(&self, batch: &Batch, mode: MaskMode) -> Result<Predictions<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let taps = self.taps(&mut tape, &vars, batch)?;
        let positions = self.positions(batch);
        let domain = self.routed_domain_pred(&mut tape, &vars, &taps, &positions, mode, None)?;
        let general = self.general_out(&mut tape, &vars, &taps, None)?;
        let g = tape.value(general.tower.prob).data().to_vec();
        let routed = match domain {
            Some(d) => {
                let dv = tape.value(d).data();
                positions
                    .iter()
                    .enumerate()
                    .map(|(r, p)| if p.is_some() { dv[r] } else { g[r] })
                    .collect()
            }
            None => g.clone(),
        };
        Ok(Predictions {
            routed,
            general: g,
            positions,
        })
    }

    /// Converts parameter precision, keeping structure and registry.
    pub fn cast<U: Scalar>(&self) -> UniCtr<U> {
        UniCtr {
            cfg: self.cfg.clone(),
            backbone: self.backbone.cast(),
            dsns: self.dsns.iter().map(|d| d.cast()).collect(),
            general: self.general.cast(),
            registry: self.registry.clone(),
            vocab: self.vocab.clone(),
            seed: self.seed,
        }
    }
}

impl<T: Scalar> Parametrized<T> for UniCtr<T> {
    fn groups(&self) -> Vec<&ParamGroup<T>> {
        let mut v = vec![&self.backbone.group];
        v.extend(self.dsns.iter().map(|d| &d.group));
        v.push(&self.general.group);
        v
    }

    fn groups_mut(&mut self) -> Vec<&mut ParamGroup<T>> {
        let mut v = vec![&mut self.backbone.group];
        v.extend(self.dsns.iter_mut().map(|d| &mut d.group));
        v.push(&mut self.general.group);
        v
    }
}
