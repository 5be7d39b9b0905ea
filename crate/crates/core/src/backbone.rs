//! Small transformer encoder that keeps every layer's output.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{attention_mask, TransformerBlock};
use crate::params::ParamGroup;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    /// The first unmasked position (the BOS token for tokenized prompts).
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub causal: bool,
    pub pooling: Pooling,
    /// Filled from the vocabulary when a model is built from data.
    pub vocab_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            num_layers: 8,
            hidden_dim: 128,
            num_heads: 4,
            ffn_dim: 256,
            max_seq_len: 128,
            causal: false,
            pooling: Pooling::Mean,
            vocab_size: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("vocab_size and ffn_dim must be positive".into()));
        }
        Ok(())
    }

    /// Scalar parameter count of a backbone built from this config.
    pub fn num_params(&self) -> usize {
        let (d, f) = (self.hidden_dim, self.ffn_dim);
        let per_layer = 4 * (d * d + d) + 4 * d + (d * f + f) + (f * d + d);
        (self.vocab_size + self.max_seq_len) * d + self.num_layers * per_layer
    }
}

/// All layer outputs `h_0 … h_L` of one batch, each `[B, S, d]`, with the
/// padding mask they were computed under.
#[derive(Clone, Debug)]
pub struct TapSet {
    pub taps: Vec<Var>,
    pub mask: Arc<[bool]>,
    pub batch: usize,
    pub seq: usize,
}

impl TapSet {
    pub fn last(&self) -> Var {
        *self.taps.last().expect("tap set is never empty")
    }

    pub fn num_layers(&self) -> usize {
        self.taps.len() - 1
    }

    /// Padding mask restricted to the given samples.
    pub fn mask_rows(&self, rows: &[usize]) -> Arc<[bool]> {
        let mut m = Vec::with_capacity(rows.len() * self.seq);
        for &r in rows {
            m.extend_from_slice(&self.mask[r * self.seq..(r + 1) * self.seq]);
        }
        m.into()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub cfg: BackboneConfig,
    pub group: ParamGroup<T>,
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<TransformerBlock>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut group = ParamGroup::new("backbone");
        let d = cfg.hidden_dim;
        let tok_emb = group.add_normal("tok_emb", &[cfg.vocab_size, d], 0.1, rng);
        let pos_emb = group.add_normal("pos_emb", &[cfg.max_seq_len, d], 0.1, rng);
        let blocks = (0..cfg.num_layers)
            .map(|l| TransformerBlock::new(&mut group, &format!("layer{l}"), d, cfg.num_heads, cfg.ffn_dim, rng))
            .collect();
        Ok(Backbone {
            cfg,
            group,
            tok_emb,
            pos_emb,
            blocks,
        })
    }

    /// Token embedding plus learned positional embedding, `[B, S, d]`.
    pub fn embed(&self, tape: &mut Tape<T>, vars: &[Var], ids: &[usize], batch: usize, seq: usize) -> Result<Var> {
        if seq > self.cfg.max_seq_len {
            return Err(Error::Validation(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.cfg.max_seq_len
            )));
        }
        if ids.len() != batch * seq {
            return Err(Error::dim("embed", &[batch, seq], &[ids.len()]));
        }
        let tok = tape.gather(vars[self.tok_emb], ids.into(), vec![batch, seq])?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = tape.gather(vars[self.pos_emb], positions.into(), vec![batch, seq])?;
        tape.add(tok, pos)
    }

    /// Runs every layer from `h_0` and returns the full collection.
    pub fn forward_collect(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        h0: Var,
        mask: Arc<[bool]>,
        batch: usize,
        seq: usize,
    ) -> Result<TapSet> {
        let attn_mask = attention_mask(&mask, batch, seq, self.cfg.causal);
        let mut taps = Vec::with_capacity(self.blocks.len() + 1);
        taps.push(h0);
        let mut h = h0;
        for (l, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, vars, h, &attn_mask)?;
            if !tape.value(h).is_finite() {
                return Err(Error::Numerical(format!("non-finite output at backbone layer {}", l + 1)));
            }
            taps.push(h);
        }
        Ok(TapSet {
            taps,
            mask,
            batch,
            seq,
        })
    }

    /// Registers the parameters and runs embedding plus all layers.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        ids: &[usize],
        mask: &[bool],
        batch: usize,
        seq: usize,
    ) -> Result<(Vec<Var>, TapSet)> {
        let vars = self.group.register(tape);
        let h0 = self.embed(tape, &vars, ids, batch, seq)?;
        let taps = self.forward_collect(tape, &vars, h0, mask.into(), batch, seq)?;
        Ok((vars, taps))
    }

    pub fn num_params(&self) -> usize {
        self.group.num_scalars()
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            cfg: self.cfg.clone(),
            group: self.group.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            blocks: self.blocks.clone(),
        }
    }
}

/// Reduces `[B, S, d]` to `[B, d]` over unmasked positions.
pub fn pool<T: Scalar>(tape: &mut Tape<T>, h: Var, mask: &[bool], batch: usize, seq: usize, mode: Pooling) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 3 || shape[0] != batch || shape[1] != seq || mask.len() != batch * seq {
        return Err(Error::dim("pool", &shape, &[batch, seq]));
    }
    let mut w = vec![T::zero(); batch * seq];
    for b in 0..batch {
        let row = &mask[b * seq..(b + 1) * seq];
        let n = row.iter().filter(|&&m| m).count();
        if n == 0 {
            return Err(Error::Validation(format!("sample {b} has no unmasked positions to pool")));
        }
        match mode {
            Pooling::Mean => {
                let inv = T::one() / T::of(n as f64);
                for (s, &m) in row.iter().enumerate() {
                    if m {
                        w[b * seq + s] = inv;
                    }
                }
            }
            Pooling::First => {
                let s = row.iter().position(|&m| m).unwrap();
                w[b * seq + s] = T::one();
            }
        }
    }
    let w = tape.constant(Tensor::new(vec![batch, 1, seq], w)?);
    let pooled = tape.bmm(w, h, false)?;
    tape.reshape(pooled, vec![batch, shape[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(layers: usize) -> Backbone<f64> {
        let cfg = BackboneConfig {
            num_layers: layers,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 10,
            vocab_size: 12,
            ..Default::default()
        };
        Backbone::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn embed_shape_and_positional_difference() {
        let bb = tiny(1);
        let mut tape = Tape::new();
        let vars = bb.group.register(&mut tape);
        let h = bb.embed(&mut tape, &vars, &[5, 5, 0], 1, 3).unwrap();
        assert_eq!(tape.shape(h), &[1, 3, 8]);
        let v = tape.value(h).data();
        let pos = &bb.group.params()[bb.pos_emb].value;
        for j in 0..8 {
            let diff = v[j] - v[8 + j];
            let expect = pos.data()[j] - pos.data()[8 + j];
            assert!((diff - expect).abs() < 1e-12);
        }
        // The padding position carries the PAD embedding row.
        let tok = &bb.group.params()[bb.tok_emb].value;
        for j in 0..8 {
            assert!((v[16 + j] - (tok.data()[j] + pos.data()[16 + j])).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_vocab_id_is_an_index_error() {
        let bb = tiny(1);
        let mut tape = Tape::new();
        let vars = bb.group.register(&mut tape);
        assert!(matches!(bb.embed(&mut tape, &vars, &[12], 1, 1), Err(Error::Index(_))));
    }

    #[test]
    fn tap_count_is_layers_plus_one() {
        let bb = tiny(3);
        let mut tape = Tape::new();
        let (_, taps) = bb.forward(&mut tape, &[2, 5, 6, 3], &[true; 4], 1, 4).unwrap();
        assert_eq!(taps.taps.len(), 4);
        for t in &taps.taps {
            assert_eq!(tape.shape(*t), &[1, 4, 8]);
        }
    }

    #[test]
    fn pooling_rules() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_f64(vec![1, 3, 2], &[1.0, 0.0, 0.0, 1.0, 7.0, 7.0]).unwrap());
        let m = pool(&mut tape, h, &[true, true, false], 1, 3, Pooling::Mean).unwrap();
        assert_eq!(tape.value(m).data(), &[0.5, 0.5]);
        let single = [false, true, false];
        for mode in [Pooling::Mean, Pooling::First] {
            let p = pool(&mut tape, h, &single, 1, 3, mode).unwrap();
            assert_eq!(tape.value(p).data(), &[0.0, 1.0]);
        }
        let same = tape.constant(Tensor::from_f64(vec![1, 2, 2], &[3.0, 4.0, 3.0, 4.0]).unwrap());
        let p = pool(&mut tape, same, &[true, true], 1, 2, Pooling::Mean).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 4.0]);
        assert!(pool(&mut tape, h, &[false; 3], 1, 3, Pooling::Mean).is_err());
    }

    #[test]
    fn uniform_attention_from_zero_query_key() {
        let mut bb = tiny(1);
        // Zero query and key projections make every score zero.
        for p in bb.group.params_mut() {
            if p.name.contains(".attn.q.") || p.name.contains(".attn.k.") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let mut tape = Tape::new();
        let vars = bb.group.register(&mut tape);
        let h0 = bb.embed(&mut tape, &vars, &[2, 5, 6, 0], 1, 4).unwrap();
        let mask: Arc<[bool]> = vec![true, true, true, false].into();
        let taps = bb.forward_collect(&mut tape, &vars, h0, mask, 1, 4).unwrap();
        let h1 = tape.value(taps.taps[1]).clone();

        // Oracle: attention output is the mean of V over unmasked positions,
        // identical for every query.
        let block = &bb.blocks[0];
        let mut t2 = Tape::new();
        let v2 = bb.group.register(&mut t2);
        let x = t2.constant(tape.value(h0).clone());
        let n = block.ln1.forward(&mut t2, &v2, x).unwrap();
        let v = block.attn.v.forward(&mut t2, &v2, n).unwrap();
        let vv = t2.value(v).data().to_vec();
        let mut mean = vec![0.0; 8];
        for s in 0..3 {
            for j in 0..8 {
                mean[j] += vv[s * 8 + j] / 3.0;
            }
        }
        let mc = t2.constant(Tensor::from_f64(vec![1, 8], &mean).unwrap());
        let a = block.attn.o.forward(&mut t2, &v2, mc).unwrap();
        let a = t2.value(a).data().to_vec();
        let x0 = tape.value(h0).data().to_vec();
        // Rebuild h1 for each position with the FFN half.
        for s in 0..4 {
            let row: Vec<f64> = (0..8).map(|j| x0[s * 8 + j] + a[j]).collect();
            let rt = t2.constant(Tensor::from_f64(vec![1, 8], &row).unwrap());
            let n2 = block.ln2.forward(&mut t2, &v2, rt).unwrap();
            let f = block.ffn.forward(&mut t2, &v2, n2).unwrap();
            let f = t2.value(f).data().to_vec();
            for j in 0..8 {
                assert!((h1.data()[s * 8 + j] - (row[j] + f[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_position_does_not_leak() {
        let bb = tiny(2);
        let run = |pad_token: usize| {
            let mut tape = Tape::new();
            let (_, taps) = bb
                .forward(&mut tape, &[2, 5, 3, pad_token], &[true, true, true, false], 1, 4)
                .unwrap();
            tape.value(taps.last()).data()[..24].to_vec()
        };
        assert_eq!(run(0), run(7));
    }

    #[test]
    fn token_order_matters() {
        let bb = tiny(2);
        let run = |ids: &[usize]| {
            let mut tape = Tape::new();
            let (_, taps) = bb.forward(&mut tape, ids, &[true; 4], 1, 4).unwrap();
            tape.value(taps.last()).clone()
        };
        assert!(run(&[2, 5, 6, 3]).max_abs_diff(&run(&[2, 6, 5, 3])) > 1e-6);
    }
}
