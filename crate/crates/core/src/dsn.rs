//! Per-domain network: a ladder stack fed by every φ-th backbone layer, an
//! attention-pooling gate over the last layer and the last ladder, and a
//! tower.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{BackboneConfig, TapSet};
use crate::error::{Error, Result};
use crate::layers::{attention_mask, site_of, Dropout, FeedForward, LayerNorm, Linear, MultiHeadAttention, Tower, TowerOut, TransformerBlock};
use crate::params::ParamGroup;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LadderBlockKind {
    /// Residual feed-forward block.
    Mlp,
    /// Residual self-attention block.
    Attention,
    /// Pre-norm encoder block (attention and feed-forward).
    #[default]
    Transformer,
    /// Passes its input through unchanged.
    Identity,
}

/// Tower sizes for a full-width (1024-dim) backbone.
pub const FULL_SCALE_TOWER_DIMS: [usize; 3] = [512, 256, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsnConfig {
    pub domain_name: String,
    pub tap_frequency: usize,
    pub ladder_dim: usize,
    pub ladder_block: LadderBlockKind,
    pub ladder_heads: usize,
    pub tower_dims: Vec<usize>,
}

impl Default for DsnConfig {
    fn default() -> Self {
        DsnConfig {
            domain_name: String::new(),
            tap_frequency: 2,
            ladder_dim: 64,
            ladder_block: LadderBlockKind::Transformer,
            ladder_heads: 2,
            tower_dims: vec![64, 32, 16],
        }
    }
}

impl DsnConfig {
    pub fn for_domain(name: impl Into<String>) -> Self {
        DsnConfig {
            domain_name: name.into(),
            ..Default::default()
        }
    }

    /// Number of ladders `F = L / φ`.
    pub fn num_ladders(&self, num_layers: usize) -> Result<usize> {
        if self.tap_frequency == 0 || !num_layers.is_multiple_of(self.tap_frequency) {
            return Err(Error::Config(format!(
                "backbone depth {num_layers} is not a multiple of tap frequency {}",
                self.tap_frequency
            )));
        }
        Ok(num_layers / self.tap_frequency)
    }
}

#[derive(Clone, Debug)]
enum LadderBlock {
    Mlp { ln: LayerNorm, ffn: FeedForward },
    Attention { ln: LayerNorm, attn: MultiHeadAttention },
    Transformer(TransformerBlock),
    Identity,
}

impl LadderBlock {
    fn new<T: Scalar>(
        kind: LadderBlockKind,
        g: &mut ParamGroup<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        match kind {
            LadderBlockKind::Mlp => LadderBlock::Mlp {
                ln: LayerNorm::new(g, &format!("{name}.ln"), dim),
                ffn: FeedForward::new(g, &format!("{name}.ffn"), dim, 2 * dim, rng),
            },
            LadderBlockKind::Attention => LadderBlock::Attention {
                ln: LayerNorm::new(g, &format!("{name}.ln"), dim),
                attn: MultiHeadAttention::new(g, &format!("{name}.attn"), dim, heads, rng),
            },
            LadderBlockKind::Transformer => {
                LadderBlock::Transformer(TransformerBlock::new(g, name, dim, heads, 2 * dim, rng))
            }
            LadderBlockKind::Identity => LadderBlock::Identity,
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, mask: &Arc<[bool]>) -> Result<Var> {
        match self {
            LadderBlock::Mlp { ln, ffn } => {
                let n = ln.forward(tape, vars, x)?;
                let f = ffn.forward(tape, vars, n)?;
                tape.add(x, f)
            }
            LadderBlock::Attention { ln, attn } => {
                let n = ln.forward(tape, vars, x)?;
                let a = attn.forward(tape, vars, n, mask)?;
                tape.add(x, a)
            }
            LadderBlock::Transformer(b) => b.forward(tape, vars, x, mask),
            LadderBlock::Identity => Ok(x),
        }
    }
}

/// Output of one domain network on a set of samples.
pub struct DsnOut {
    pub ladder: Var,
    /// Pooled gate output `R`, `[N, d_s]`.
    pub fused: Var,
    /// Attention weights over the `2S` gate positions, `[N, 2S]`.
    pub gate_weights: Var,
    pub tower: TowerOut,
}

#[derive(Clone, Debug)]
pub struct DomainSpecificNetwork<T> {
    pub cfg: DsnConfig,
    pub group: ParamGroup<T>,
    num_layers: usize,
    projections: Vec<Linear>,
    ladders: Vec<LadderBlock>,
    query: Linear,
    w_k: usize,
    w_q: usize,
    pub tower: Tower,
}

impl<T: Scalar> DomainSpecificNetwork<T> {
    pub fn new(cfg: DsnConfig, backbone: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.domain_name.trim().is_empty() {
            return Err(Error::Config("domain network needs a domain name".into()));
        }
        let f = cfg.num_ladders(backbone.num_layers)?;
        let ds = cfg.ladder_dim;
        if ds == 0 {
            return Err(Error::Config("ladder_dim must be positive".into()));
        }
        let blocks_need_heads = matches!(cfg.ladder_block, LadderBlockKind::Attention | LadderBlockKind::Transformer);
        if blocks_need_heads && (cfg.ladder_heads == 0 || !ds.is_multiple_of(cfg.ladder_heads)) {
            return Err(Error::Config(format!(
                "ladder_dim {ds} is not divisible by ladder_heads {}",
                cfg.ladder_heads
            )));
        }
        let d = backbone.hidden_dim;
        let mut g = ParamGroup::new(format!("dsn.{}", cfg.domain_name));
        let projections = (0..f)
            .map(|i| Linear::new(&mut g, &format!("proj{i}"), d, ds, true, rng))
            .collect();
        let ladders = (0..f)
            .map(|i| LadderBlock::new(cfg.ladder_block, &mut g, &format!("ladder{i}"), ds, cfg.ladder_heads, rng))
            .collect();
        let query = Linear::new(&mut g, "gate.query", d, ds, true, rng);
        let w_k = g.add_xavier("gate.w_k", ds, ds, rng);
        let w_q = g.add_xavier("gate.w_q", ds, 1, rng);
        let tower = Tower::new(&mut g, "tower", ds, &cfg.tower_dims, rng);
        let default_shape = DsnConfig {
            domain_name: cfg.domain_name.clone(),
            ..Default::default()
        };
        let default_backbone = BackboneConfig {
            vocab_size: backbone.vocab_size,
            ..Default::default()
        };
        if cfg == default_shape && *backbone == default_backbone {
            assert!(
                g.num_scalars() < backbone.num_params(),
                "default domain network must be smaller than the default backbone"
            );
        }
        Ok(DomainSpecificNetwork {
            cfg,
            group: g,
            num_layers: backbone.num_layers,
            projections,
            ladders,
            query,
            w_k,
            w_q,
            tower,
        })
    }

    pub fn cast<U: Scalar>(&self) -> DomainSpecificNetwork<U> {
        DomainSpecificNetwork {
            cfg: self.cfg.clone(),
            group: self.group.cast(),
            num_layers: self.num_layers,
            projections: self.projections.clone(),
            ladders: self.ladders.clone(),
            query: self.query.clone(),
            w_k: self.w_k,
            w_q: self.w_q,
            tower: self.tower.clone(),
        }
    }

    pub fn domain(&self) -> &str {
        &self.cfg.domain_name
    }

    pub fn num_ladders(&self) -> usize {
        self.ladders.len()
    }

    pub fn num_params(&self) -> usize {
        self.group.num_scalars()
    }

    pub fn penultimate_dim(&self) -> usize {
        self.tower.penultimate_dim(self.cfg.ladder_dim)
    }

    /// Index of the down-projection weight of ladder `f` within the group.
    pub fn projection(&self, f: usize) -> &Linear {
        &self.projections[f]
    }

    pub fn gate_params(&self) -> (usize, usize) {
        (self.w_k, self.w_q)
    }

    pub fn query(&self) -> &Linear {
        &self.query
    }

    /// `lad_1 = Ladder_1(P_1 h_φ)`, `lad_f = Ladder_f(P_f h_{fφ} + lad_{f−1})`.
    /// `taps` are the (already row-selected) backbone outputs `h_0 … h_L`.
    pub fn ladder_forward(&self, tape: &mut Tape<T>, vars: &[Var], taps: &[Var], attn_mask: &Arc<[bool]>) -> Result<Var> {
        if taps.len() != self.num_layers + 1 {
            return Err(Error::Config(format!(
                "domain network built for {} layers received {} taps",
                self.num_layers,
                taps.len()
            )));
        }
        let phi = self.cfg.tap_frequency;
        let mut lad: Option<Var> = None;
        for (f, (proj, block)) in self.projections.iter().zip(&self.ladders).enumerate() {
            let h = taps[(f + 1) * phi];
            let mut x = proj.forward(tape, vars, h)?;
            if let Some(prev) = lad {
                x = tape.add(x, prev)?;
            }
            lad = Some(block.forward(tape, vars, x, attn_mask)?);
        }
        Ok(lad.expect("at least one ladder"))
    }

    /// Attention pooling over the concatenation of the projected last layer
    /// and the last ladder along the sequence axis. Returns `(R, A)`.
    pub fn gate_fuse(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        h_last: Var,
        ladder: Var,
        pad: &[bool],
        n: usize,
        seq: usize,
    ) -> Result<(Var, Var)> {
        let ds = self.cfg.ladder_dim;
        let q = self.query.forward(tape, vars, h_last)?;
        let o = tape.concat_axis1(q, ladder)?;
        let k = tape.matmul(o, vars[self.w_k])?;
        let k = tape.tanh(k)?;
        let score = tape.matmul(k, vars[self.w_q])?;
        let score = tape.reshape(score, vec![n, 2 * seq])?;
        let mut mask = Vec::with_capacity(n * 2 * seq);
        for r in 0..n {
            let row = &pad[r * seq..(r + 1) * seq];
            mask.extend_from_slice(row);
            mask.extend_from_slice(row);
        }
        let a = tape.masked_softmax(score, 1, mask.into())?;
        let a3 = tape.reshape(a, vec![n, 1, 2 * seq])?;
        let r = tape.bmm(a3, o, false)?;
        let r = tape.reshape(r, vec![n, ds])?;
        Ok((r, a))
    }

    /// Full domain network on the rows `rows` of the batch (all rows when
    /// `None`).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        taps: &TapSet,
        rows: Option<&Arc<[usize]>>,
        dropout: Option<&Dropout>,
    ) -> Result<DsnOut> {
        let phi = self.cfg.tap_frequency;
        let l = taps.num_layers();
        let (selected, pad, n): (Vec<Var>, Arc<[bool]>, usize) = match rows {
            None => (taps.taps.clone(), taps.mask.clone(), taps.batch),
            Some(rows) => {
                // Only the tapped layers and the last layer are needed.
                let mut sel = taps.taps.clone();
                for (i, v) in sel.iter_mut().enumerate() {
                    if (i > 0 && i % phi == 0) || i == l {
                        *v = tape.select_rows(*v, rows.clone())?;
                    }
                }
                (sel, taps.mask_rows(rows), rows.len())
            }
        };
        let attn_mask = attention_mask(&pad, n, taps.seq, false);
        let ladder = self.ladder_forward(tape, vars, &selected, &attn_mask)?;
        let (fused, gate_weights) = self.gate_fuse(tape, vars, selected[l], ladder, &pad, n, taps.seq)?;
        let drop = match (dropout, rows) {
            (Some(d), Some(r)) => Some(d.select(r)),
            (Some(d), None) => Some(d.clone()),
            _ => None,
        };
        let site = site_of(self.group.name(), 0);
        let tower = self.tower.forward(tape, vars, fused, drop.as_ref(), site)?;
        Ok(DsnOut {
            ladder,
            fused,
            gate_weights,
            tower,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bb_cfg(layers: usize, d: usize) -> BackboneConfig {
        BackboneConfig {
            num_layers: layers,
            hidden_dim: d,
            num_heads: 2,
            ffn_dim: 2 * d,
            max_seq_len: 8,
            vocab_size: 10,
            ..Default::default()
        }
    }

    #[test]
    fn depth_must_be_a_multiple_of_frequency() {
        let mut cfg = DsnConfig::for_domain("a");
        cfg.tap_frequency = 3;
        let r = DomainSpecificNetwork::<f64>::new(cfg, &bb_cfg(8, 8), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn eight_layers_every_second_gives_four_ladders() {
        let dsn = DomainSpecificNetwork::<f32>::new(
            DsnConfig::for_domain("a"),
            &bb_cfg(8, 16),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(dsn.num_ladders(), 4);
    }

    #[test]
    fn identity_ladders_telescope() {
        let d = 4;
        let mut cfg = DsnConfig::for_domain("a");
        cfg.ladder_dim = d;
        cfg.ladder_block = LadderBlockKind::Identity;
        cfg.tap_frequency = 1;
        let mut dsn = DomainSpecificNetwork::<f64>::new(cfg, &bb_cfg(2, d), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for f in 0..2 {
            let (w, b) = (dsn.projections[f].w, dsn.projections[f].b.unwrap());
            dsn.group.params_mut()[w].value = Tensor::eye(d);
            dsn.group.params_mut()[b].value = Tensor::zeros(&[d]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let vars = dsn.group.register(&mut tape);
        let taps: Vec<Var> = (0..3)
            .map(|_| {
                let data: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                tape.constant(Tensor::new(vec![1, 2, d], data).unwrap())
            })
            .collect();
        let mask = attention_mask(&[true, true], 1, 2, false);
        let lad = dsn.ladder_forward(&mut tape, &vars, &taps, &mask).unwrap();
        let got = tape.value(lad).data().to_vec();
        for i in 0..2 * d {
            let want = tape.value(taps[1]).data()[i] + tape.value(taps[2]).data()[i];
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_ladder_ignores_later_layers() {
        let mut cfg = DsnConfig::for_domain("a");
        cfg.ladder_dim = 4;
        cfg.tap_frequency = 2;
        let dsn = DomainSpecificNetwork::<f64>::new(cfg, &bb_cfg(2, 4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // With L = 2 and φ = 2 the only ladder reads h_2; h_1 must not matter.
        let run = |h1: f64| {
            let mut tape = Tape::new();
            let vars = dsn.group.register(&mut tape);
            let taps: Vec<Var> = [0.3, h1, -0.2]
                .iter()
                .map(|&c| tape.constant(Tensor::full(&[1, 2, 4], c)))
                .collect();
            let mask = attention_mask(&[true, true], 1, 2, false);
            let lad = dsn.ladder_forward(&mut tape, &vars, &taps, &mask).unwrap();
            tape.value(lad).clone()
        };
        assert!(run(0.1).bit_eq(&run(5.0)));
    }

    fn gate_setup() -> (DomainSpecificNetwork<f64>, ChaCha8Rng) {
        let mut cfg = DsnConfig::for_domain("a");
        cfg.ladder_dim = 4;
        cfg.tap_frequency = 1;
        let dsn = DomainSpecificNetwork::<f64>::new(cfg, &bb_cfg(1, 4), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (dsn, ChaCha8Rng::seed_from_u64(4))
    }

    #[test]
    fn zero_score_weights_give_uniform_gate() {
        let (mut dsn, mut rng) = gate_setup();
        let (_, w_q) = dsn.gate_params();
        dsn.group.params_mut()[w_q].value = Tensor::zeros(&[4, 1]);
        let mut tape = Tape::new();
        let vars = dsn.group.register(&mut tape);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = tape.constant(Tensor::new(vec![1, 3, 4], data.clone()).unwrap());
        let lad_data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lad = tape.constant(Tensor::new(vec![1, 3, 4], lad_data.clone()).unwrap());
        let pad = [true, true, false];
        let (r, a) = dsn.gate_fuse(&mut tape, &vars, h, lad, &pad, 1, 3).unwrap();
        let a = tape.value(a).data().to_vec();
        assert_eq!(a[2], 0.0);
        assert_eq!(a[5], 0.0);
        for &i in &[0, 1, 3, 4] {
            assert!((a[i] - 0.25).abs() < 1e-15);
        }
        // R is the mean of the four unmasked rows of O.
        let q = dsn.query.forward(&mut tape, &vars, h).unwrap();
        let qv = tape.value(q).data().to_vec();
        let r = tape.value(r).data().to_vec();
        for j in 0..4 {
            let want = (qv[j] + qv[4 + j] + lad_data[j] + lad_data[4 + j]) / 4.0;
            assert!((r[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_weights_are_a_distribution_and_identical_rows_pass_through() {
        let (mut dsn, mut rng) = gate_setup();
        // Make the projected last layer equal the ladder vector v.
        let ql = dsn.query.clone();
        dsn.group.params_mut()[ql.w].value = Tensor::eye(4);
        dsn.group.params_mut()[ql.b.unwrap()].value = Tensor::zeros(&[4]);
        let mut tape = Tape::new();
        let vars = dsn.group.register(&mut tape);
        let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut h = v.clone();
        h.extend([9.0, -9.0, 3.0, 1.0]);
        let h = tape.constant(Tensor::new(vec![1, 2, 4], h.clone()).unwrap());
        let mut l = v.clone();
        l.extend([5.0, 5.0, 5.0, 5.0]);
        let lad = tape.constant(Tensor::new(vec![1, 2, 4], l).unwrap());
        let (r, a) = dsn.gate_fuse(&mut tape, &vars, h, lad, &[true, false], 1, 2).unwrap();
        let total: f64 = tape.value(a).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for j in 0..4 {
            assert!((tape.value(r).data()[j] - v[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn default_network_is_smaller_than_default_backbone() {
        let mut bcfg = BackboneConfig::default();
        bcfg.vocab_size = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = crate::backbone::Backbone::<f32>::new(bcfg.clone(), &mut rng).unwrap();
        let dsn = DomainSpecificNetwork::<f32>::new(DsnConfig::for_domain("x"), &bcfg, &mut rng).unwrap();
        assert_eq!(bb.num_params(), bcfg.num_params());
        assert!(dsn.num_params() < bb.num_params());
    }
}
