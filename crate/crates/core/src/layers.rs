//! Building blocks shared by the backbone and the heads. A layer stores the
//! indices of its parameters within the owning group; `vars` is the group's
//! registration on the current tape.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamGroup;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        g: &mut ParamGroup<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = g.add_xavier(format!("{name}.w"), in_dim, out_dim, rng);
        let b = bias.then(|| g.add_zeros(format!("{name}.b"), &[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.w])?;
        match self.b {
            Some(b) => tape.add(y, vars[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(g: &mut ParamGroup<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: g.add_ones(format!("{name}.gain"), &[dim]),
            bias: g.add_zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, vars[self.gain], vars[self.bias], T::of(LN_EPS))
    }
}

/// Multi-head self-attention over `[B, S, d]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(g: &mut ParamGroup<T>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        MultiHeadAttention {
            q: Linear::new(g, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(g, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(g, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(g, &format!("{name}.o"), dim, dim, true, rng),
            heads,
        }
    }

    /// `mask` has one entry per (sample, query, key) and selects the keys each
    /// query may attend to.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, mask: &Arc<[bool]>) -> Result<Var> {
        let dim = self.q.out_dim;
        let hd = dim / self.heads;
        let q = self.q.forward(tape, vars, x)?;
        let k = self.k.forward(tape, vars, x)?;
        let v = self.v.forward(tape, vars, x)?;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_last(q, h * hd, hd)?,
                    tape.slice_last(k, h * hd, hd)?,
                    tape.slice_last(v, h * hd, hd)?,
                )
            };
            let scores = tape.bmm(qh, kh, true)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.masked_softmax(scores, 2, mask.clone())?;
            outs.push(tape.bmm(attn, vh, false)?);
        }
        let ctx = if outs.len() == 1 { outs[0] } else { tape.concat_last(&outs)? };
        self.o.forward(tape, vars, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(g: &mut ParamGroup<T>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            l1: Linear::new(g, &format!("{name}.l1"), dim, hidden, true, rng),
            l2: Linear::new(g, &format!("{name}.l2"), hidden, dim, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, vars, x)?;
        let h = tape.gelu(h)?;
        self.l2.forward(tape, vars, h)
    }
}

/// Pre-norm encoder block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        g: &mut ParamGroup<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(g, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(g, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(g, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(g, &format!("{name}.ffn"), dim, ffn_dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, mask: &Arc<[bool]>) -> Result<Var> {
        let n = self.ln1.forward(tape, vars, x)?;
        let a = self.attn.forward(tape, vars, n, mask)?;
        let x = tape.add(x, a)?;
        let n = self.ln2.forward(tape, vars, x)?;
        let f = self.ffn.forward(tape, vars, n)?;
        tape.add(x, f)
    }
}

/// Key mask `[B, S, S]` from a padding mask `[B, S]`, optionally causal.
pub fn attention_mask(pad: &[bool], batch: usize, seq: usize, causal: bool) -> Arc<[bool]> {
    let mut m = Vec::with_capacity(batch * seq * seq);
    for b in 0..batch {
        for q in 0..seq {
            for k in 0..seq {
                m.push(pad[b * seq + k] && (!causal || k <= q || !pad[b * seq + q]));
            }
        }
    }
    m.into()
}

/// Dropout whose keep pattern depends only on the seed, the optimizer step,
/// the sample and the call site, never on which other samples share the
/// batch.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
    pub step: u64,
    pub sample_ids: Arc<[u64]>,
}

impl Dropout {
    /// Restricts to a subset of the batch rows.
    pub fn select(&self, rows: &[usize]) -> Dropout {
        Dropout {
            sample_ids: rows.iter().map(|&r| self.sample_ids[r]).collect::<Vec<_>>().into(),
            ..self.clone()
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, site: u64) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let width = tape.value(x).last_dim();
        let rows = tape.value(x).rows();
        debug_assert_eq!(rows, self.sample_ids.len());
        let keep_scale = T::of(1.0 / (1.0 - self.rate));
        let mut data = Vec::with_capacity(rows * width);
        for &sid in self.sample_ids.iter() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.seed, self.step, sid, site]));
            for _ in 0..width {
                data.push(if rng.gen::<f64>() < self.rate { T::zero() } else { keep_scale });
            }
        }
        let mask = tape.constant(Tensor::new(tape.value(x).shape().to_vec(), data)?);
        tape.mul(x, mask)
    }
}

/// SplitMix64-style combination of several words into one seed.
pub fn mix(words: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &w in words {
        h ^= w.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

pub fn site_of(name: &str, index: usize) -> u64 {
    let mut words: Vec<u64> = name.bytes().map(u64::from).collect();
    words.push(index as u64);
    mix(&words)
}

/// MLP head: ReLU hidden layers with dropout, then one sigmoid unit.
#[derive(Clone, Debug)]
pub struct Tower {
    pub hidden: Vec<Linear>,
    pub out: Linear,
}

pub struct TowerOut {
    /// Input of the output unit, i.e. the last hidden activation.
    pub penultimate: Var,
    /// Logit before the sigmoid, `[N, 1]`.
    pub logit: Var,
    /// Probability, `[N, 1]`.
    pub prob: Var,
}

impl Tower {
    pub fn new<T: Scalar>(g: &mut ParamGroup<T>, name: &str, in_dim: usize, dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut hidden = Vec::with_capacity(dims.len());
        let mut prev = in_dim;
        for (i, &d) in dims.iter().enumerate() {
            hidden.push(Linear::new(g, &format!("{name}.{i}"), prev, d, true, rng));
            prev = d;
        }
        let out = Linear::new(g, &format!("{name}.out"), prev, 1, true, rng);
        Tower { hidden, out }
    }

    pub fn penultimate_dim(&self, in_dim: usize) -> usize {
        self.hidden.last().map_or(in_dim, |l| l.out_dim)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        dropout: Option<&Dropout>,
        site: u64,
    ) -> Result<TowerOut> {
        let mut h = x;
        for (i, l) in self.hidden.iter().enumerate() {
            h = l.forward(tape, vars, h)?;
            h = tape.relu(h)?;
            if let Some(d) = dropout {
                h = d.apply(tape, h, mix(&[site, i as u64]))?;
            }
        }
        let logit = self.out.forward(tape, vars, h)?;
        let prob = tape.sigmoid(logit)?;
        Ok(TowerOut {
            penultimate: h,
            logit,
            prob,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_tower_predicts_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = ParamGroup::<f64>::new("t");
        let tower = Tower::new(&mut g, "tower", 3, &[4, 2], &mut rng);
        for p in g.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut tape = Tape::new();
        let vars = g.register(&mut tape);
        let x = tape.constant(Tensor::from_f64(vec![2, 3], &[1.0, -2.0, 3.0, 0.5, 0.5, 9.0]).unwrap());
        let out = tower.forward(&mut tape, &vars, x, None, 0).unwrap();
        assert_eq!(tape.value(out.prob).data(), &[0.5, 0.5]);
    }

    #[test]
    fn positive_linear_tower_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = ParamGroup::<f64>::new("t");
        let tower = Tower::new(&mut g, "tower", 1, &[], &mut rng);
        g.params_mut()[tower.out.w].value = Tensor::scalar(0.8).reshaped(vec![1, 1]).unwrap();
        let mut tape = Tape::new();
        let vars = g.register(&mut tape);
        let x = tape.constant(Tensor::from_f64(vec![4, 1], &[-2.0, -0.5, 0.1, 3.0]).unwrap());
        let out = tower.forward(&mut tape, &vars, x, None, 0).unwrap();
        let p = tape.value(out.prob).data().to_vec();
        assert!(p.windows(2).all(|w| w[0] < w[1]), "{p:?}");
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn dropout_mask_ignores_batch_composition() {
        let d = Dropout {
            rate: 0.5,
            seed: 3,
            step: 7,
            sample_ids: vec![10, 11, 12].into(),
        };
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[3, 16], 1.0));
        let full = d.apply(&mut tape, x, 5).unwrap();
        let sub = d.select(&[2]);
        let x1 = tape.constant(Tensor::full(&[1, 16], 1.0));
        let one = sub.apply(&mut tape, x1, 5).unwrap();
        assert_eq!(&tape.value(full).data()[32..48], tape.value(one).data());
    }

    #[test]
    fn causal_mask_blocks_future_keys() {
        let m = attention_mask(&[true, true, false], 1, 3, true);
        // query 0 sees key 0 only; query 1 sees keys 0 and 1; key 2 is padding
        assert_eq!(&m[0..3], &[true, false, false]);
        assert_eq!(&m[3..6], &[true, true, false]);
    }
}
