//! Named parameter groups. A group is the unit of freezing, checksumming and
//! checkpoint sections: the backbone, each domain network, the general head.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamKey, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug)]
pub struct ParamGroup<T> {
    name: String,
    tag: u64,
    params: Vec<Param<T>>,
    pub frozen: bool,
}

impl<T: Clone> Clone for ParamGroup<T> {
    /// A clone is a distinct group with its own tag, so its gradients never
    /// alias the original's.
    fn clone(&self) -> Self {
        ParamGroup {
            name: self.name.clone(),
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            frozen: self.frozen,
        }
    }
}

impl<T: Scalar> ParamGroup<T> {
    pub fn new(name: impl Into<String>) -> Self {
        ParamGroup {
            name: name.into(),
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            frozen: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            group: self.tag,
            index,
        }
    }

    /// Adds a parameter and returns its index within the group.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    /// Weight matrix `[fan_in, fan_out]` with Xavier-normal entries.
    pub fn add_xavier(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> usize {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.add_normal(name, &[fan_in, fan_out], std, rng)
    }

    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> usize {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite standard deviation");
        let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.add(name, Tensor::full(shape, T::one()))
    }

    /// Puts every parameter on the tape. Frozen groups enter as
    /// non-differentiable leaves.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(self.key(i), p.value.clone(), !self.frozen))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over every parameter's little-endian 32-bit encoding, in
    /// group order. Matches the checksum of the group's checkpoint section.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(le_bytes(&p.value));
        }
        hex::encode(h.finalize())
    }

    /// Exact bit pattern of the values in the group's own precision, for
    /// freeze checks that must not be blurred by the 32-bit encoding.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.value.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamGroup<U> {
        ParamGroup {
            name: self.name.clone(),
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            frozen: self.frozen,
        }
    }

    /// Replaces values from another group with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamGroup<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "group {} has {} parameters, source has {}",
                self.name,
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.value.shape() != src.value.shape() {
                return Err(Error::dim("copy_values_from", dst.value.shape(), src.value.shape()));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

pub(crate) fn le_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}
