//! Domain-agnostic head over the pooled last backbone layer. It serves every
//! sample during training and is the predictor for domains without a
//! domain network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{pool, BackboneConfig, TapSet};
use crate::error::Result;
use crate::layers::{site_of, Dropout, Tower, TowerOut};
use crate::params::ParamGroup;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralConfig {
    pub tower_dims: Vec<usize>,
}

impl Default for GeneralConfig {
    fn default() -> Self {
        GeneralConfig {
            tower_dims: vec![64, 32, 16],
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneralHead<T> {
    pub cfg: GeneralConfig,
    pub group: ParamGroup<T>,
    pub tower: Tower,
    pooling: crate::backbone::Pooling,
    hidden_dim: usize,
}

pub struct GeneralOut {
    pub pooled: Var,
    pub tower: TowerOut,
}

impl<T: Scalar> GeneralHead<T> {
    pub fn new(cfg: GeneralConfig, backbone: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut group = ParamGroup::new("general");
        let tower = Tower::new(&mut group, "tower", backbone.hidden_dim, &cfg.tower_dims, rng);
        GeneralHead {
            cfg,
            group,
            tower,
            pooling: backbone.pooling,
            hidden_dim: backbone.hidden_dim,
        }
    }

    pub fn cast<U: Scalar>(&self) -> GeneralHead<U> {
        GeneralHead {
            cfg: self.cfg.clone(),
            group: self.group.cast(),
            tower: self.tower.clone(),
            pooling: self.pooling,
            hidden_dim: self.hidden_dim,
        }
    }

    pub fn penultimate_dim(&self) -> usize {
        self.tower.penultimate_dim(self.hidden_dim)
    }

    /// Reads only the last tap; intermediate layers and domain networks
    /// never enter this computation.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], taps: &TapSet, dropout: Option<&Dropout>) -> Result<GeneralOut> {
        let pooled = pool(tape, taps.last(), &taps.mask, taps.batch, taps.seq, self.pooling)?;
        let site = site_of(self.group.name(), 0);
        let tower = self.tower.forward(tape, vars, pooled, dropout, site)?;
        Ok(GeneralOut { pooled, tower })
    }
}
