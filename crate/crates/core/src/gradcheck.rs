//! Central finite-difference audit of tape gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamGroup;

/// Anything that owns parameter groups.
pub trait Parametrized<T> {
    fn groups(&self) -> Vec<&ParamGroup<T>>;
    fn groups_mut(&mut self) -> Vec<&mut ParamGroup<T>>;
}

impl<T> Parametrized<T> for Vec<ParamGroup<T>> {
    fn groups(&self) -> Vec<&ParamGroup<T>> {
        self.iter().collect()
    }

    fn groups_mut(&mut self) -> Vec<&mut ParamGroup<T>> {
        self.iter_mut().collect()
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Lower bound on the denominator of the relative error, so entries
    /// whose true gradient is zero are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per parameter, chosen with
    /// `seed`. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamAudit {
    pub group: String,
    pub param: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<ParamAudit>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn per_group(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            let v = out.entry(e.group.clone()).or_insert(0.0f64);
            *v = v.max(e.max_rel_err);
        }
        out
    }

    pub fn coords(&self) -> usize {
        self.entries.iter().map(|e| e.coords).sum()
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Differentiates `loss_fn` with the tape and compares against central
/// differences for every parameter of every non-frozen group. The closure
/// must be a pure function of the parameter values.
pub fn finite_diff_check<M: Parametrized<f64>>(
    model: &mut M,
    loss_fn: impl Fn(&M) -> Result<(Tape<f64>, Var)>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (tape, loss) = loss_fn(model)?;
    let base = tape.value(loss).item();
    let (tape2, loss2) = loss_fn(model)?;
    let again = tape2.value(loss2).item();
    drop(tape2);
    if base.to_bits() != again.to_bits() {
        return Err(Error::Audit(format!(
            "loss is not deterministic: {base:e} then {again:e}"
        )));
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    let n_groups = model.groups().len();
    for gi in 0..n_groups {
        let (frozen, gname, n_params) = {
            let g = model.groups()[gi];
            (g.frozen, g.name().to_string(), g.len())
        };
        if frozen {
            continue;
        }
        for pi in 0..n_params {
            let (key, pname, shape) = {
                let g = model.groups()[gi];
                let p = &g.params()[pi];
                (g.key(pi), p.name.clone(), p.value.shape().to_vec())
            };
            let analytic = grads.param_or_zeros(key, &shape);
            let numel = analytic.numel();
            let coords: Vec<usize> = match cfg.max_coords {
                Some(k) if k < numel => {
                    let mut c = sample(&mut rng, numel, k).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..numel).collect(),
            };
            let mut worst = 0.0f64;
            for &j in &coords {
                let orig = model.groups()[gi].params()[pi].value.data()[j];
                let eval_at = |m: &mut M, v: f64| -> Result<f64> {
                    m.groups_mut()[gi].params_mut()[pi].value.data_mut()[j] = v;
                    let (t, l) = loss_fn(m)?;
                    Ok(t.value(l).item())
                };
                let plus = eval_at(model, orig + cfg.step)?;
                let minus = eval_at(model, orig - cfg.step)?;
                model.groups_mut()[gi].params_mut()[pi].value.data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * cfg.step);
                worst = worst.max(rel_err(analytic.data()[j], numeric, cfg.floor));
            }
            entries.push(ParamAudit {
                group: gname.clone(),
                param: pname,
                coords: coords.len(),
                max_rel_err: worst,
                analytic_norm: analytic.sq_norm().sqrt(),
            });
        }
    }
    Ok(GradCheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_passes_and_reports_per_group() {
        let mut g = ParamGroup::<f64>::new("q");
        g.add("w", Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap());
        let mut model = vec![g];
        let report = finite_diff_check(
            &mut model,
            |m| {
                let mut tape = Tape::new();
                let v = m[0].register(&mut tape);
                let sq = tape.mul(v[0], v[0])?;
                let l = tape.sum(sq)?;
                Ok((tape, l))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-8);
        assert_eq!(report.per_group().len(), 1);
        assert_eq!(report.coords(), 3);
    }

    #[test]
    fn nondeterministic_program_is_an_audit_failure() {
        use std::cell::Cell;
        let mut g = ParamGroup::<f64>::new("q");
        g.add("w", Tensor::scalar(1.0));
        let mut model = vec![g];
        let calls = Cell::new(0.0);
        let err = finite_diff_check(
            &mut model,
            |m| {
                calls.set(calls.get() + 1.0);
                let mut tape = Tape::new();
                let v = m[0].register(&mut tape);
                let l = tape.scale(v[0], calls.get())?;
                Ok((tape, l))
            },
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Audit(_)));
    }
}
