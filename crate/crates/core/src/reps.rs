//! Representation dumps for external visualization tools.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Tape;
use crate::backbone::pool;
use crate::batch::{Batch, EncodedSample};
use crate::error::{Error, Result};
use crate::model::UniCtr;
use crate::tensor::Scalar;

/// Which vector is written per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selector {
    /// Backbone layer `l` output, pooled over tokens (`h0` is the embedding).
    Layer(usize),
    /// Last hidden tower activation of a domain network.
    Dsn(String),
    /// Last hidden tower activation of the general head.
    General,
}

impl FromStr for Selector {
    type Err = Error;

    /// Accepts `h<l>` or `h_<l>`, `dsn:<domain>`, and `general`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(name) = s.strip_prefix("dsn:") {
            if !name.is_empty() {
                return Ok(Selector::Dsn(name.to_string()));
            }
        } else if s == "general" {
            return Ok(Selector::General);
        } else if let Some(rest) = s.strip_prefix('h') {
            if let Ok(l) = rest.trim_start_matches('_').parse() {
                return Ok(Selector::Layer(l));
            }
        }
        Err(Error::Validation(format!(
            "unknown selector `{s}`; expected h<layer>, dsn:<domain> or general"
        )))
    }
}

/// Vectors of `samples` under `selector`, one per sample, in input order.
pub fn representations<T: Scalar>(
    model: &UniCtr<T>,
    samples: &[&EncodedSample],
    selector: &Selector,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    match selector {
        Selector::Layer(l) if *l > model.cfg.backbone.num_layers => {
            return Err(Error::Validation(format!(
                "layer {l} out of range for a {}-layer backbone",
                model.cfg.backbone.num_layers
            )))
        }
        Selector::Dsn(d) if model.registry().position(d).is_none() => {
            return Err(Error::Registry(format!("no domain network for `{d}`")))
        }
        _ => {}
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = Batch::from_samples(chunk);
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let taps = model.taps(&mut tape, &vars, &batch)?;
        let v = match selector {
            Selector::Layer(l) => pool(
                &mut tape,
                taps.taps[*l],
                &taps.mask,
                taps.batch,
                taps.seq,
                model.cfg.backbone.pooling,
            )?,
            Selector::Dsn(d) => {
                let m = model.registry().position(d).expect("checked above");
                model.dsn_out(m, &mut tape, &vars, &taps, None, None)?.tower.penultimate
            }
            Selector::General => model.general_out(&mut tape, &vars, &taps, None)?.tower.penultimate,
        };
        let t = tape.value(v);
        let w = t.last_dim();
        out.extend(t.to_f64_vec().chunks(w).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Writes a TSV with header `domain, sample_id, v0 … v{n-1}`.
pub fn dump_representations<T: Scalar>(
    model: &UniCtr<T>,
    samples: &[&EncodedSample],
    selector: &Selector,
    path: &Path,
) -> Result<usize> {
    let vecs = representations(model, samples, selector, 256)?;
    let width = vecs.first().map_or(0, Vec::len);
    let mut text = String::from("domain\tsample_id");
    for i in 0..width {
        write!(text, "\tv{i}").unwrap();
    }
    text.push('\n');
    for (s, v) in samples.iter().zip(&vecs) {
        write!(text, "{}\t{}", s.domain, s.sample_id).unwrap();
        for x in v {
            write!(text, "\t{x}").unwrap();
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(vecs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_parsing() {
        assert_eq!("h0".parse::<Selector>().unwrap(), Selector::Layer(0));
        assert_eq!("h_4".parse::<Selector>().unwrap(), Selector::Layer(4));
        assert_eq!("dsn:Toys".parse::<Selector>().unwrap(), Selector::Dsn("Toys".into()));
        assert_eq!("general".parse::<Selector>().unwrap(), Selector::General);
        assert!("layer3".parse::<Selector>().is_err());
        assert!("dsn:".parse::<Selector>().is_err());
    }
}
