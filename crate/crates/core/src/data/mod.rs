//! Datasets: records grouped by domain with a train/valid/test assignment,
//! JSONL ingestion and export.

pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::mix;
use crate::prompt::InteractionRecord;

pub use synth::{generate, SynthConfig, SynthOutput};

/// Smallest domain that still gets a non-empty slot in every split.
pub const MIN_DOMAIN_SAMPLES: usize = 10;

/// Fraction of malformed lines above which ingestion aborts.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<InteractionRecord>,
    /// One assignment per record.
    pub splits: Vec<Split>,
}

/// Split sizes for a domain of `n` samples: 80/10/10, each rounded to the
/// nearest sample, test takes the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.8).round() as usize;
    let valid = ((n as f64 * 0.1).round() as usize).min(n - train);
    (train, valid, n - train - valid)
}

impl Dataset {
    /// Assigns an 80/10/10 split within each domain from a shuffle seeded by
    /// `seed` and the domain name, so a domain's split does not depend on
    /// which other domains are present.
    pub fn new(records: Vec<InteractionRecord>, seed: u64) -> Result<Self> {
        let mut splits = vec![Split::Train; records.len()];
        let mut by_domain: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_domain.entry(r.domain_name.as_str()).or_default().push(i);
        }
        for (domain, mut idx) in by_domain {
            if idx.len() < MIN_DOMAIN_SAMPLES {
                return Err(Error::Validation(format!(
                    "domain `{domain}` has {} samples, at least {MIN_DOMAIN_SAMPLES} are needed for a train/valid/test split",
                    idx.len()
                )));
            }
            let digest = Sha256::digest(domain.as_bytes());
            let key = u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"));
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[seed, key])));
            let (train, valid, _) = split_sizes(idx.len());
            for (k, &i) in idx.iter().enumerate() {
                splits[i] = if k < train {
                    Split::Train
                } else if k < train + valid {
                    Split::Valid
                } else {
                    Split::Test
                };
            }
        }
        Ok(Dataset { records, splits })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Domain names in first-seen order.
    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.iter().any(|d| d == &r.domain_name) {
                out.push(r.domain_name.clone());
            }
        }
        out
    }

    /// Record indices in `split`, optionally restricted to one domain.
    pub fn indices(&self, split: Split, domain: Option<&str>) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.splits[i] == split && domain.is_none_or(|d| self.records[i].domain_name == d))
            .collect()
    }

    pub fn count(&self, domain: &str) -> usize {
        self.records.iter().filter(|r| r.domain_name == domain).count()
    }

    /// Records of the listed domains only, with their split assignment kept.
    pub fn restrict(&self, domains: &[&str]) -> Dataset {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| domains.contains(&self.records[i].domain_name.as_str()))
            .collect();
        Dataset {
            records: keep.iter().map(|&i| self.records[i].clone()).collect(),
            splits: keep.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    /// Writes records as JSONL, one object per line, in dataset order.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

/// Record as it appears on disk: every field optional so that a missing
/// field can be reported by name.
#[derive(Deserialize)]
struct RawRecord {
    domain: Option<String>,
    user_id: Option<String>,
    history: Option<Vec<String>>,
    item_id: Option<String>,
    title: Option<String>,
    brand: Option<String>,
    price: Option<String>,
    label: Option<u8>,
    rating: Option<f64>,
}

/// Label rule for explicit ratings: strictly above 3 is a positive.
pub fn label_from_rating(rating: f64) -> u8 {
    u8::from(rating > 3.0)
}

fn parse_line(line: &str) -> std::result::Result<InteractionRecord, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| format!("invalid JSON ({e})"))?;
    fn req(v: Option<String>, field: &str) -> std::result::Result<String, String> {
        match v {
            Some(s) if !s.trim().is_empty() => Ok(s),
            _ => Err(format!("missing field `{field}`")),
        }
    }
    let label = match (raw.rating, raw.label) {
        (Some(r), _) if r.is_finite() => label_from_rating(r),
        (Some(_), _) => return Err("field `rating` is not finite".into()),
        (None, Some(l)) if l <= 1 => l,
        (None, Some(l)) => return Err(format!("field `label` is {l}, expected 0 or 1")),
        (None, None) => return Err("missing field `label`".into()),
    };
    Ok(InteractionRecord {
        domain_name: req(raw.domain, "domain")?,
        user_id: req(raw.user_id, "user_id")?,
        history: raw.history.unwrap_or_default(),
        item_id: req(raw.item_id, "item_id")?,
        title: req(raw.title, "title")?,
        brand: raw.brand.ok_or("missing field `brand`")?,
        price: raw.price.ok_or("missing field `price`")?,
        label,
    })
}

/// A skipped input line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Malformed {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub records: Vec<InteractionRecord>,
    pub malformed: Vec<Malformed>,
}

/// Parses JSONL records. Blank lines are ignored. Malformed lines are skipped
/// and reported unless they exceed 1% of the non-blank lines, in which case
/// the whole file is rejected with every offending line listed.
pub fn read_jsonl(path: &Path) -> Result<Ingested> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut malformed = Vec::new();
    let mut total = 0usize;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_line(&line) {
            Ok(r) => records.push(r),
            Err(reason) => malformed.push(Malformed { line: i + 1, reason }),
        }
    }
    if malformed.len() as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        let listing: Vec<String> = malformed.iter().map(|m| format!("line {}: {}", m.line, m.reason)).collect();
        return Err(Error::Validation(format!(
            "{}: {} of {} lines malformed: {}",
            path.display(),
            malformed.len(),
            total,
            listing.join("; ")
        )));
    }
    Ok(Ingested { records, malformed })
}

/// Reads a JSONL file and assigns seeded per-domain splits.
pub fn ingest_jsonl(path: &Path, seed: u64) -> Result<(Dataset, Vec<Malformed>)> {
    let ing = read_jsonl(path)?;
    Ok((Dataset::new(ing.records, seed)?, ing.malformed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(extra: &str) -> String {
        format!(
            r#"{{"domain":"Toys","user_id":"7","history":[],"item_id":"3","title":"Red Kite","brand":"Acme","price":"9.99"{extra}}}"#
        )
    }

    #[test]
    fn rating_rule() {
        assert_eq!(parse_line(&line(r#","rating":4"#)).unwrap().label, 1);
        assert_eq!(parse_line(&line(r#","rating":3"#)).unwrap().label, 0);
        assert_eq!(parse_line(&line(r#","label":0,"rating":5"#)).unwrap().label, 1);
        assert_eq!(parse_line(&line(r#","label":1"#)).unwrap().label, 1);
    }

    #[test]
    fn missing_title_names_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let bad = line(r#","label":1"#).replace(r#""title":"Red Kite","#, "");
        fs::write(&p, format!("{}\n{bad}\n", line(r#","label":1"#))).unwrap();
        let err = read_jsonl(&p).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("`title`"), "{err}");
    }

    #[test]
    fn sparse_malformed_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let mut text = String::new();
        for _ in 0..199 {
            text.push_str(&line(r#","label":0"#));
            text.push('\n');
        }
        text.push_str("{not json\n");
        fs::write(&p, text).unwrap();
        let ing = read_jsonl(&p).unwrap();
        assert_eq!(ing.records.len(), 199);
        assert_eq!(ing.malformed, vec![Malformed { line: 200, reason: ing.malformed[0].reason.clone() }]);
    }

    #[test]
    fn split_sizes_round() {
        assert_eq!(split_sizes(1000), (800, 100, 100));
        assert_eq!(split_sizes(10), (8, 1, 1));
        assert_eq!(split_sizes(13), (10, 1, 2));
    }

    #[test]
    fn too_small_domain_is_rejected() {
        let r = parse_line(&line(r#","label":0"#)).unwrap();
        assert!(Dataset::new(vec![r; 5], 0).is_err());
    }
}
