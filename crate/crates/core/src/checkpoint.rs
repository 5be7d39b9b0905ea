//! Checkpoint directories: `manifest.json` (structure, parameter shapes and
//! byte offsets, per-group checksums), `params.bin` (little-endian 32-bit
//! floats, groups in model order) and `vocab.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsn::{DomainSpecificNetwork, DsnConfig};
use crate::error::{Error, Result};
use crate::gradcheck::Parametrized;
use crate::model::{ModelConfig, UniCtr};
use crate::params::{le_bytes, ParamGroup};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::Vocabulary;

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const VOCAB: &str = "vocab.txt";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    /// SHA-256 of the group's bytes in `params.bin`.
    pub checksum: String,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    /// Domain-network configs in registry order.
    pub dsns: Vec<DsnConfig>,
    pub groups: Vec<GroupEntry>,
}

impl Manifest {
    pub fn group(&self, name: &str) -> Option<&GroupEntry> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.groups.iter().map(|g| (g.name.clone(), g.checksum.clone())).collect()
    }
}

pub fn save<T: Scalar>(model: &UniCtr<T>, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut groups = Vec::new();
    for g in model.groups() {
        let mut params = Vec::new();
        for p in g.params() {
            params.push(ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: blob.len(),
            });
            blob.extend(le_bytes(&p.value));
        }
        groups.push(GroupEntry {
            name: g.name().to_string(),
            checksum: g.checksum(),
            params,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: model.seed(),
        model: model.cfg.clone(),
        dsns: model.dsns().iter().map(|d| d.cfg.clone()).collect(),
        groups,
    };
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write(PARAMS, &blob)?;
    write(MANIFEST, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    model.vocab.save(&dir.join(VOCAB))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

fn read_blob(dir: &Path) -> Result<Vec<u8>> {
    let p = dir.join(PARAMS);
    fs::read(&p).map_err(|e| Error::io(p, e))
}

/// Overwrites `group` with the stored section of the same name after
/// checking layout and checksum.
fn fill_group<T: Scalar>(group: &mut ParamGroup<T>, entry: &GroupEntry, blob: &[u8]) -> Result<()> {
    if entry.params.len() != group.len() {
        return Err(Error::Validation(format!(
            "checkpoint group {} has {} parameters, model expects {}",
            entry.name,
            entry.params.len(),
            group.len()
        )));
    }
    let mut h = Sha256::new();
    for (p, e) in group.params_mut().iter_mut().zip(&entry.params) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(Error::Validation(format!(
                "checkpoint parameter {}/{} {:?} does not match model parameter {} {:?}",
                entry.name,
                e.name,
                e.shape,
                p.name,
                p.value.shape()
            )));
        }
        let n: usize = e.shape.iter().product();
        let bytes = blob
            .get(e.offset..e.offset + 4 * n)
            .ok_or_else(|| Error::Validation(format!("parameter {}/{} runs past the end of {PARAMS}", entry.name, e.name)))?;
        h.update(bytes);
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
            .collect();
        p.value = Tensor::new(e.shape.clone(), data)?;
    }
    let sum = hex::encode(h.finalize());
    if sum != entry.checksum {
        return Err(Error::Audit(format!("checksum mismatch for checkpoint group {}", entry.name)));
    }
    Ok(())
}

/// Rebuilds the model the checkpoint was saved from.
pub fn load<T: Scalar>(dir: &Path) -> Result<UniCtr<T>> {
    let manifest = read_manifest(dir)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB))?;
    let mut model = UniCtr::new(manifest.model.clone(), vocab, manifest.dsns.clone(), manifest.seed)?;
    let blob = read_blob(dir)?;
    let names: Vec<String> = model.groups().iter().map(|g| g.name().to_string()).collect();
    for entry in &manifest.groups {
        if !names.contains(&entry.name) {
            return Err(Error::Registry(format!("unknown checkpoint group `{}`", entry.name)));
        }
    }
    for g in model.groups_mut() {
        let entry = manifest
            .group(g.name())
            .ok_or_else(|| Error::Validation(format!("checkpoint has no section for group `{}`", g.name())))?;
        fill_group(g, entry, &blob)?;
    }
    Ok(model)
}

/// Reads a single domain network's section, compatible with `model`'s
/// backbone, without touching any other group.
pub fn load_dsn<T: Scalar>(dir: &Path, domain: &str, model: &UniCtr<T>) -> Result<DomainSpecificNetwork<T>> {
    let manifest = read_manifest(dir)?;
    if manifest.model.backbone.hidden_dim != model.cfg.backbone.hidden_dim
        || manifest.model.backbone.num_layers != model.cfg.backbone.num_layers
    {
        return Err(Error::Config("checkpoint backbone shape differs from the model's".into()));
    }
    let cfg = manifest
        .dsns
        .iter()
        .find(|c| c.domain_name == domain)
        .cloned()
        .ok_or_else(|| Error::Registry(format!("checkpoint has no domain network for `{domain}`")))?;
    let mut dsn = model.build_dsn(cfg)?;
    let entry = manifest
        .group(dsn.group.name())
        .ok_or_else(|| Error::Registry(format!("checkpoint has no group for `{domain}`")))?;
    fill_group(&mut dsn.group, entry, &read_blob(dir)?)?;
    Ok(dsn)
}
