//! On-disk format for parameters and optimizer state.
//!
//! A checkpoint directory holds `manifest.json` (slot names, shapes, role tags,
//! optimizer hyperparameters and step) and `tensors.bin`, a flat little-endian
//! `f64` blob: every slot's values in manifest order, then every slot's first
//! moments, then every slot's second moments.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, ParamStore, Role, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
const FORMAT: &str = "hmws-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotManifest {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub slots: Vec<SlotManifest>,
    pub optimizer: AdamConfig,
    pub step: u64,
    /// Caller-owned metadata (iteration counters and the like).
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Manifest {
    pub fn describe(store: &ParamStore, adam: &AdamState, extra: serde_json::Value) -> Self {
        Manifest {
            format: FORMAT.to_string(),
            slots: store
                .slots()
                .iter()
                .map(|s| SlotManifest {
                    name: s.name.clone(),
                    shape: s.value.shape().to_vec(),
                    role: s.role,
                })
                .collect(),
            optimizer: adam.config,
            step: adam.step,
            extra,
        }
    }

    fn total_len(&self) -> usize {
        self.slots
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// Line-per-difference report against the layout of `store`.
    pub fn diff(&self, store: &ParamStore) -> Vec<String> {
        let mut out = Vec::new();
        let expected: Vec<SlotManifest> = store
            .slots()
            .iter()
            .map(|s| SlotManifest {
                name: s.name.clone(),
                shape: s.value.shape().to_vec(),
                role: s.role,
            })
            .collect();
        for e in &expected {
            match self.slots.iter().find(|s| s.name == e.name) {
                None => out.push(format!(
                    "- {} {:?} ({:?}) missing from checkpoint",
                    e.name, e.shape, e.role
                )),
                Some(s) if s.shape != e.shape || s.role != e.role => out.push(format!(
                    "~ {}: checkpoint {:?} ({:?}), model {:?} ({:?})",
                    e.name, s.shape, s.role, e.shape, e.role
                )),
                _ => {}
            }
        }
        for s in &self.slots {
            if !expected.iter().any(|e| e.name == s.name) {
                out.push(format!(
                    "+ {} {:?} ({:?}) not in model",
                    s.name, s.shape, s.role
                ));
            }
        }
        if out.is_empty() {
            let order_ok = expected
                .iter()
                .zip(&self.slots)
                .all(|(e, s)| e.name == s.name);
            if !order_ok {
                out.push("slot order differs from model".to_string());
            }
        }
        out
    }
}

fn push_le(buf: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the store and optimizer state into `dir`.
pub fn save(
    dir: &Path,
    store: &ParamStore,
    adam: &AdamState,
    extra: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest::describe(store, adam, extra);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;

    let mut blob = Vec::with_capacity(manifest.total_len() * 3 * 8);
    for id in 0..store.len() {
        push_le(&mut blob, store.value(id));
    }
    for m in &adam.m {
        push_le(&mut blob, m);
    }
    for v in &adam.v {
        push_le(&mut blob, v);
    }
    let tpath = dir.join(TENSORS_FILE);
    fs::write(&tpath, blob).map_err(|e| Error::io(&tpath, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unknown format `{}` (expected `{FORMAT}`)",
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint into `store`, whose layout must match the manifest.
///
/// On mismatch the error lists every differing slot.
pub fn load(dir: &Path, store: &mut ParamStore) -> Result<(AdamState, Manifest)> {
    let manifest = read_manifest(dir)?;
    let diff = manifest.diff(store);
    if !diff.is_empty() {
        return Err(Error::Checkpoint(diff.join("\n")));
    }
    let tpath = dir.join(TENSORS_FILE);
    let blob = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
    let total = manifest.total_len();
    if blob.len() != total * 3 * 8 {
        return Err(Error::Checkpoint(format!(
            "{TENSORS_FILE} holds {} bytes, manifest implies {}",
            blob.len(),
            total * 3 * 8
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut read_section = || -> Result<Vec<Tensor>> {
        manifest
            .slots
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                Tensor::new(s.shape.clone(), values.by_ref().take(n).collect())
            })
            .collect()
    };
    let params = read_section()?;
    let m = read_section()?;
    let v = read_section()?;
    for (id, t) in params.into_iter().enumerate() {
        store.set_by_id(id, t)?;
    }
    Ok((
        AdamState::from_parts(manifest.optimizer, manifest.step, m, v),
        manifest,
    ))
}

/// Human-readable summary of a manifest, one slot per line.
pub fn summary(manifest: &Manifest) -> String {
    let mut s = String::new();
    for slot in &manifest.slots {
        let _ = writeln!(s, "{:<40} {:?} {:?}", slot.name, slot.shape, slot.role);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::{adam_step, Gradients};

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "gen.w",
            Role::Generative,
            Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, 1e-300]).unwrap(),
        )
        .unwrap();
        s.insert(
            "rec.b",
            Role::Recognition,
            Tensor::vector(vec![0.1, 0.2, 0.3]),
        )
        .unwrap();
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store();
        let mut adam = AdamState::new(&s, AdamConfig::default());
        let mut g = Gradients::zeros(&s);
        g.accumulate(
            0,
            1.0,
            &Tensor::matrix(2, 2, vec![0.5, 0.1, -0.3, 2.0]).unwrap(),
        );
        adam_step(&mut s, &g, &mut adam);
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        save(&a, &s, &adam, serde_json::json!({"iteration": 7})).unwrap();

        let mut s2 = store();
        let (adam2, manifest) = load(&a, &mut s2).unwrap();
        assert_eq!(manifest.extra["iteration"], 7);
        assert_eq!(adam2, adam);
        save(&b, &s2, &adam2, manifest.extra.clone()).unwrap();
        for f in [MANIFEST_FILE, TENSORS_FILE] {
            assert_eq!(
                fs::read(a.join(f)).unwrap(),
                fs::read(b.join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn layout_mismatch_reports_diff() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        let adam = AdamState::new(&s, AdamConfig::default());
        save(dir.path(), &s, &adam, serde_json::Value::Null).unwrap();

        let mut other = ParamStore::new();
        other
            .insert("gen.w", Role::Generative, Tensor::zeros(&[3]))
            .unwrap();
        other
            .insert("gen.extra", Role::Generative, Tensor::zeros(&[1]))
            .unwrap();
        let err = load(dir.path(), &mut other).unwrap_err().to_string();
        assert!(err.contains("~ gen.w"), "{err}");
        assert!(err.contains("- gen.extra"), "{err}");
        assert!(err.contains("+ rec.b"), "{err}");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        let adam = AdamState::new(&s, AdamConfig::default());
        save(dir.path(), &s, &adam, serde_json::Value::Null).unwrap();
        let p = dir.path().join(TENSORS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&p, bytes).unwrap();
        let mut s2 = store();
        assert!(matches!(
            load(dir.path(), &mut s2),
            Err(Error::Checkpoint(_))
        ));
    }
}
