//! Checkpoint container, task vectors and merged-model assembly.
//!
//! A checkpoint on disk is a directory holding `manifest.json` and
//! `weights.bin`. The blob is a flat run of little-endian `f64` values; the
//! manifest records where each 2D module and each auxiliary vector lives
//! (byte offsets) together with the block/group labels used for tying.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Tensor2D;
use crate::merge::{Cell, MergeConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC: &str = "mergeforge.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const DTYPE: &str = "f64le";

/// Shape and tying labels of one 2D module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub block: usize,
    pub group: String,
}

impl ModuleMeta {
    pub fn cell(&self) -> Cell {
        Cell::new(self.block, &self.group)
    }
}

/// Named 2D modules plus auxiliary vectors (biases, labels, counters).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    modules: BTreeMap<String, Tensor2D>,
    meta: BTreeMap<String, ModuleMeta>,
    aux: BTreeMap<String, Vec<f64>>,
    format_version: u32,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            modules: BTreeMap::new(),
            meta: BTreeMap::new(),
            aux: BTreeMap::new(),
            format_version: FORMAT_VERSION,
        }
    }

    pub fn insert_module(&mut self, meta: ModuleMeta, weight: Tensor2D) -> Result<()> {
        if weight.shape() != (meta.rows, meta.cols) {
            return Err(Error::Shape(format!(
                "module `{}` declared {}x{} but tensor is {:?}",
                meta.name,
                meta.rows,
                meta.cols,
                weight.shape()
            )));
        }
        self.modules.insert(meta.name.clone(), weight);
        self.meta.insert(meta.name.clone(), meta);
        Ok(())
    }

    pub fn insert_aux(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.aux.insert(name.into(), values);
    }

    pub fn modules(&self) -> &BTreeMap<String, Tensor2D> {
        &self.modules
    }

    pub fn meta(&self) -> &BTreeMap<String, ModuleMeta> {
        &self.meta
    }

    pub fn aux(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.aux
    }

    pub fn format_version(&self) -> u32 {
        self.format_version
    }

    pub fn module(&self, name: &str) -> Result<&Tensor2D> {
        self.modules
            .get(name)
            .ok_or_else(|| Error::MissingModule(name.to_string()))
    }

    pub fn aux_vec(&self, name: &str) -> Result<&[f64]> {
        self.aux
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Format(format!("missing aux vector `{name}`")))
    }

    /// Replace the weight of an existing module (same shape).
    pub fn set_module(&mut self, name: &str, weight: Tensor2D) -> Result<()> {
        let meta = self
            .meta
            .get(name)
            .ok_or_else(|| Error::MissingModule(name.to_string()))?;
        if weight.shape() != (meta.rows, meta.cols) {
            return Err(Error::Shape(format!(
                "module `{name}` is {}x{}, replacement is {:?}",
                meta.rows,
                meta.cols,
                weight.shape()
            )));
        }
        self.modules.insert(name.to_string(), weight);
        Ok(())
    }

    /// Distinct (block, group) tying cells.
    pub fn cells(&self) -> BTreeSet<Cell> {
        self.meta.values().map(ModuleMeta::cell).collect()
    }

    pub fn blocks(&self) -> BTreeSet<usize> {
        self.meta.values().map(|m| m.block).collect()
    }

    /// Fails unless `other` carries identical module metadata.
    pub fn check_compatible(&self, other: &Checkpoint) -> Result<()> {
        if self.meta == other.meta {
            return Ok(());
        }
        let mine: BTreeSet<_> = self.meta.keys().collect();
        let theirs: BTreeSet<_> = other.meta.keys().collect();
        if mine != theirs {
            let diff: Vec<_> = mine.symmetric_difference(&theirs).collect();
            return Err(Error::MetaMismatch(format!("module sets differ at {diff:?}")));
        }
        let bad = self
            .meta
            .iter()
            .find(|(k, v)| other.meta.get(*k) != Some(*v))
            .map(|(k, _)| k.clone())
            .unwrap_or_default();
        Err(Error::MetaMismatch(format!("module `{bad}` differs")))
    }

    /// Write `manifest.json` and `weights.bin` into `dir` (created if needed).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob: Vec<u8> = Vec::new();
        let mut modules = Vec::with_capacity(self.modules.len());
        for (name, tensor) in &self.modules {
            let meta = &self.meta[name];
            modules.push(ModuleEntry {
                name: name.clone(),
                rows: meta.rows,
                cols: meta.cols,
                block: meta.block,
                group: meta.group.clone(),
                offset: blob.len() as u64,
                dtype: DTYPE.to_string(),
            });
            push_f64s(&mut blob, tensor.data());
        }
        let mut aux = Vec::with_capacity(self.aux.len());
        for (name, values) in &self.aux {
            aux.push(AuxEntry {
                name: name.clone(),
                len: values.len(),
                offset: blob.len() as u64,
            });
            push_f64s(&mut blob, values);
        }
        let manifest = Manifest {
            magic: MAGIC.to_string(),
            format_version: self.format_version,
            modules,
            aux,
        };
        let weights = dir.join(WEIGHTS_FILE);
        fs::write(&weights, &blob).map_err(|e| Error::io(&weights, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("unreadable manifest: {e}")))?;
        if manifest.magic != MAGIC {
            return Err(Error::Format(format!("bad magic `{}`", manifest.magic)));
        }
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let weights = dir.join(WEIGHTS_FILE);
        let blob = fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
        if blob.len() % 8 != 0 {
            return Err(Error::Format(format!(
                "weights blob length {} is not a multiple of 8",
                blob.len()
            )));
        }
        let mut ckpt = Checkpoint::new();
        for entry in manifest.modules {
            if entry.dtype != DTYPE {
                return Err(Error::Format(format!("unsupported dtype `{}`", entry.dtype)));
            }
            if ckpt.modules.contains_key(&entry.name) {
                return Err(Error::Format(format!("duplicate module `{}`", entry.name)));
            }
            let values = read_f64s(&blob, entry.offset, entry.rows * entry.cols, &entry.name)?;
            let tensor = Tensor2D::new(entry.rows, entry.cols, values)
                .map_err(|e| Error::Shape(format!("module `{}`: {e}", entry.name)))?;
            ckpt.insert_module(
                ModuleMeta {
                    name: entry.name,
                    rows: entry.rows,
                    cols: entry.cols,
                    block: entry.block,
                    group: entry.group,
                },
                tensor,
            )?;
        }
        for entry in manifest.aux {
            if ckpt.aux.contains_key(&entry.name) {
                return Err(Error::Format(format!("duplicate aux `{}`", entry.name)));
            }
            let values = read_f64s(&blob, entry.offset, entry.len, &entry.name)?;
            ckpt.aux.insert(entry.name, values);
        }
        Ok(ckpt)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    magic: String,
    format_version: u32,
    modules: Vec<ModuleEntry>,
    aux: Vec<AuxEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModuleEntry {
    name: String,
    rows: usize,
    cols: usize,
    block: usize,
    group: String,
    offset: u64,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct AuxEntry {
    name: String,
    len: usize,
    offset: u64,
}

fn push_f64s(blob: &mut Vec<u8>, values: &[f64]) {
    blob.reserve(values.len() * 8);
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(blob: &[u8], offset: u64, count: usize, name: &str) -> Result<Vec<f64>> {
    if offset % 8 != 0 {
        return Err(Error::Format(format!("`{name}` offset {offset} is misaligned")));
    }
    let start = usize::try_from(offset).map_err(|_| Error::Shape(format!("`{name}` offset overflow")))?;
    let end = count
        .checked_mul(8)
        .and_then(|n| n.checked_add(start))
        .ok_or_else(|| Error::Shape(format!("`{name}` extent overflows")))?;
    if end > blob.len() {
        return Err(Error::Shape(format!(
            "`{name}` needs bytes {start}..{end} but blob has {}",
            blob.len()
        )));
    }
    Ok(blob[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Per-module task vectors `U⁽ᵗ⁾ = W⁽ᵗ⁾ − W_pre` and the anchor offset
/// `U⁽⁰⁾ = W_anchor − W_pre`.
#[derive(Clone, Debug)]
pub struct TaskVectorSet {
    pub per_module: BTreeMap<String, Vec<Tensor2D>>,
    pub anchor: BTreeMap<String, Tensor2D>,
    pub meta: BTreeMap<String, ModuleMeta>,
}

impl TaskVectorSet {
    pub fn task_count(&self) -> usize {
        self.per_module.values().next().map_or(0, Vec::len)
    }

    pub fn module_names(&self) -> impl Iterator<Item = &String> {
        self.per_module.keys()
    }

    pub fn task_vector(&self, module: &str, task: usize) -> Result<&Tensor2D> {
        self.per_module
            .get(module)
            .and_then(|v| v.get(task))
            .ok_or_else(|| Error::MissingModule(format!("{module}[task {task}]")))
    }

    pub fn anchor_vector(&self, module: &str) -> Result<&Tensor2D> {
        self.anchor
            .get(module)
            .ok_or_else(|| Error::MissingModule(module.to_string()))
    }

    /// The same task vectors re-centred on a different anchor.
    pub fn with_anchor(&self, anchor: BTreeMap<String, Tensor2D>) -> Self {
        Self {
            per_module: self.per_module.clone(),
            anchor,
            meta: self.meta.clone(),
        }
    }
}

pub fn task_vectors(
    pretrained: &Checkpoint,
    finetuned: &[Checkpoint],
    anchor: &Checkpoint,
) -> Result<TaskVectorSet> {
    anchor.check_compatible(pretrained)?;
    for ft in finetuned {
        ft.check_compatible(pretrained)?;
    }
    let mut per_module = BTreeMap::new();
    let mut anchor_vecs = BTreeMap::new();
    for (name, w_pre) in &pretrained.modules {
        let vecs = finetuned
            .iter()
            .map(|ft| ft.modules[name].sub(w_pre))
            .collect::<Result<Vec<_>>>()?;
        per_module.insert(name.clone(), vecs);
        anchor_vecs.insert(name.clone(), anchor.modules[name].sub(w_pre)?);
    }
    Ok(TaskVectorSet {
        per_module,
        anchor: anchor_vecs,
        meta: pretrained.meta.clone(),
    })
}

/// Task-arithmetic anchor `W_pre + α·Σ_t U⁽ᵗ⁾`; auxiliary vectors copied from
/// the pretrained checkpoint.
pub fn ta_anchor(pretrained: &Checkpoint, finetuned: &[Checkpoint], alpha: f64) -> Result<Checkpoint> {
    if !alpha.is_finite() {
        return Err(Error::OutOfRange(format!("alpha {alpha}")));
    }
    for ft in finetuned {
        ft.check_compatible(pretrained)?;
    }
    let mut out = pretrained.clone();
    for (name, w_pre) in &pretrained.modules {
        let mut w = w_pre.clone();
        for ft in finetuned {
            let u = ft.modules[name].sub(w_pre)?;
            w.axpy(alpha, &u)?;
        }
        out.modules.insert(name.clone(), w);
    }
    Ok(out)
}

/// `W_merged = W_pre + s_block · U` for every 2D module; auxiliary vectors
/// come from the anchor checkpoint.
pub fn assemble(
    pretrained: &Checkpoint,
    merged_vectors: &BTreeMap<String, Tensor2D>,
    config: &MergeConfig,
    anchor: &Checkpoint,
) -> Result<Checkpoint> {
    anchor.check_compatible(pretrained)?;
    let mut out = Checkpoint::new();
    for (name, meta) in &pretrained.meta {
        let u = merged_vectors
            .get(name)
            .ok_or_else(|| Error::MissingModule(name.clone()))?;
        let s = config.scale(meta.block)?;
        let w = pretrained.modules[name].add_scaled(s, u)?;
        out.insert_module(meta.clone(), w)?;
    }
    out.aux = anchor.aux.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::MergeMode;
    use crate::rng;

    fn meta(name: &str, rows: usize, cols: usize, block: usize, group: &str) -> ModuleMeta {
        ModuleMeta {
            name: name.into(),
            rows,
            cols,
            block,
            group: group.into(),
        }
    }

    fn random_ckpt(seed: u64) -> Checkpoint {
        let mut r = rng::rng(seed);
        let mut c = Checkpoint::new();
        c.insert_module(meta("a", 2, 3, 0, "mlp-in"), Tensor2D::standard_normal(2, 3, &mut r))
            .unwrap();
        c.insert_module(meta("b", 3, 2, 1, "mlp-out"), Tensor2D::standard_normal(3, 2, &mut r))
            .unwrap();
        c.insert_aux("a.bias", vec![0.5, -0.25]);
        c
    }

    fn config(scale: f64) -> MergeConfig {
        let mut cfg = MergeConfig::new(MergeMode::Assisted);
        cfg.set_scale(0, scale);
        cfg.set_scale(1, scale);
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = random_ckpt(1);
        c.save(dir.path().join("x")).unwrap();
        let back = Checkpoint::load(dir.path().join("x")).unwrap();
        assert_eq!(c, back);
        back.save(dir.path().join("y")).unwrap();
        let a = fs::read(dir.path().join("x").join(WEIGHTS_FILE)).unwrap();
        let b = fs::read(dir.path().join("y").join(WEIGHTS_FILE)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlong_manifest_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        random_ckpt(2).save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["modules"][0]["rows"] = 1000.into();
        fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn future_version_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        random_ckpt(3).save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["format_version"] = 999.into();
        fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        random_ckpt(4).save(dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format(_))));
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn task_vectors_are_differences() {
        let pre = random_ckpt(5);
        let ft = random_ckpt(6);
        let tv = task_vectors(&pre, &[ft.clone()], &pre).unwrap();
        for (name, w) in ft.modules() {
            let diff = Tensor2D::from_fn(w.rows(), w.cols(), |i, j| w[(i, j)] - pre.modules()[name][(i, j)]);
            assert_eq!(tv.per_module[name][0], diff);
            assert!(tv.anchor[name].frobenius_norm() == 0.0);
        }
        let same = task_vectors(&pre, &[pre.clone(), pre.clone()], &pre).unwrap();
        assert!(same
            .per_module
            .values()
            .flatten()
            .all(|u| u.frobenius_norm() == 0.0));
    }

    #[test]
    fn meta_mismatch_detected() {
        let pre = random_ckpt(5);
        let mut other = Checkpoint::new();
        other
            .insert_module(meta("a", 2, 3, 0, "mlp-in"), Tensor2D::zeros(2, 3))
            .unwrap();
        assert!(matches!(
            task_vectors(&pre, &[other.clone()], &pre),
            Err(Error::MetaMismatch(_))
        ));
        assert!(matches!(ta_anchor(&pre, &[other], 1.0), Err(Error::MetaMismatch(_))));
    }

    #[test]
    fn ta_anchor_cases() {
        let pre = random_ckpt(7);
        let a = random_ckpt(8);
        let b = random_ckpt(9);
        assert_eq!(ta_anchor(&pre, &[a.clone(), b.clone()], 0.0).unwrap(), pre);
        let single = ta_anchor(&pre, &[a.clone()], 1.0).unwrap();
        for (name, w) in a.modules() {
            assert!(single.modules()[name].max_abs_diff(w) < 1e-15);
        }
        let half = ta_anchor(&pre, &[a.clone(), b.clone()], 0.5).unwrap();
        for (name, w) in half.modules() {
            let p = &pre.modules()[name];
            let expect = Tensor2D::from_fn(p.rows(), p.cols(), |i, j| {
                p[(i, j)] + 0.5 * ((a.modules()[name][(i, j)] - p[(i, j)]) + (b.modules()[name][(i, j)] - p[(i, j)]))
            });
            assert!(w.max_abs_diff(&expect) < 1e-14);
        }
        assert_eq!(half.aux(), pre.aux());
    }

    #[test]
    fn assemble_cases() {
        let pre = random_ckpt(10);
        let expert = random_ckpt(11);
        let mut anchor = random_ckpt(12);
        anchor.insert_aux("a.bias", vec![9.0, 9.0]);
        let tv = task_vectors(&pre, &[expert.clone()], &anchor).unwrap();
        let u1: BTreeMap<_, _> = tv.per_module.iter().map(|(k, v)| (k.clone(), v[0].clone())).collect();

        let null = assemble(&pre, &u1, &config(0.0), &anchor).unwrap();
        assert_eq!(null.modules(), pre.modules());
        assert_eq!(null.aux(), anchor.aux());

        let zeros: BTreeMap<_, _> = u1
            .iter()
            .map(|(k, v)| (k.clone(), Tensor2D::zeros(v.rows(), v.cols())))
            .collect();
        assert_eq!(assemble(&pre, &zeros, &config(1.2), &anchor).unwrap().modules(), pre.modules());

        let rebuilt = assemble(&pre, &u1, &config(1.0), &anchor).unwrap();
        for (name, w) in expert.modules() {
            assert!(rebuilt.modules()[name].max_abs_diff(w) < 1e-15);
        }

        let mut partial = u1.clone();
        partial.remove("b");
        assert!(matches!(
            assemble(&pre, &partial, &config(1.0), &anchor),
            Err(Error::MissingModule(_))
        ));
    }
}
