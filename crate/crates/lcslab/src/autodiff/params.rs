use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const MAGIC: [u8; 4] = *b"LCPK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    /// Learnable entries receive optimizer updates; non-learnable entries
    /// are buffers (e.g. normalization running statistics) that the trainer
    /// maintains directly.
    learnable: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameters plus per-parameter Adam state and a shared step count.
/// Iteration order is the name order (sorted), so updates and serialization
/// are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        learnable: bool,
    ) -> Result<()> {
        if values.len() != rows * cols {
            return Err(Error::validation(format!(
                "parameter '{name}': {} values for shape {rows}x{cols}",
                values.len()
            )));
        }
        if self.entries.contains_key(name) {
            return Err(Error::validation(format!("duplicate parameter '{name}'")));
        }
        let n = values.len();
        self.entries.insert(
            name.to_string(),
            Entry {
                rows,
                cols,
                values,
                learnable,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Sorted parameter names.
    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn shape(&self, name: &str) -> Option<(usize, usize)> {
        self.entries.get(name).map(|e| (e.rows, e.cols))
    }

    pub fn values(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|e| e.values.as_slice())
    }

    pub fn is_learnable(&self, name: &str) -> Option<bool> {
        self.entries.get(name).map(|e| e.learnable)
    }

    /// Overwrite a parameter's values, keeping optimizer state.
    pub fn set_values(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::validation(format!("unknown parameter '{name}'")))?;
        if values.len() != entry.values.len() {
            return Err(Error::validation(format!(
                "parameter '{name}': {} values for shape {}x{}",
                values.len(),
                entry.rows,
                entry.cols
            )));
        }
        entry.values.copy_from_slice(values);
        Ok(())
    }

    /// Optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction over the given gradients. The
    /// shared step count advances exactly once per call; parameters without
    /// a gradient this step keep their values and moments.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, grad) in grads {
            let entry = self.entries.get_mut(name).ok_or_else(|| {
                Error::validation(format!("gradient for unknown parameter '{name}'"))
            })?;
            if !entry.learnable {
                return Err(Error::validation(format!(
                    "gradient for non-learnable buffer '{name}'"
                )));
            }
            if grad.len() != entry.values.len() {
                return Err(Error::validation(format!(
                    "gradient shape mismatch for '{name}'"
                )));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::training(format!(
                    "non-finite gradient for parameter '{name}'"
                )));
            }
            for (i, &g) in grad.iter().enumerate() {
                entry.m[i] = ADAM_BETA1 * entry.m[i] + (1.0 - ADAM_BETA1) * g;
                entry.v[i] = ADAM_BETA2 * entry.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = entry.m[i] / bias1;
                let v_hat = entry.v[i] / bias2;
                entry.values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// Copy values from `other` into this store. Every entry of this store
    /// must exist in `other` with the same shape and vice versa; optimizer
    /// state here is untouched.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::validation(format!(
                "parameter count mismatch: {} here vs {} loaded",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (name, entry) in &mut self.entries {
            let src = other.entries.get(name).ok_or_else(|| {
                Error::validation(format!("loaded store is missing parameter '{name}'"))
            })?;
            if (src.rows, src.cols) != (entry.rows, entry.cols) {
                return Err(Error::validation(format!(
                    "parameter '{name}' has shape {}x{}, expected {}x{}",
                    src.rows, src.cols, entry.rows, entry.cols
                )));
            }
            entry.values.copy_from_slice(&src.values);
        }
        Ok(())
    }

    /// Write the checkpoint archive: magic, version, entry count, a name
    /// table (name, shape, learnable flag), then all values as little-endian
    /// float32 in name order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, entry) in &self.entries {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::validation(format!(
                    "parameter name too long: '{name}'"
                )));
            }
            out.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            out.write_all(name_bytes)?;
            out.write_all(&(entry.rows as u32).to_le_bytes())?;
            out.write_all(&(entry.cols as u32).to_le_bytes())?;
            out.write_all(&[entry.learnable as u8])?;
        }
        for entry in self.entries.values() {
            for &v in &entry.values {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Read an archive written by [`ParamStore::save`]. Optimizer state is
    /// reset; values are promoted from float32.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::format(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let mut buf4 = [0u8; 4];
        reader.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut buf8 = [0u8; 8];
        reader.read_exact(&mut buf8)?;
        let count = u64::from_le_bytes(buf8);

        let mut table = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut len2 = [0u8; 2];
            reader.read_exact(&mut len2)?;
            let mut name = vec![0u8; u16::from_le_bytes(len2) as usize];
            reader.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("parameter name is not valid UTF-8"))?;
            reader.read_exact(&mut buf4)?;
            let rows = u32::from_le_bytes(buf4) as usize;
            reader.read_exact(&mut buf4)?;
            let cols = u32::from_le_bytes(buf4) as usize;
            let mut flag = [0u8; 1];
            reader.read_exact(&mut flag)?;
            table.push((name, rows, cols, flag[0] != 0));
        }

        let mut store = ParamStore::new();
        for (name, rows, cols, learnable) in table {
            let mut bytes = vec![0u8; rows * cols * 4];
            reader.read_exact(&mut bytes)?;
            let values: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(&name, rows, cols, values, learnable)?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of(pairs: &[(&str, Vec<f64>)]) -> BTreeMap<String, Vec<f64>> {
        pairs
            .iter()
            .map(|(n, g)| (n.to_string(), g.clone()))
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_values_and_advances_step() {
        let mut store = ParamStore::new();
        store.insert("w", 1, 2, vec![0.5, -0.5], true).unwrap();
        store
            .adam_step(&grads_of(&[("w", vec![0.0, 0.0])]), 0.1)
            .unwrap();
        assert_eq!(store.values("w").unwrap(), &[0.5, -0.5]);
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let lr = 0.01;
        for g in [0.3, -2.0, 1e-3] {
            let mut store = ParamStore::new();
            store.insert("w", 1, 1, vec![1.0], true).unwrap();
            store.adam_step(&grads_of(&[("w", vec![g])]), lr).unwrap();
            let want = 1.0 - lr * g / (g.abs() + ADAM_EPS);
            assert!((store.values("w").unwrap()[0] - want).abs() < 1e-12);
            // For |g| >> eps this is effectively lr * sign(g).
            assert!((store.values("w").unwrap()[0] - (1.0 - lr * g.signum())).abs() < 1e-5);
        }
    }

    #[test]
    fn identical_gradients_move_parameters_identically() {
        let mut store = ParamStore::new();
        store.insert("a", 1, 2, vec![0.4, -0.7], true).unwrap();
        store.insert("b", 1, 2, vec![0.4, -0.7], true).unwrap();
        for _ in 0..5 {
            let g = vec![0.13, -0.02];
            store
                .adam_step(&grads_of(&[("a", g.clone()), ("b", g)]), 3e-3)
                .unwrap();
        }
        assert_eq!(store.values("a").unwrap(), store.values("b").unwrap());
        assert_eq!(store.step_count(), 5);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut store = ParamStore::new();
        store
            .insert("layer1.weight", 1, 1, vec![0.0], true)
            .unwrap();
        let err = store
            .adam_step(&grads_of(&[("layer1.weight", vec![f64::NAN])]), 0.1)
            .unwrap_err();
        match err {
            Error::Training(msg) => assert!(msg.contains("layer1.weight")),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_mismatched_entries_are_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", 2, 2, vec![0.0; 4], true).unwrap();
        assert!(store.insert("w", 2, 2, vec![0.0; 4], true).is_err());
        assert!(store.insert("x", 2, 2, vec![0.0; 3], true).is_err());
        assert!(store.set_values("w", &[1.0]).is_err());
        assert!(store
            .adam_step(&grads_of(&[("missing", vec![0.0])]), 0.1)
            .is_err());
    }

    #[test]
    fn buffers_reject_gradients() {
        let mut store = ParamStore::new();
        store
            .insert("bn.running_mean", 1, 4, vec![0.0; 4], false)
            .unwrap();
        assert!(store
            .adam_step(&grads_of(&[("bn.running_mean", vec![0.0; 4])]), 0.1)
            .is_err());
    }

    #[test]
    fn archive_roundtrip_preserves_everything_visible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        store
            .insert(
                "layer0.weight",
                3,
                4,
                (0..12).map(|i| i as f64 * 0.125).collect(),
                true,
            )
            .unwrap();
        store
            .insert("layer0.bias", 1, 4, vec![0.5; 4], true)
            .unwrap();
        store
            .insert("bn.running_var", 1, 4, vec![1.0; 4], false)
            .unwrap();
        store.save(&path).unwrap();

        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.names(), store.names());
        for name in store.names() {
            assert_eq!(loaded.shape(&name), store.shape(&name));
            assert_eq!(loaded.is_learnable(&name), store.is_learnable(&name));
            // Values chosen representable in f32, so they survive exactly.
            assert_eq!(loaded.values(&name).unwrap(), store.values(&name).unwrap());
        }
        // Saving the loaded store reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn archive_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        store.insert("w", 1, 1, vec![1.0], true).unwrap();
        store.save(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::Format(_))));

        bytes[0] = b'L';
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::Io(_))));
    }

    #[test]
    fn copy_values_validates_shapes() {
        let mut a = ParamStore::new();
        a.insert("w", 2, 2, vec![0.0; 4], true).unwrap();
        let mut b = ParamStore::new();
        b.insert("w", 2, 2, vec![1.0; 4], true).unwrap();
        a.copy_values_from(&b).unwrap();
        assert_eq!(a.values("w").unwrap(), &[1.0; 4]);

        let mut c = ParamStore::new();
        c.insert("w", 1, 4, vec![2.0; 4], true).unwrap();
        assert!(a.copy_values_from(&c).is_err());
        let mut d = ParamStore::new();
        d.insert("w", 2, 2, vec![0.0; 4], true).unwrap();
        d.insert("extra", 1, 1, vec![0.0], true).unwrap();
        assert!(a.copy_values_from(&d).is_err());
    }
}
