use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{load_tensor, save_tensor};
use super::{NumericsError, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    tensors: BTreeMap<String, String>,
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Gaussian init with standard deviation `std`.
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let t = rng.normal_tensor(shape, std);
        self.insert(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), NumericsError> {
        if value.shape() != self.values[id.0].shape() {
            return Err(NumericsError::shape(
                "param_set",
                format!("`{}`: {:?} vs {:?}", self.names[id.0], value.shape(), self.values[id.0].shape()),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Copies every tensor whose name exists in `other` with the same shape.
    /// Returns the number of tensors copied.
    pub fn inherit_from(&mut self, other: &ParamStore, rename: impl Fn(&str) -> Option<String>) -> usize {
        let mut copied = 0;
        for i in 0..self.values.len() {
            let Some(src_name) = rename(&self.names[i]) else { continue };
            if let Some(src) = other.id(&src_name) {
                if other.get(src).shape() == self.values[i].shape() {
                    self.values[i] = other.get(src).clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Writes one S2TN file per tensor plus `manifest.json` mapping name to file.
    pub fn save_dir(&self, dir: &Path) -> Result<(), NumericsError> {
        fs::create_dir_all(dir)?;
        let mut tensors = BTreeMap::new();
        for (i, (name, value)) in self.names.iter().zip(&self.values).enumerate() {
            let file = format!("{i:04}.s2tn");
            save_tensor(&dir.join(&file), value)?;
            tensors.insert(name.clone(), file);
        }
        let manifest = CheckpointManifest { format: "S2TN".into(), tensors };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| NumericsError::Format(e.to_string()))?;
        fs::write(dir.join(CHECKPOINT_MANIFEST), text)?;
        Ok(())
    }

    /// Loads values for every parameter already registered in `self` from a checkpoint dir.
    pub fn load_dir(&mut self, dir: &Path) -> Result<(), NumericsError> {
        let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| NumericsError::Format(e.to_string()))?;
        for i in 0..self.values.len() {
            let file = manifest
                .tensors
                .get(&self.names[i])
                .ok_or_else(|| NumericsError::Format(format!("checkpoint lacks `{}`", self.names[i])))?;
            let t = load_tensor(&dir.join(file))?;
            self.set(ParamId(i), t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = Rng::new(9);
        let mut store = ParamStore::new();
        store.normal("a.w", &[3, 2], 1.0, &mut rng);
        store.normal("b", &[4], 1.0, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        store.save_dir(dir.path()).unwrap();

        let mut other = ParamStore::new();
        other.insert("a.w", Tensor::zeros(&[3, 2]));
        other.insert("b", Tensor::zeros(&[4]));
        other.load_dir(dir.path()).unwrap();
        for id in store.ids() {
            assert!(store.get(id).bit_eq(other.get(id)));
        }
    }

    #[test]
    fn inherit_matches_names_and_shapes() {
        let mut src = ParamStore::new();
        src.insert("x", Tensor::ones(&[2]));
        src.insert("y", Tensor::ones(&[3]));
        let mut dst = ParamStore::new();
        dst.insert("x", Tensor::zeros(&[2]));
        dst.insert("y", Tensor::zeros(&[4]));
        assert_eq!(dst.inherit_from(&src, |n| Some(n.to_string())), 1);
        assert_eq!(dst.get(ParamId(0)).data(), &[1.0, 1.0]);
    }
}
