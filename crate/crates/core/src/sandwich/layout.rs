use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::budget::{allocate_blocks, Allocation, BudgetProfile};
use super::model::ModelConfig;
use crate::error::{Error, Result};

/// Provenance of a searched mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchMeta {
    pub seed: u64,
    pub steps: usize,
    pub probabilities: Vec<f64>,
    pub final_loss: Option<f64>,
}

/// Hard routing layout: group count, mask and the model it applies to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandwichLayout {
    pub groups: usize,
    pub group_size: usize,
    pub mask: Vec<u8>,
    pub model: ModelConfig,
    #[serde(default)]
    pub budget: Option<BudgetProfile>,
    /// Allocator result in blocks, with the achieved `(L, M)` point.
    #[serde(default)]
    pub allocation: Option<Allocation>,
    #[serde(default)]
    pub search: Option<SearchMeta>,
}

impl SandwichLayout {
    pub fn new(model: ModelConfig, mask: Vec<u8>) -> Result<Self> {
        let layout = Self { groups: model.groups, group_size: model.group_size, mask, model, budget: None, allocation: None, search: None };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups != self.model.groups || self.group_size != self.model.group_size {
            return Err(Error::Layout(format!(
                "layout has {}x{} groups, model config {}x{}",
                self.groups, self.group_size, self.model.groups, self.model.group_size
            )));
        }
        self.model.validate()?;
        let m = &self.mask;
        if m.len() != self.groups || m.iter().any(|&b| b > 1) {
            return Err(Error::Layout(format!("mask {m:?} is not a binary {}-group mask", self.groups)));
        }
        if m[0] != 1 || m[m.len() - 1] != 1 {
            return Err(Error::Layout(format!("mask {m:?} must start and end with an LCHA group")));
        }
        if let Some(a) = &self.allocation {
            let n = self.lcha_blocks();
            if n != a.n_lcha || a.n_lcha + a.n_ssa != self.groups * self.group_size {
                return Err(Error::Layout(format!("mask gives {n} LCHA blocks, allocation says {} of {}", a.n_lcha, a.n_lcha + a.n_ssa)));
            }
        }
        Ok(())
    }

    pub fn interior_lcha(&self) -> usize {
        self.mask[1..self.mask.len() - 1].iter().filter(|&&b| b == 1).count()
    }

    pub fn lcha_blocks(&self) -> usize {
        self.mask.iter().filter(|&&b| b == 1).count() * self.group_size
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let layout: Self = serde_json::from_str(text)?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

/// Allocates blocks at group granularity and returns the allocation (in
/// blocks) with the interior LCHA group count `k` it implies.
pub fn allocate_groups(profile: &BudgetProfile, model: &ModelConfig) -> Result<(Allocation, usize)> {
    if profile.blocks != model.blocks() {
        return Err(Error::config("blocks", format!("budget has {} blocks, model {}", profile.blocks, model.blocks())));
    }
    let grouped = allocate_blocks(&profile.grouped(model.group_size)?)?;
    if grouped.n_lcha < 2 {
        return Err(Error::Layout(format!(
            "budget allows {} LCHA groups; the first and last group must be LCHA",
            grouped.n_lcha
        )));
    }
    let n_lcha = grouped.n_lcha * model.group_size;
    let n_ssa = grouped.n_ssa * model.group_size;
    let (latency, memory) = (profile.latency(n_lcha, n_ssa), profile.memory(n_lcha, n_ssa));
    let allocation = Allocation { n_lcha, n_ssa, latency, memory, distance: profile.distance(latency, memory) };
    Ok((allocation, grouped.n_lcha - 2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(groups: usize) -> ModelConfig {
        ModelConfig { groups, ..ModelConfig::default() }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let mut l = SandwichLayout::new(cfg(5), vec![1, 0, 1, 0, 1]).unwrap();
        l.search = Some(SearchMeta { seed: 3, steps: 10, probabilities: vec![1.0, 0.2, 0.9, 0.1, 1.0], final_loss: Some(0.5) });
        let back = SandwichLayout::from_json(&l.to_json().unwrap()).unwrap();
        assert_eq!(back, l);
        assert_eq!(back.hash().unwrap(), l.hash().unwrap());
        assert_eq!((l.interior_lcha(), l.lcha_blocks()), (1, 6));
        for bad in [vec![0, 1, 1, 1, 1], vec![1, 1, 1, 1, 0], vec![1, 2, 0, 0, 1], vec![1, 1, 1]] {
            assert!(matches!(SandwichLayout::new(cfg(5), bad), Err(Error::Layout(_))));
        }
    }

    #[test]
    fn allocation_must_agree_with_mask() {
        let mut l = SandwichLayout::new(cfg(5), vec![1, 0, 1, 0, 1]).unwrap();
        l.allocation = Some(Allocation { n_lcha: 6, n_ssa: 4, latency: 1.0, memory: 1.0, distance: 0.0 });
        l.validate().unwrap();
        l.allocation = Some(Allocation { n_lcha: 8, n_ssa: 2, latency: 1.0, memory: 1.0, distance: 0.0 });
        assert!(l.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let l = SandwichLayout::new(cfg(3), vec![1, 0, 1]).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&l.to_json().unwrap()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(SandwichLayout::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn group_allocation() {
        let p = BudgetProfile {
            latency_lcha: 9.0,
            latency_ssa: 3.0,
            memory_lcha: 40.0,
            memory_ssa: 20.0,
            blocks: 10,
            latency_max: 70.0,
            memory_max: 10_000.0,
        };
        let (a, k) = allocate_groups(&p, &cfg(5)).unwrap();
        // groups of two: 18 vs 6 ms; three LCHA groups cost 54 + 12 = 66 <= 70
        assert_eq!((a.n_lcha, a.n_ssa, k), (6, 4, 1));
        assert_eq!(a.latency, 66.0);
        let tight = BudgetProfile { latency_max: 50.0, ..p.clone() };
        assert!(matches!(allocate_groups(&tight, &cfg(5)), Err(Error::Layout(_))));
        assert!(allocate_groups(&BudgetProfile { blocks: 12, ..p }, &cfg(5)).is_err());
    }
}
