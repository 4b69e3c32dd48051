use serde::{Deserialize, Serialize};

use crate::error::{BudgetConstraint, Error, Result};

/// Per-block costs of the two block types and the device budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetProfile {
    /// Latency of one LCHA block (ms).
    pub latency_lcha: f64,
    /// Latency of one SSA block (ms).
    pub latency_ssa: f64,
    /// Memory of one LCHA block (MB).
    pub memory_lcha: f64,
    /// Memory of one SSA block (MB).
    pub memory_ssa: f64,
    /// Total number of blocks `K`.
    pub blocks: usize,
    pub latency_max: f64,
    pub memory_max: f64,
}

impl BudgetProfile {
    pub fn validate(&self) -> Result<()> {
        let costs = [
            ("latency_lcha", self.latency_lcha),
            ("latency_ssa", self.latency_ssa),
            ("memory_lcha", self.memory_lcha),
            ("memory_ssa", self.memory_ssa),
            ("latency_max", self.latency_max),
            ("memory_max", self.memory_max),
        ];
        for (field, v) in costs {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be a positive finite number, got {v}")));
            }
        }
        if self.blocks < 2 {
            return Err(Error::config("blocks", format!("need at least 2 blocks, got {}", self.blocks)));
        }
        Ok(())
    }

    pub fn latency(&self, n_lcha: usize, n_ssa: usize) -> f64 {
        self.latency_lcha * n_lcha as f64 + self.latency_ssa * n_ssa as f64
    }

    pub fn memory(&self, n_lcha: usize, n_ssa: usize) -> f64 {
        self.memory_lcha * n_lcha as f64 + self.memory_ssa * n_ssa as f64
    }

    /// Normalized distance of a cost point from full budget utilization.
    pub fn distance(&self, latency: f64, memory: f64) -> f64 {
        ((1.0 - latency / self.latency_max).powi(2) + (1.0 - memory / self.memory_max).powi(2)).sqrt()
    }

    /// The same budget counted in groups of `group_size` blocks.
    pub fn grouped(&self, group_size: usize) -> Result<BudgetProfile> {
        if group_size == 0 || !self.blocks.is_multiple_of(group_size) {
            return Err(Error::config("group_size", format!("{} blocks are not divisible into groups of {group_size}", self.blocks)));
        }
        let g = group_size as f64;
        Ok(BudgetProfile {
            latency_lcha: self.latency_lcha * g,
            latency_ssa: self.latency_ssa * g,
            memory_lcha: self.memory_lcha * g,
            memory_ssa: self.memory_ssa * g,
            blocks: self.blocks / group_size,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub n_lcha: usize,
    pub n_ssa: usize,
    /// Achieved latency (ms).
    pub latency: f64,
    /// Achieved memory (MB).
    pub memory: f64,
    pub distance: f64,
}

/// Chooses block counts `(N_LCHA, N_SSA)` with `N_LCHA + N_SSA = K`.
///
/// Dynamic program over block positions: `reach[j]` holds the cost of the
/// partial assignments with `j` LCHA blocks, and states over budget are pruned
/// (costs only grow). Among complete feasible states, the point closest to
/// `(L_max, M_max)` wins; ties go to more LCHA blocks.
pub fn allocate_blocks(p: &BudgetProfile) -> Result<Allocation> {
    p.validate()?;
    let k = p.blocks;
    let fits = |l: f64, m: f64| l <= p.latency_max && m <= p.memory_max;
    // pruning slack so accumulated rounding never drops a state that is feasible by exact cost
    let slack = 1.0 + 1e-9;
    let open = |l: f64, m: f64| l <= p.latency_max * slack && m <= p.memory_max * slack;
    let mut reach: Vec<Option<(f64, f64)>> = vec![Some((0.0, 0.0))];
    for _ in 0..k {
        let mut next: Vec<Option<(f64, f64)>> = vec![None; reach.len() + 1];
        for (j, state) in reach.iter().enumerate() {
            let Some((l, m)) = *state else { continue };
            // n_lcha and n_ssa fully determine the cost, so both transitions
            // into `next[j+1]` carry the same value
            let ssa = (l + p.latency_ssa, m + p.memory_ssa);
            if open(ssa.0, ssa.1) && next[j].is_none() {
                next[j] = Some(ssa);
            }
            let lcha = (l + p.latency_lcha, m + p.memory_lcha);
            if open(lcha.0, lcha.1) && next[j + 1].is_none() {
                next[j + 1] = Some(lcha);
            }
        }
        reach = next;
    }

    let mut best: Option<Allocation> = None;
    for (n_lcha, state) in reach.iter().enumerate() {
        if state.is_none() {
            continue;
        }
        let n_ssa = k - n_lcha;
        // exact costs, independent of the accumulation order above
        let (latency, memory) = (p.latency(n_lcha, n_ssa), p.memory(n_lcha, n_ssa));
        if !fits(latency, memory) {
            continue;
        }
        let distance = p.distance(latency, memory);
        if best.as_ref().is_none_or(|b| distance <= b.distance) {
            best = Some(Allocation { n_lcha, n_ssa, latency, memory, distance });
        }
    }
    best.ok_or_else(|| infeasible(p))
}

fn infeasible(p: &BudgetProfile) -> Error {
    let k = p.blocks as f64;
    let min_latency = k * p.latency_lcha.min(p.latency_ssa);
    let min_memory = k * p.memory_lcha.min(p.memory_ssa);
    if min_latency > p.latency_max {
        Error::Infeasible { constraint: BudgetConstraint::Latency, best: min_latency, limit: p.latency_max }
    } else if min_memory > p.memory_max {
        Error::Infeasible { constraint: BudgetConstraint::Memory, best: min_memory, limit: p.memory_max }
    } else {
        let best = (0..=p.blocks)
            .map(|n| p.distance(p.latency(n, p.blocks - n), p.memory(n, p.blocks - n)))
            .fold(f64::INFINITY, f64::min);
        Error::Infeasible { constraint: BudgetConstraint::Joint, best, limit: 0.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn profile(lmax: f64, mmax: f64) -> BudgetProfile {
        BudgetProfile {
            latency_lcha: 9.0,
            latency_ssa: 3.0,
            memory_lcha: 40.0,
            memory_ssa: 20.0,
            blocks: 30,
            latency_max: lmax,
            memory_max: mmax,
        }
    }

    /// Scans every split directly.
    fn exhaustive(p: &BudgetProfile) -> Option<(usize, usize)> {
        let mut best: Option<(usize, f64)> = None;
        for n in 0..=p.blocks {
            let s = (p.blocks - n) as f64;
            let (l, m) = (p.latency_lcha * n as f64 + p.latency_ssa * s, p.memory_lcha * n as f64 + p.memory_ssa * s);
            if l > p.latency_max || m > p.memory_max {
                continue;
            }
            let d = ((1.0 - l / p.latency_max).powi(2) + (1.0 - m / p.memory_max).powi(2)).sqrt();
            if best.is_none_or(|(_, bd)| d <= bd) {
                best = Some((n, d));
            }
        }
        best.map(|(n, _)| (n, p.blocks - n))
    }

    #[test]
    fn unconstrained_budget_is_all_lcha() {
        let a = allocate_blocks(&profile(10_000.0, 10_000.0)).unwrap();
        assert_eq!((a.n_lcha, a.n_ssa), (30, 0));
    }

    #[test]
    fn tight_budget_matches_exhaustive_scan() {
        let p = profile(150.0, 900.0);
        let a = allocate_blocks(&p).unwrap();
        assert_eq!(Some((a.n_lcha, a.n_ssa)), exhaustive(&p));
        assert!(a.latency <= 150.0 && a.memory <= 900.0);
    }

    #[test]
    fn latency_lower_bound_violation_is_reported() {
        match allocate_blocks(&profile(80.0, 10_000.0)) {
            Err(Error::Infeasible { constraint: BudgetConstraint::Latency, best, limit }) => {
                assert_eq!((best, limit), (90.0, 80.0));
            }
            other => panic!("{other:?}"),
        }
        match allocate_blocks(&profile(10_000.0, 100.0)) {
            Err(Error::Infeasible { constraint: BudgetConstraint::Memory, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn joint_infeasibility_is_named() {
        // all-SSA is cheapest in latency, all-LCHA cheapest in memory; no split meets both
        let p = BudgetProfile {
            latency_lcha: 10.0,
            latency_ssa: 1.0,
            memory_lcha: 1.0,
            memory_ssa: 10.0,
            blocks: 10,
            latency_max: 20.0,
            memory_max: 20.0,
        };
        assert!(matches!(allocate_blocks(&p), Err(Error::Infeasible { constraint: BudgetConstraint::Joint, .. })));
    }

    #[test]
    fn rejects_bad_profiles() {
        let mut p = profile(1.0, 1.0);
        p.blocks = 1;
        assert!(matches!(allocate_blocks(&p), Err(Error::Config { .. })));
        let mut p = profile(1.0, 1.0);
        p.memory_ssa = 0.0;
        assert!(matches!(allocate_blocks(&p), Err(Error::Config { field, .. }) if field == "memory_ssa"));
    }

    #[test]
    fn matches_exhaustive_on_random_profiles() {
        let mut rng = Rng::new(5);
        for _ in 0..1000 {
            let p = BudgetProfile {
                latency_lcha: rng.uniform_range(0.5, 10.0),
                latency_ssa: rng.uniform_range(0.5, 10.0),
                memory_lcha: rng.uniform_range(1.0, 50.0),
                memory_ssa: rng.uniform_range(1.0, 50.0),
                blocks: 2 + rng.below(40),
                latency_max: rng.uniform_range(10.0, 300.0),
                memory_max: rng.uniform_range(50.0, 1500.0),
            };
            let got = allocate_blocks(&p).ok().map(|a| (a.n_lcha, a.n_ssa));
            assert_eq!(got, exhaustive(&p), "{p:?}");
        }
    }

    #[test]
    fn grouped_profile_scales_costs() {
        let g = profile(150.0, 900.0).grouped(2).unwrap();
        assert_eq!((g.blocks, g.latency_lcha, g.memory_ssa), (15, 18.0, 40.0));
        assert!(profile(1.0, 1.0).grouped(4).is_err());
    }
}
