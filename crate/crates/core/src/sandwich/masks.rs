use crate::error::{Error, Result};

/// Switch triggers between consecutive groups: `u = max(m - m_prev, 0)`, `d = max(m_prev - m, 0)`.
pub fn triggers(m_prev: u8, m_cur: u8) -> (u8, u8) {
    debug_assert!(m_prev <= 1 && m_cur <= 1);
    (m_cur.saturating_sub(m_prev), m_prev.saturating_sub(m_cur))
}

/// All masks of length `groups` with both endpoints set and exactly `k`
/// interior ones, in lexicographic order.
pub fn enumerate_masks(groups: usize, k: usize) -> Result<Vec<Vec<u8>>> {
    if groups < 2 {
        return Err(Error::config("groups", format!("need at least 2 groups, got {groups}")));
    }
    let interior = groups - 2;
    if k > interior {
        return Err(Error::config("k", format!("{k} interior LCHA groups out of range 0..={interior}")));
    }
    let mut out = Vec::new();
    let mut mask = vec![0u8; groups];
    mask[0] = 1;
    mask[groups - 1] = 1;
    // depth-first with 0 before 1 at every position yields lexicographic order
    fn fill(pos: usize, left: usize, end: usize, mask: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if pos == end {
            if left == 0 {
                out.push(mask.clone());
            }
            return;
        }
        if end - pos > left {
            mask[pos] = 0;
            fill(pos + 1, left, end, mask, out);
        }
        if left > 0 {
            mask[pos] = 1;
            fill(pos + 1, left - 1, end, mask, out);
            mask[pos] = 0;
        }
    }
    fill(1, k, groups - 1, &mut mask, &mut out);
    Ok(out)
}

/// Whether `mask` has both endpoints set and `k` interior ones.
pub fn is_legal(mask: &[u8], k: usize) -> bool {
    mask.len() >= 2
        && mask[0] == 1
        && mask[mask.len() - 1] == 1
        && mask.iter().all(|&b| b <= 1)
        && mask[1..mask.len() - 1].iter().filter(|&&b| b == 1).count() == k
}

/// Projects per-group LCHA probabilities onto a legal mask.
///
/// Takes the per-group argmax (`p >= 0.5`), then the legal mask with the
/// smallest Hamming distance to it. Ties go to the mask of highest joint
/// probability, then to the lexicographically first.
pub fn harden_mask(probs: &[f64], k: usize) -> Result<Vec<u8>> {
    let candidates = enumerate_masks(probs.len(), k)?;
    let argmax: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let log_joint = |m: &[u8]| -> f64 {
        m.iter()
            .zip(probs)
            .skip(1)
            .take(probs.len() - 2)
            .map(|(&b, &p)| if b == 1 { p.max(1e-300).ln() } else { (1.0 - p).max(1e-300).ln() })
            .sum()
    };
    let mut best: Option<(usize, f64, &Vec<u8>)> = None;
    for c in &candidates {
        let dist = c.iter().zip(&argmax).skip(1).take(probs.len() - 2).filter(|(a, b)| a != b).count();
        let lp = log_joint(c);
        let better = match best {
            None => true,
            Some((bd, blp, _)) => dist < bd || (dist == bd && lp > blp + 1e-12),
        };
        if better {
            best = Some((dist, lp, c));
        }
    }
    Ok(best.expect("enumerate_masks is never empty").2.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binom(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn trigger_table() {
        assert_eq!(triggers(0, 1), (1, 0));
        assert_eq!(triggers(1, 0), (0, 1));
        assert_eq!(triggers(1, 1), (0, 0));
        assert_eq!(triggers(0, 0), (0, 0));
    }

    #[test]
    fn small_enumerations() {
        assert_eq!(enumerate_masks(6, 2).unwrap().len(), 6);
        assert_eq!(enumerate_masks(3, 0).unwrap(), vec![vec![1, 0, 1]]);
        assert_eq!(enumerate_masks(4, 2).unwrap(), vec![vec![1, 1, 1, 1]]);
        assert!(enumerate_masks(4, 3).is_err());
        assert!(enumerate_masks(1, 0).is_err());
    }

    #[test]
    fn counts_and_membership_match_brute_force() {
        for m in 2..=12usize {
            for k in 0..=m - 2 {
                let got = enumerate_masks(m, k).unwrap();
                assert_eq!(got.len(), binom(m - 2, k));
                let brute: Vec<Vec<u8>> = (0u32..1 << m)
                    .map(|bits| (0..m).map(|i| ((bits >> (m - 1 - i)) & 1) as u8).collect::<Vec<u8>>())
                    .filter(|mask| is_legal(mask, k))
                    .collect();
                // brute is generated in lexicographic order already
                assert_eq!(got, brute);
            }
        }
    }

    #[test]
    fn hardening_projects_to_legal_masks() {
        assert_eq!(harden_mask(&[0.9, 0.8, 0.2, 0.1, 0.9], 1).unwrap(), vec![1, 1, 0, 0, 1]);
        // argmax has two interior ones; both single-one masks are at distance 1, higher probability wins
        assert_eq!(harden_mask(&[1.0, 0.6, 0.9, 0.1, 1.0], 1).unwrap(), vec![1, 0, 1, 0, 1]);
        // full tie falls back to the lexicographically first
        assert_eq!(harden_mask(&[1.0, 0.3, 0.3, 0.3, 1.0], 1).unwrap(), vec![1, 0, 0, 1, 1]);
        assert_eq!(harden_mask(&[1.0, 0.1, 1.0], 1).unwrap(), vec![1, 1, 1]);
    }
}
