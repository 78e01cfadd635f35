use std::collections::HashMap;

use super::{Finding, PatientRecord};

/// Multiset of complete training samples keyed by their unordered set of
/// findings (symptom and status).
#[derive(Debug, Clone, Default)]
pub struct PrefixIndex {
    counts: HashMap<Vec<Finding>, usize>,
}

fn key<'a>(findings: impl IntoIterator<Item = &'a Finding>) -> Vec<Finding> {
    let mut k: Vec<Finding> = findings.into_iter().copied().collect();
    k.sort_unstable();
    k
}

impl PrefixIndex {
    pub fn build(train: &[PatientRecord]) -> Self {
        let mut counts = HashMap::new();
        for r in train {
            *counts.entry(key(r.sequence())).or_insert(0) += 1;
        }
        Self { counts }
    }

    /// Number of training records whose complete finding set equals `findings`
    /// (order ignored).
    pub fn count<'a>(&self, findings: impl IntoIterator<Item = &'a Finding>) -> usize {
        self.counts.get(&key(findings)).copied().unwrap_or(0)
    }

    pub fn contains<'a>(&self, findings: impl IntoIterator<Item = &'a Finding>) -> bool {
        self.count(findings) > 0
    }

    /// Whether `findings` equals the complete sample of some training record
    /// other than `owner` (which must itself be in the index).
    pub fn collides_with_other<'a>(
        &self,
        findings: impl IntoIterator<Item = &'a Finding>,
        owner: &PatientRecord,
    ) -> bool {
        let k = key(findings);
        let mut n = self.counts.get(&k).copied().unwrap_or(0);
        if n > 0 && k == key(owner.sequence()) {
            n -= 1;
        }
        n > 0
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DiseaseId;

    fn rec(explicit: &[usize], implicit: &[usize], d: usize) -> PatientRecord {
        PatientRecord {
            explicit: explicit.iter().map(|&s| Finding::present(s)).collect(),
            implicit: implicit.iter().map(|&s| Finding::present(s)).collect(),
            disease: DiseaseId(d),
        }
    }

    /// Linear scan: does any record's complete set equal `query`'s set?
    fn brute_force(train: &[PatientRecord], query: &[Finding]) -> bool {
        let mut q = query.to_vec();
        q.sort();
        train.iter().any(|r| {
            let mut s: Vec<Finding> = r.sequence().copied().collect();
            s.sort();
            s == q
        })
    }

    #[test]
    fn record_is_a_member_of_its_own_index() {
        let r = rec(&[0], &[1, 2], 0);
        let idx = PrefixIndex::build(std::slice::from_ref(&r));
        assert!(idx.contains(r.sequence()));
        assert!(!idx.collides_with_other(r.sequence(), &r));
    }

    #[test]
    fn strict_prefix_is_not_a_complete_sample() {
        let r = rec(&[0], &[1, 2], 0);
        let idx = PrefixIndex::build(std::slice::from_ref(&r));
        let prefix: Vec<Finding> = r.sequence().take(2).copied().collect();
        assert!(!idx.contains(&prefix));
    }

    #[test]
    fn engineered_collision_matches_linear_scan() {
        let a = rec(&[0], &[1, 2, 3], 0);
        let b = rec(&[1], &[0], 1); // same set as A's first two findings
        let c = rec(&[4], &[5], 2);
        let train = vec![a.clone(), b, c];
        let idx = PrefixIndex::build(&train);
        let prefix: Vec<Finding> = a.sequence().take(2).copied().collect();
        assert_eq!(idx.contains(&prefix), brute_force(&train, &prefix));
        assert!(idx.contains(&prefix));
        for k in 1..=4 {
            let p: Vec<Finding> = a.sequence().take(k).copied().collect();
            assert_eq!(idx.contains(&p), brute_force(&train, &p), "prefix {k}");
        }
    }

    #[test]
    fn status_is_part_of_the_key() {
        let a = rec(&[0], &[1], 0);
        let mut b = a.clone();
        b.implicit[0] = Finding::absent(1);
        let idx = PrefixIndex::build(std::slice::from_ref(&a));
        assert!(!idx.contains(b.sequence()));
    }

    #[test]
    fn duplicate_record_collides_with_itself() {
        let a = rec(&[0], &[1], 0);
        let idx = PrefixIndex::build(&[a.clone(), a.clone()]);
        assert!(idx.collides_with_other(a.sequence(), &a));
    }
}
