//! Independent reference constructions shared by the integration tests.
//!
//! Everything here is written from the definitions, position by position,
//! with linear scans instead of the library's index structures.

#![allow(dead_code)]

use coad_core::augmentation::{DiseaseLabel, SymptomLabel};
use coad_core::corpus::{DiseaseId, Finding, PatientRecord, SymptomId, SymptomStatus};
use coad_tensor::Mask;
use rand::seq::SliceRandom;
use rand::Rng;

pub struct Reference {
    pub tokens: Vec<Finding>,
    pub group_of: Vec<usize>,
    pub s_labels: Vec<SymptomLabel>,
    pub d_labels: Vec<DiseaseLabel>,
    pub weights: Vec<f64>,
    pub mask: Mask,
}

fn same_set(a: &[Finding], b: &[Finding]) -> bool {
    a.len() == b.len() && a.iter().all(|x| b.contains(x)) && b.iter().all(|x| a.contains(x))
}

/// Is `findings` the complete sample of some training record other than
/// `owner`? Duplicates of `owner` count as others.
pub fn collides(train: &[PatientRecord], owner: &PatientRecord, findings: &[Finding]) -> bool {
    let full = |r: &PatientRecord| {
        r.explicit
            .iter()
            .chain(&r.implicit)
            .copied()
            .collect::<Vec<_>>()
    };
    let mut hits = train
        .iter()
        .filter(|r| same_set(&full(r), findings))
        .count();
    if same_set(&full(owner), findings) {
        hits -= 1;
    }
    hits > 0
}

/// Region layout, labels and weights built one position at a time.
pub fn reference_expansion(record: &PatientRecord, train: &[PatientRecord]) -> Reference {
    let n = record.explicit.len();
    let m = record.implicit.len();
    let mut tokens: Vec<Finding> = record.explicit[..n - 1].to_vec();
    let mut group_of = Vec::new();
    let mut s_labels = Vec::new();
    let mut d_labels = Vec::new();
    let mut weights = Vec::new();
    for g in 0..m {
        let token = if g == 0 {
            record.explicit[n - 1]
        } else {
            record.implicit[g - 1]
        };
        for t in g..m {
            tokens.push(token);
            group_of.push(g);
            s_labels.push(SymptomLabel::Symptom(record.implicit[t].symptom));
            let mut context: Vec<Finding> = record.explicit.clone();
            context.extend_from_slice(&record.implicit[..g]);
            context.push(record.implicit[t]);
            d_labels.push(if collides(train, record, &context) {
                DiseaseLabel::Ignore
            } else {
                DiseaseLabel::Disease(record.disease)
            });
            weights.push(1.0 / (m - g) as f64);
        }
    }
    tokens.push(if m == 0 {
        record.explicit[n - 1]
    } else {
        record.implicit[m - 1]
    });
    group_of.push(m);
    s_labels.push(SymptomLabel::End);
    d_labels.push(DiseaseLabel::Disease(record.disease));
    weights.push(1.0);
    let mask = reference_mask(n - 1, &group_of);
    Reference {
        tokens,
        group_of,
        s_labels,
        d_labels,
        weights,
        mask,
    }
}

/// Visibility from the verbal rule: causal prefix; a region position sees
/// the prefix, itself, and the last member of every earlier group.
pub fn reference_mask(prefix: usize, group_of: &[usize]) -> Mask {
    let len = prefix + group_of.len();
    let last_of_group = |r: usize| r + 1 == group_of.len() || group_of[r + 1] != group_of[r];
    Mask::from_fn(len, len, |q, k| {
        if q < prefix {
            return k <= q;
        }
        if k < prefix || k == q {
            return true;
        }
        if k > q {
            return false;
        }
        let (rq, rk) = (q - prefix, k - prefix);
        last_of_group(rk) && group_of[rk] < group_of[rq]
    })
}

/// Records over a small vocabulary so complete-sample collisions are common.
pub fn random_records(
    rng: &mut impl Rng,
    count: usize,
    max_n: usize,
    max_m: usize,
    n_symptoms: usize,
) -> Vec<PatientRecord> {
    (0..count)
        .map(|_| {
            let n = rng.gen_range(1..=max_n);
            let m = rng.gen_range(0..=max_m.min(n_symptoms - n));
            let mut ids: Vec<usize> = (0..n_symptoms).collect();
            ids.shuffle(rng);
            let finding = |s: usize, rng: &mut dyn rand::RngCore| {
                let status = if rng.gen_bool(0.8) {
                    SymptomStatus::Present
                } else {
                    SymptomStatus::Absent
                };
                Finding::new(SymptomId(s), status)
            };
            let explicit = ids[..n].iter().map(|&s| finding(s, rng)).collect();
            let implicit = ids[n..n + m].iter().map(|&s| finding(s, rng)).collect();
            PatientRecord {
                explicit,
                implicit,
                disease: DiseaseId(rng.gen_range(0..3)),
            }
        })
        .collect()
}

/// Adds, for some records, other records whose complete set equals one of
/// their intermediate contexts.
pub fn with_engineered_collisions(
    rng: &mut impl Rng,
    mut records: Vec<PatientRecord>,
) -> Vec<PatientRecord> {
    let mut extra = Vec::new();
    for r in &records {
        if r.implicit.len() < 2 || !rng.gen_bool(0.3) {
            continue;
        }
        extra.push({
            let g = rng.gen_range(0..r.implicit.len() - 1);
            let t = rng.gen_range(g..r.implicit.len());
            let mut all: Vec<Finding> = r.explicit.clone();
            all.extend_from_slice(&r.implicit[..g]);
            all.push(r.implicit[t]);
            all.shuffle(rng);
            let split = rng.gen_range(1..=all.len());
            let implicit = all.split_off(split);
            PatientRecord {
                explicit: all,
                implicit,
                disease: DiseaseId(rng.gen_range(0..3)),
            }
        });
    }
    records.extend(extra);
    records
}
