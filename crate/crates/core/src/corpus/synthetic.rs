//! Parameterized synthetic corpora.
//!
//! Each disease owns a profile of characteristic symptoms drawn from the
//! shared pool, so profiles overlap and a few symptoms rarely pin down the
//! disease on their own. A record samples its disease uniformly, marks each
//! profile symptom present with `presence_prob`, and fills its slots with:
//!
//! * a denied symptom (status 2) from outside the profile, with `negative_prob`;
//! * otherwise an off-profile "noise" symptom with `noise_prob`;
//! * otherwise the next present profile symptom (falling back to the rest of
//!   the profile, then to noise).
//!
//! Findings are shuffled before the explicit/implicit split so symptom order
//! carries no information.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, DiseaseId, Finding, PatientRecord, SymptomId, SymptomStatus, Vocab};
use crate::error::{CoadError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_diseases: usize,
    pub n_symptoms: usize,
    pub symptoms_per_disease: usize,
    pub presence_prob: f64,
    pub negative_prob: f64,
    pub noise_prob: f64,
    pub explicit_range: (usize, usize),
    pub implicit_range: (usize, usize),
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_diseases: 8,
            n_symptoms: 30,
            symptoms_per_disease: 7,
            presence_prob: 0.85,
            negative_prob: 0.1,
            noise_prob: 0.05,
            explicit_range: (1, 2),
            implicit_range: (2, 5),
            n_train: 500,
            n_test: 100,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoadError::config(m));
        if self.n_diseases == 0 || self.n_symptoms == 0 {
            return bad("n_diseases and n_symptoms must be positive".into());
        }
        for (name, p) in [
            ("presence_prob", self.presence_prob),
            ("negative_prob", self.negative_prob),
            ("noise_prob", self.noise_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        let (n_min, n_max) = self.explicit_range;
        let (m_min, m_max) = self.implicit_range;
        if n_min < 1 || n_max < n_min {
            return bad(format!(
                "explicit range {n_min}..={n_max} needs 1 <= min <= max"
            ));
        }
        if m_min < 1 || m_max < m_min {
            return bad(format!(
                "implicit range {m_min}..={m_max} needs 1 <= min <= max"
            ));
        }
        if self.symptoms_per_disease == 0 || self.symptoms_per_disease > self.n_symptoms {
            return bad(format!(
                "symptoms_per_disease = {} must be in 1..={}",
                self.symptoms_per_disease, self.n_symptoms
            ));
        }
        if n_max + m_max > self.n_symptoms {
            return bad(format!(
                "records of up to {} symptoms cannot be drawn from {} symptoms",
                n_max + m_max,
                self.n_symptoms
            ));
        }
        Ok(())
    }
}

struct Generator<'c> {
    cfg: &'c SyntheticConfig,
    profiles: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn record(&mut self) -> PatientRecord {
        let cfg = self.cfg;
        let disease = self.rng.gen_range(0..cfg.n_diseases);
        let n = self
            .rng
            .gen_range(cfg.explicit_range.0..=cfg.explicit_range.1);
        let m = self
            .rng
            .gen_range(cfg.implicit_range.0..=cfg.implicit_range.1);

        let mut profile = self.profiles[disease].clone();
        profile.shuffle(&mut self.rng);
        let (mut present, absent): (Vec<usize>, Vec<usize>) = profile
            .into_iter()
            .partition(|_| self.rng.gen_bool(cfg.presence_prob));
        // Present symptoms first, then the rest of the profile as a fallback.
        present.extend(absent);
        let mut profile_queue = present.into_iter();

        let mut used = vec![false; cfg.n_symptoms];
        let mut findings = Vec::with_capacity(n + m);
        while findings.len() < n + m {
            let roll: f64 = self.rng.gen();
            let finding = if roll < cfg.negative_prob {
                self.off_profile(disease, &used)
                    .map(|s| Finding::new(SymptomId(s), SymptomStatus::Absent))
            } else if roll < cfg.negative_prob + (1.0 - cfg.negative_prob) * cfg.noise_prob {
                self.off_profile(disease, &used)
                    .map(|s| Finding::new(SymptomId(s), SymptomStatus::Present))
            } else {
                profile_queue
                    .by_ref()
                    .find(|&s| !used[s])
                    .or_else(|| self.off_profile(disease, &used))
                    .map(|s| Finding::new(SymptomId(s), SymptomStatus::Present))
            };
            let finding = finding.unwrap_or_else(|| {
                // Everything off-profile is used up: take any free symptom.
                let s = (0..cfg.n_symptoms)
                    .find(|&s| !used[s])
                    .expect("n + m <= n_symptoms");
                Finding::new(SymptomId(s), SymptomStatus::Present)
            });
            used[finding.symptom.0] = true;
            findings.push(finding);
        }
        findings.shuffle(&mut self.rng);
        let implicit = findings.split_off(n);
        PatientRecord {
            explicit: findings,
            implicit,
            disease: DiseaseId(disease),
        }
    }

    fn off_profile(&mut self, disease: usize, used: &[bool]) -> Option<usize> {
        let profile = &self.profiles[disease];
        let pool: Vec<usize> = (0..self.cfg.n_symptoms)
            .filter(|s| !used[*s] && !profile.contains(s))
            .collect();
        pool.choose(&mut self.rng).copied()
    }
}

/// Deterministic for a fixed config (seed included).
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool: Vec<usize> = (0..cfg.n_symptoms).collect();
    let profiles = (0..cfg.n_diseases)
        .map(|_| {
            let mut p: Vec<usize> = pool
                .choose_multiple(&mut rng, cfg.symptoms_per_disease)
                .copied()
                .collect();
            p.sort_unstable();
            p
        })
        .collect();
    let mut gen = Generator { cfg, profiles, rng };
    let train = (0..cfg.n_train).map(|_| gen.record()).collect();
    let test = (0..cfg.n_test).map(|_| gen.record()).collect();
    Corpus::new(train, test, Vocab::numbered(cfg.n_symptoms, cfg.n_diseases))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_seed_gives_identical_corpora() {
        let cfg = SyntheticConfig {
            seed: 7,
            ..Default::default()
        };
        assert_eq!(
            generate_synthetic(&cfg).unwrap(),
            generate_synthetic(&cfg).unwrap()
        );
        let other = SyntheticConfig {
            seed: 8,
            ..cfg.clone()
        };
        assert_ne!(
            generate_synthetic(&cfg).unwrap(),
            generate_synthetic(&other).unwrap()
        );
    }

    #[test]
    fn sizes_and_ranges_hold() {
        let cfg = SyntheticConfig {
            n_diseases: 8,
            n_symptoms: 30,
            n_train: 500,
            n_test: 100,
            ..Default::default()
        };
        let c = generate_synthetic(&cfg).unwrap();
        assert_eq!((c.train.len(), c.test.len()), (500, 100));
        for r in c.train.iter().chain(&c.test) {
            assert!((1..=2).contains(&r.n_explicit()));
            assert!((2..=5).contains(&r.n_implicit()));
            let ids: HashSet<_> = r.sequence().map(|f| f.symptom).collect();
            assert_eq!(ids.len(), r.n_explicit() + r.n_implicit());
            assert!(r.sequence().all(|f| f.status != SymptomStatus::Uncertain));
        }
    }

    #[test]
    fn zero_negative_probability_gives_positive_only_records() {
        let cfg = SyntheticConfig {
            negative_prob: 0.0,
            ..Default::default()
        };
        let c = generate_synthetic(&cfg).unwrap();
        assert!(c
            .train
            .iter()
            .flat_map(|r| r.sequence())
            .all(|f| f.status == SymptomStatus::Present));
        assert_eq!(c.stats().symptom_type, "True");
    }

    #[test]
    fn negative_statuses_appear_when_configured() {
        let cfg = SyntheticConfig {
            negative_prob: 0.3,
            ..Default::default()
        };
        let c = generate_synthetic(&cfg).unwrap();
        let all: Vec<_> = c.train.iter().flat_map(|r| r.sequence()).collect();
        let neg = all
            .iter()
            .filter(|f| f.status == SymptomStatus::Absent)
            .count();
        let frac = neg as f64 / all.len() as f64;
        assert!((0.2..0.4).contains(&frac), "{frac}");
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let too_many = SyntheticConfig {
            symptoms_per_disease: 31,
            ..Default::default()
        };
        assert!(generate_synthetic(&too_many).is_err());
        let bad_range = SyntheticConfig {
            implicit_range: (3, 2),
            ..Default::default()
        };
        assert!(generate_synthetic(&bad_range).is_err());
        let bad_prob = SyntheticConfig {
            negative_prob: 1.5,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad_prob).is_err());
    }

    #[test]
    fn disease_is_recoverable_better_than_chance() {
        // Nearest-profile classifier on the full symptom set.
        let cfg = SyntheticConfig::default();
        let c = generate_synthetic(&cfg).unwrap();
        let mut counts = vec![vec![0usize; cfg.n_symptoms]; cfg.n_diseases];
        for r in &c.train {
            for f in r.sequence().filter(|f| f.status == SymptomStatus::Present) {
                counts[r.disease.0][f.symptom.0] += 1;
            }
        }
        let hits = c
            .test
            .iter()
            .filter(|r| {
                let score = |d: usize| -> usize {
                    r.sequence()
                        .filter(|f| f.status == SymptomStatus::Present)
                        .map(|f| counts[d][f.symptom.0])
                        .sum()
                };
                let best = (0..cfg.n_diseases)
                    .max_by_key(|&d| (score(d), usize::MAX - d))
                    .unwrap();
                best == r.disease.0
            })
            .count();
        let acc = hits as f64 / c.test.len() as f64;
        assert!(acc > 2.0 / cfg.n_diseases as f64, "accuracy {acc}");
    }
}
