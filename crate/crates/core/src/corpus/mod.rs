//! Patient records, vocabularies and corpora.

mod index;
mod io;
mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use index::PrefixIndex;
pub use io::{load_corpus, parse_corpus, render_corpus, write_corpus};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use crate::error::{CoadError, Result};

pub const END_NAME: &str = "<end>";
pub const PAD_NAME: &str = "<pad>";
pub const IGNORE_NAME: &str = "#";

/// Answer to "do you have symptom s?".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum SymptomStatus {
    Uncertain = 0,
    Present = 1,
    Absent = 2,
}

impl SymptomStatus {
    pub const ALL: [SymptomStatus; 3] = [Self::Uncertain, Self::Present, Self::Absent];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Uncertain),
            1 => Some(Self::Present),
            2 => Some(Self::Absent),
            _ => None,
        }
    }
}

impl From<SymptomStatus> for u8 {
    fn from(s: SymptomStatus) -> u8 {
        s.code()
    }
}

impl TryFrom<u8> for SymptomStatus {
    type Error = String;

    fn try_from(code: u8) -> std::result::Result<Self, String> {
        Self::from_code(code).ok_or_else(|| format!("symptom status must be 0, 1 or 2, got {code}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SymptomId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DiseaseId(pub usize);

impl fmt::Display for SymptomId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl fmt::Display for DiseaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.0)
    }
}

/// One symptom together with the patient's answer about it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Finding {
    pub symptom: SymptomId,
    pub status: SymptomStatus,
}

impl Finding {
    pub fn new(symptom: SymptomId, status: SymptomStatus) -> Self {
        Self { symptom, status }
    }

    pub fn present(symptom: usize) -> Self {
        Self::new(SymptomId(symptom), SymptomStatus::Present)
    }

    pub fn absent(symptom: usize) -> Self {
        Self::new(SymptomId(symptom), SymptomStatus::Absent)
    }
}

/// Symptom and disease names plus the special symptom-side tokens.
///
/// Symptom-side token ids: `0..n` are symptoms, `n` is END, `n + 1` is PAD
/// and `n + 2` is the IGNORE label (never an input, never a logit).
/// Disease-side labels use `n_diseases` as IGNORE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symptoms: Vec<String>,
    diseases: Vec<String>,
    symptom_index: HashMap<String, usize>,
    disease_index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(symptoms: Vec<String>, diseases: Vec<String>) -> Result<Self> {
        let mut symptom_index = HashMap::new();
        for (i, s) in symptoms.iter().enumerate() {
            if [END_NAME, PAD_NAME, IGNORE_NAME].contains(&s.as_str()) {
                return Err(CoadError::validation(format!(
                    "symptom name {s:?} collides with a special token"
                )));
            }
            if symptom_index.insert(s.clone(), i).is_some() {
                return Err(CoadError::validation(format!(
                    "duplicate symptom name {s:?}"
                )));
            }
        }
        let mut disease_index = HashMap::new();
        for (i, d) in diseases.iter().enumerate() {
            if disease_index.insert(d.clone(), i).is_some() {
                return Err(CoadError::validation(format!(
                    "duplicate disease name {d:?}"
                )));
            }
        }
        if diseases.is_empty() {
            return Err(CoadError::validation("vocabulary has no diseases"));
        }
        Ok(Self {
            symptoms,
            diseases,
            symptom_index,
            disease_index,
        })
    }

    /// Names `symptom_0..` and `disease_0..`.
    pub fn numbered(n_symptoms: usize, n_diseases: usize) -> Self {
        Self::new(
            (0..n_symptoms).map(|i| format!("symptom_{i}")).collect(),
            (0..n_diseases).map(|i| format!("disease_{i}")).collect(),
        )
        .expect("generated names are unique")
    }

    pub fn symptoms(&self) -> &[String] {
        &self.symptoms
    }

    pub fn diseases(&self) -> &[String] {
        &self.diseases
    }

    pub fn n_symptoms(&self) -> usize {
        self.symptoms.len()
    }

    pub fn n_diseases(&self) -> usize {
        self.diseases.len()
    }

    pub fn symptom_id(&self, name: &str) -> Option<SymptomId> {
        self.symptom_index.get(name).copied().map(SymptomId)
    }

    pub fn disease_id(&self, name: &str) -> Option<DiseaseId> {
        self.disease_index.get(name).copied().map(DiseaseId)
    }

    pub fn symptom_name(&self, id: SymptomId) -> &str {
        &self.symptoms[id.0]
    }

    pub fn disease_name(&self, id: DiseaseId) -> &str {
        &self.diseases[id.0]
    }

    pub fn end_token(&self) -> usize {
        self.symptoms.len()
    }

    pub fn pad_token(&self) -> usize {
        self.symptoms.len() + 1
    }

    pub fn ignore_token(&self) -> usize {
        self.symptoms.len() + 2
    }

    /// Input embedding rows and symptom-head outputs: symptoms, END, PAD.
    pub fn symptom_token_count(&self) -> usize {
        self.symptoms.len() + 2
    }

    pub fn disease_ignore(&self) -> usize {
        self.diseases.len()
    }

    /// Display name for any symptom-side token id.
    pub fn token_name(&self, token: usize) -> &str {
        let n = self.symptoms.len();
        match token {
            t if t < n => &self.symptoms[t],
            t if t == n => END_NAME,
            t if t == n + 1 => PAD_NAME,
            _ => IGNORE_NAME,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub explicit: Vec<Finding>,
    pub implicit: Vec<Finding>,
    pub disease: DiseaseId,
}

impl PatientRecord {
    pub fn n_explicit(&self) -> usize {
        self.explicit.len()
    }

    pub fn n_implicit(&self) -> usize {
        self.implicit.len()
    }

    /// Explicit findings followed by implicit findings.
    pub fn sequence(&self) -> impl Iterator<Item = &Finding> {
        self.explicit.iter().chain(&self.implicit)
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.explicit.is_empty() {
            return Err(CoadError::validation("record has no explicit symptoms"));
        }
        if self.disease.0 >= vocab.n_diseases() {
            return Err(CoadError::validation(format!(
                "unknown disease id {}",
                self.disease.0
            )));
        }
        let mut seen = HashSet::new();
        for f in self.sequence() {
            if f.symptom.0 >= vocab.n_symptoms() {
                return Err(CoadError::validation(format!(
                    "unknown symptom id {}",
                    f.symptom.0
                )));
            }
            if !seen.insert(f.symptom) {
                return Err(CoadError::validation(format!(
                    "symptom {:?} appears twice in one record",
                    vocab.symptom_name(f.symptom)
                )));
            }
            // Uncertainty is only ever an answer at inference time.
            if f.status == SymptomStatus::Uncertain {
                return Err(CoadError::validation(format!(
                    "symptom {:?} is stored with status 0 (uncertain)",
                    vocab.symptom_name(f.symptom)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
    pub vocab: Vocab,
}

impl Corpus {
    pub fn new(train: Vec<PatientRecord>, test: Vec<PatientRecord>, vocab: Vocab) -> Result<Self> {
        for r in train.iter().chain(&test) {
            r.validate(&vocab)?;
        }
        Ok(Self { train, test, vocab })
    }

    /// Summary in the shape of a dataset statistics table.
    pub fn stats(&self) -> CorpusStats {
        let all: Vec<&PatientRecord> = self.train.iter().chain(&self.test).collect();
        let total_len: usize = all.iter().map(|r| r.n_explicit() + r.n_implicit()).sum();
        let has_negative = all
            .iter()
            .flat_map(|r| r.sequence())
            .any(|f| f.status == SymptomStatus::Absent);
        CorpusStats {
            diseases: self.vocab.n_diseases(),
            symptoms: self.vocab.n_symptoms(),
            symptom_type: if has_negative { "True/False" } else { "True" },
            average_length: if all.is_empty() {
                0.0
            } else {
                total_len as f64 / all.len() as f64
            },
            train: self.train.len(),
            test: self.test.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub diseases: usize,
    pub symptoms: usize,
    pub symptom_type: &'static str,
    pub average_length: f64,
    pub train: usize,
    pub test: usize,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16}{:>10}", "# Disease", self.diseases)?;
        writeln!(f, "{:<16}{:>10}", "# Symptom", self.symptoms)?;
        writeln!(f, "{:<16}{:>10}", "Symptom type", self.symptom_type)?;
        writeln!(f, "{:<16}{:>10.1}", "Average length", self.average_length)?;
        writeln!(f, "{:<16}{:>10}", "# Training", self.train)?;
        write!(f, "{:<16}{:>10}", "# Test", self.test)
    }
}
