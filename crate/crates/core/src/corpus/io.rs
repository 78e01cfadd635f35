//! Line-delimited JSON corpus files.
//!
//! ```text
//! {"symptoms": ["headache", ...], "diseases": ["cold", ...]}
//! {"explicit": [["headache", 1]], "implicit": [["runny nose", 1]], "disease": "cold", "split": "train"}
//! ...
//! ```
//!
//! The header line is optional; without it the vocabularies are collected
//! from the records in order of first appearance. `split` defaults to
//! `train`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Finding, PatientRecord, SymptomStatus, Vocab};
use crate::error::{CoadError, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    symptoms: Vec<String>,
    diseases: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    explicit: Vec<(String, SymptomStatus)>,
    implicit: Vec<(String, SymptomStatus)>,
    disease: String,
    #[serde(default)]
    split: Split,
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    parse_corpus(&fs::read_to_string(path)?)
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .peekable();

    let header = match lines.peek() {
        Some((_, first)) => serde_json::from_str::<Header>(first).ok(),
        None => None,
    };
    if header.is_some() {
        lines.next();
    }

    let mut raw = Vec::new();
    for (line, text) in lines {
        let rec: RecordLine = serde_json::from_str(text).map_err(|e| CoadError::Parse {
            line,
            message: e.to_string(),
        })?;
        raw.push((line, rec));
    }

    let vocab = match header {
        Some(h) => Vocab::new(h.symptoms, h.diseases)?,
        None => infer_vocab(&raw)?,
    };

    let mut corpus = Corpus {
        train: Vec::new(),
        test: Vec::new(),
        vocab,
    };
    for (line, rec) in raw {
        let at = |e: CoadError| match e {
            CoadError::Validation(m) => CoadError::Validation(format!("line {line}: {m}")),
            other => other,
        };
        let record = resolve(&corpus.vocab, &rec).map_err(at)?;
        record.validate(&corpus.vocab).map_err(at)?;
        match rec.split {
            Split::Train => corpus.train.push(record),
            Split::Test => corpus.test.push(record),
        }
    }
    Ok(corpus)
}

fn infer_vocab(raw: &[(usize, RecordLine)]) -> Result<Vocab> {
    let mut symptoms: Vec<String> = Vec::new();
    let mut diseases: Vec<String> = Vec::new();
    for (_, r) in raw {
        for (name, _) in r.explicit.iter().chain(&r.implicit) {
            if !symptoms.contains(name) {
                symptoms.push(name.clone());
            }
        }
        if !diseases.contains(&r.disease) {
            diseases.push(r.disease.clone());
        }
    }
    Vocab::new(symptoms, diseases)
}

fn resolve(vocab: &Vocab, rec: &RecordLine) -> Result<PatientRecord> {
    let findings = |list: &[(String, SymptomStatus)]| -> Result<Vec<Finding>> {
        list.iter()
            .map(|(name, status)| {
                vocab
                    .symptom_id(name)
                    .map(|id| Finding::new(id, *status))
                    .ok_or_else(|| CoadError::validation(format!("unknown symptom {name:?}")))
            })
            .collect()
    };
    Ok(PatientRecord {
        explicit: findings(&rec.explicit)?,
        implicit: findings(&rec.implicit)?,
        disease: vocab
            .disease_id(&rec.disease)
            .ok_or_else(|| CoadError::validation(format!("unknown disease {:?}", rec.disease)))?,
    })
}

/// Serializes with a header line; train records first, then test records.
pub fn render_corpus(corpus: &Corpus) -> String {
    let header = Header {
        symptoms: corpus.vocab.symptoms().to_vec(),
        diseases: corpus.vocab.diseases().to_vec(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    let named = |fs: &[Finding]| -> Vec<(String, SymptomStatus)> {
        fs.iter()
            .map(|f| (corpus.vocab.symptom_name(f.symptom).to_string(), f.status))
            .collect()
    };
    let splits = [(Split::Train, &corpus.train), (Split::Test, &corpus.test)];
    for (split, records) in splits {
        for r in records.iter() {
            let line = RecordLine {
                explicit: named(&r.explicit),
                implicit: named(&r.implicit),
                disease: corpus.vocab.disease_name(r.disease).to_string(),
                split,
            };
            out.push_str(&serde_json::to_string(&line).expect("record serializes"));
            out.push('\n');
        }
    }
    out
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    fs::write(path, render_corpus(corpus))?;
    Ok(())
}
