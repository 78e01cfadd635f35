//! Greedy inquiry over a growing transcript, and a simulated patient that
//! answers from a held-out record.

use std::fmt;

use coad_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::corpus::{DiseaseId, Finding, PatientRecord, SymptomId, SymptomStatus};
use crate::error::{CoadError, Result};
use crate::model::CoadModel;

/// How an episode ends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopMode {
    /// The agent may emit END at any turn; the turn budget is a cap.
    #[default]
    Limited,
    /// END is suppressed until the turn budget is spent.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueConfig {
    pub max_turns: usize,
    pub mode: StopMode,
}

impl Default for DialogueConfig {
    fn default() -> Self {
        Self {
            max_turns: 10,
            mode: StopMode::Limited,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inquiry {
    Ask(SymptomId),
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    /// Waiting for the agent's next inquiry.
    Ready,
    /// An inquiry is out and awaits its answer.
    Pending(SymptomId),
    /// The agent has stopped asking.
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnosis {
    pub disease: DiseaseId,
    /// Softmax over all diseases.
    pub probabilities: Vec<f64>,
}

impl Diagnosis {
    /// The `k` most probable diseases, ties to the lower id.
    pub fn top(&self, k: usize) -> Vec<(DiseaseId, f64)> {
        let mut ranked: Vec<(DiseaseId, f64)> = self
            .probabilities
            .iter()
            .enumerate()
            .map(|(i, &p)| (DiseaseId(i), p))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

/// One consultation. The model is passed to each call so sessions can be
/// stored apart from it.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueSession {
    config: DialogueConfig,
    n_explicit: usize,
    transcript: Vec<Finding>,
    state: SessionState,
}

impl DialogueSession {
    pub fn new(explicit: Vec<Finding>, config: DialogueConfig) -> Result<Self> {
        if explicit.is_empty() {
            return Err(CoadError::validation(
                "at least one explicit symptom is required",
            ));
        }
        for (i, f) in explicit.iter().enumerate() {
            if explicit[..i].iter().any(|g| g.symptom == f.symptom) {
                return Err(CoadError::validation(format!(
                    "symptom {} is repeated",
                    f.symptom
                )));
            }
        }
        Ok(Self {
            config,
            n_explicit: explicit.len(),
            transcript: explicit,
            state: SessionState::Ready,
        })
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn config(&self) -> DialogueConfig {
        self.config
    }

    pub fn turns(&self) -> usize {
        self.transcript.len() - self.n_explicit
    }

    pub fn transcript(&self) -> &[Finding] {
        &self.transcript
    }

    pub fn explicit(&self) -> &[Finding] {
        &self.transcript[..self.n_explicit]
    }

    pub fn inquired(&self) -> &[Finding] {
        &self.transcript[self.n_explicit..]
    }

    fn check_vocab<T: Scalar>(&self, model: &CoadModel<T>) -> Result<()> {
        let n = model.config().n_symptoms;
        match self.transcript.iter().find(|f| f.symptom.0 >= n) {
            Some(f) => Err(CoadError::validation(format!(
                "symptom {} is outside the model's {n} symptoms",
                f.symptom
            ))),
            None => Ok(()),
        }
    }

    fn model_input(&self) -> (Vec<usize>, Vec<usize>) {
        self.transcript
            .iter()
            .map(|f| (f.symptom.0, f.status.code() as usize))
            .unzip()
    }

    /// The agent's next move. Asking a symptom leaves the session pending
    /// until [`answer`](Self::answer); END stops it.
    pub fn next_inquiry<T: Scalar>(&mut self, model: &CoadModel<T>) -> Result<Inquiry> {
        match self.state {
            SessionState::Pending(_) => {
                return Err(CoadError::dialogue(
                    "the previous inquiry has not been answered",
                ))
            }
            SessionState::Stopped => return Ok(Inquiry::End),
            SessionState::Ready => {}
        }
        if self.turns() >= self.config.max_turns {
            self.state = SessionState::Stopped;
            return Ok(Inquiry::End);
        }
        self.check_vocab(model)?;
        let (tokens, statuses) = self.model_input();
        let (logits, _) = model.next_logits(&tokens, &statuses)?;
        let n = model.config().n_symptoms;
        let mut allowed = vec![true; logits.len()];
        for f in &self.transcript {
            allowed[f.symptom.0] = false;
        }
        allowed[n + 1] = false; // PAD
        if self.config.mode == StopMode::Fixed {
            allowed[n] = false;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in logits.iter().enumerate() {
            let v = v.as_f64();
            if allowed[i] && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        match best {
            Some((i, _)) if i < n => {
                self.state = SessionState::Pending(SymptomId(i));
                Ok(Inquiry::Ask(SymptomId(i)))
            }
            _ => {
                self.state = SessionState::Stopped;
                Ok(Inquiry::End)
            }
        }
    }

    pub fn answer(&mut self, status: SymptomStatus) -> Result<()> {
        match self.state {
            SessionState::Pending(s) => {
                self.transcript.push(Finding::new(s, status));
                self.state = SessionState::Ready;
                Ok(())
            }
            _ => Err(CoadError::dialogue("no inquiry is awaiting an answer")),
        }
    }

    /// Disease prediction from the transcript so far.
    pub fn diagnose<T: Scalar>(&self, model: &CoadModel<T>) -> Result<Diagnosis> {
        if let SessionState::Pending(_) = self.state {
            return Err(CoadError::dialogue(
                "the previous inquiry has not been answered",
            ));
        }
        self.check_vocab(model)?;
        let (tokens, statuses) = self.model_input();
        let (_, logits) = model.next_logits(&tokens, &statuses)?;
        let logits: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        let probabilities: Vec<f64> = exp.iter().map(|e| e / z).collect();
        let disease =
            DiseaseId(
                logits
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &v)| if v > logits[b] { i } else { b }),
            );
        Ok(Diagnosis {
            disease,
            probabilities,
        })
    }
}

/// Answers from a record: its implicit findings, otherwise "not sure".
#[derive(Debug, Clone, Copy)]
pub struct SimulatedPatient<'r> {
    record: &'r PatientRecord,
}

impl<'r> SimulatedPatient<'r> {
    pub fn new(record: &'r PatientRecord) -> Self {
        Self { record }
    }

    pub fn self_report(&self) -> Vec<Finding> {
        self.record.explicit.clone()
    }

    pub fn answer(&self, symptom: SymptomId) -> SymptomStatus {
        self.record
            .implicit
            .iter()
            .find(|f| f.symptom == symptom)
            .map_or(SymptomStatus::Uncertain, |f| f.status)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub inquired: Vec<Finding>,
    pub diagnosis: Diagnosis,
}

impl Episode {
    pub fn turns(&self) -> usize {
        self.inquired.len()
    }
}

impl fmt::Display for Episode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for q in &self.inquired {
            write!(f, "{}={} ", q.symptom, q.status.code())?;
        }
        write!(f, "-> {}", self.diagnosis.disease)
    }
}

pub fn run_episode<T: Scalar>(
    model: &CoadModel<T>,
    record: &PatientRecord,
    config: DialogueConfig,
) -> Result<Episode> {
    let patient = SimulatedPatient::new(record);
    let mut session = DialogueSession::new(patient.self_report(), config)?;
    while let Inquiry::Ask(s) = session.next_inquiry(model)? {
        session.answer(patient.answer(s))?;
    }
    Ok(Episode {
        inquired: session.inquired().to_vec(),
        diagnosis: session.diagnose(model)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;
    use crate::model::ModelConfig;

    fn model_with_bias(n_symptoms: usize, bias: &[f64]) -> CoadModel<f64> {
        let vocab = Vocab::numbered(n_symptoms, 3);
        let cfg = ModelConfig {
            hidden: 8,
            heads: 2,
            ff: 8,
            dropout: 0.0,
            ..ModelConfig::small(&vocab)
        };
        let mut m = CoadModel::<f64>::zeroed(cfg).unwrap();
        let at = m
            .param_names()
            .iter()
            .position(|n| n == "symptom_head.b")
            .unwrap();
        m.params_mut()[at].data_mut().copy_from_slice(bias);
        m
    }

    fn record() -> PatientRecord {
        PatientRecord {
            explicit: vec![Finding::present(0)],
            implicit: vec![Finding::present(2), Finding::absent(3)],
            disease: DiseaseId(1),
        }
    }

    #[test]
    fn asks_in_score_order_and_skips_known_symptoms() {
        // scores: s0 highest (explicit), then s3, s2, s1; END and PAD low
        let m = model_with_bias(4, &[9.0, 1.0, 2.0, 3.0, -5.0, 10.0]);
        let ep = run_episode(
            &m,
            &record(),
            DialogueConfig {
                max_turns: 2,
                mode: StopMode::Limited,
            },
        )
        .unwrap();
        assert_eq!(ep.inquired, vec![Finding::absent(3), Finding::present(2)]);
    }

    #[test]
    fn unknown_symptoms_are_answered_uncertain() {
        let m = model_with_bias(4, &[0.0, 5.0, 0.0, 0.0, -5.0, 0.0]);
        let ep = run_episode(
            &m,
            &record(),
            DialogueConfig {
                max_turns: 1,
                mode: StopMode::Limited,
            },
        )
        .unwrap();
        assert_eq!(
            ep.inquired,
            vec![Finding::new(SymptomId(1), SymptomStatus::Uncertain)]
        );
    }

    #[test]
    fn end_stops_in_limited_mode_but_not_in_fixed_mode() {
        let m = model_with_bias(4, &[0.0, 1.0, 0.0, 0.0, 5.0, 0.0]);
        let limited = run_episode(&m, &record(), DialogueConfig::default()).unwrap();
        assert_eq!(limited.turns(), 0);
        let fixed = run_episode(
            &m,
            &record(),
            DialogueConfig {
                max_turns: 2,
                mode: StopMode::Fixed,
            },
        )
        .unwrap();
        assert_eq!(fixed.turns(), 2);
    }

    #[test]
    fn exhausted_vocabulary_forces_end() {
        let m = model_with_bias(4, &[0.0; 6]);
        let ep = run_episode(
            &m,
            &record(),
            DialogueConfig {
                max_turns: 10,
                mode: StopMode::Fixed,
            },
        )
        .unwrap();
        assert_eq!(ep.turns(), 3);
    }

    #[test]
    fn ties_go_to_the_lowest_id() {
        let m = model_with_bias(4, &[0.0; 6]);
        let ep = run_episode(
            &m,
            &record(),
            DialogueConfig {
                max_turns: 1,
                mode: StopMode::Fixed,
            },
        )
        .unwrap();
        assert_eq!(ep.inquired[0].symptom, SymptomId(1));
    }

    #[test]
    fn protocol_errors() {
        let m = model_with_bias(4, &[0.0, 1.0, 0.0, 0.0, -1.0, 0.0]);
        let mut s =
            DialogueSession::new(vec![Finding::present(0)], DialogueConfig::default()).unwrap();
        assert!(s.answer(SymptomStatus::Present).is_err());
        assert_eq!(s.next_inquiry(&m).unwrap(), Inquiry::Ask(SymptomId(1)));
        assert!(s.next_inquiry(&m).is_err());
        assert!(s.diagnose(&m).is_err());
        s.answer(SymptomStatus::Absent).unwrap();
        assert_eq!(s.turns(), 1);
        assert!(DialogueSession::new(vec![], DialogueConfig::default()).is_err());
        let mut outside =
            DialogueSession::new(vec![Finding::present(9)], DialogueConfig::default()).unwrap();
        assert!(outside.next_inquiry(&m).is_err());
    }

    #[test]
    fn zero_turn_budget_ends_immediately() {
        let m = model_with_bias(4, &[0.0, 1.0, 0.0, 0.0, -1.0, 0.0]);
        let ep = run_episode(
            &m,
            &record(),
            DialogueConfig {
                max_turns: 0,
                mode: StopMode::Fixed,
            },
        )
        .unwrap();
        assert_eq!(ep.turns(), 0);
        let total: f64 = ep.diagnosis.probabilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(ep.diagnosis.top(3).len(), 3);
    }
}
