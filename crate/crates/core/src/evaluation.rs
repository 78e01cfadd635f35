//! Diagnostic accuracy, symptom recall and their harmonic mean, per model
//! and across training seeds.

use std::fmt;
use std::fmt::Write as _;

use coad_tensor::Scalar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PatientRecord, SymptomStatus};
use crate::dialogue::{run_episode, DialogueConfig, Episode, StopMode};
use crate::error::{CoadError, Result};
use crate::model::CoadModel;
use crate::training::{train, TrainConfig, Variant};

/// Which implicit symptoms count toward recall.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    #[default]
    AllImplicit,
    PositiveOnly,
}

/// `2·ac·rc / (ac + rc)`, zero when both are zero.
pub fn combined_score(accuracy: f64, recall: f64) -> f64 {
    if accuracy + recall == 0.0 {
        0.0
    } else {
        2.0 * accuracy * recall / (accuracy + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub correct: bool,
    pub recall: f64,
    pub turns: usize,
}

/// Share of the record's implicit symptoms that were inquired. A record with
/// nothing to find scores 1.
pub fn episode_metrics(
    record: &PatientRecord,
    episode: &Episode,
    mode: RecallMode,
) -> EpisodeMetrics {
    let targets: Vec<_> = record
        .implicit
        .iter()
        .filter(|f| mode == RecallMode::AllImplicit || f.status == SymptomStatus::Present)
        .map(|f| f.symptom)
        .collect();
    let recall = if targets.is_empty() {
        1.0
    } else {
        let hit = targets
            .iter()
            .filter(|s| episode.inquired.iter().any(|q| q.symptom == **s))
            .count();
        hit as f64 / targets.len() as f64
    };
    EpisodeMetrics {
        correct: episode.diagnosis.disease == record.disease,
        recall,
        turns: episode.turns(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub recall: f64,
    pub combined: f64,
    pub avg_turns: f64,
    pub min_turns: usize,
    pub max_turns: usize,
    pub episodes: usize,
}

impl MetricsReport {
    pub fn from_episodes(metrics: &[EpisodeMetrics]) -> Self {
        let n = metrics.len().max(1) as f64;
        let accuracy = metrics.iter().filter(|m| m.correct).count() as f64 / n;
        let recall = metrics.iter().map(|m| m.recall).sum::<f64>() / n;
        Self {
            accuracy,
            recall,
            combined: combined_score(accuracy, recall),
            avg_turns: metrics.iter().map(|m| m.turns as f64).sum::<f64>() / n,
            min_turns: metrics.iter().map(|m| m.turns).min().unwrap_or(0),
            max_turns: metrics.iter().map(|m| m.turns).max().unwrap_or(0),
            episodes: metrics.len(),
        }
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Ac {:.4}  Rc {:.4}  Cs {:.4}  T {:.2}  (n = {})",
            self.accuracy, self.recall, self.combined, self.avg_turns, self.episodes
        )
    }
}

/// Checks the episode against its record: no symptom inquired twice, none
/// of the explicit symptoms inquired, and the turn budget respected.
pub fn protocol_violation(
    record: &PatientRecord,
    episode: &Episode,
    dialogue: DialogueConfig,
) -> Option<String> {
    let asked: Vec<_> = episode.inquired.iter().map(|f| f.symptom).collect();
    for (i, s) in asked.iter().enumerate() {
        if asked[..i].contains(s) {
            return Some(format!("symptom {s} inquired twice"));
        }
        if record.explicit.iter().any(|f| f.symptom == *s) {
            return Some(format!("explicit symptom {s} inquired"));
        }
    }
    let t = episode.turns();
    match dialogue.mode {
        StopMode::Limited if t > dialogue.max_turns => {
            Some(format!("{t} turns exceed the limit {}", dialogue.max_turns))
        }
        StopMode::Fixed if t != dialogue.max_turns => {
            Some(format!("{t} turns instead of {}", dialogue.max_turns))
        }
        _ => None,
    }
}

/// Runs one episode per record. Fails if any episode breaks the protocol
/// (see [`protocol_violation`]), except a fixed-mode episode cut short
/// because every symptom has been covered.
pub fn evaluate<T: Scalar>(
    model: &CoadModel<T>,
    records: &[PatientRecord],
    dialogue: DialogueConfig,
    mode: RecallMode,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(CoadError::validation(
            "nothing to evaluate: the test split is empty",
        ));
    }
    let n_symptoms = model.config().n_symptoms;
    let mut metrics = Vec::with_capacity(records.len());
    for r in records {
        let e = run_episode(model, r, dialogue)?;
        if let Some(v) = protocol_violation(r, &e, dialogue) {
            let exhausted = r.n_explicit() + e.turns() == n_symptoms;
            if !(dialogue.mode == StopMode::Fixed && exhausted) {
                return Err(CoadError::dialogue(format!("protocol violated: {v}")));
            }
            log::warn!("vocabulary exhausted after {} turns", e.turns());
        }
        metrics.push(episode_metrics(r, &e, mode));
    }
    Ok(MetricsReport::from_episodes(&metrics))
}

/// One stopping mode evaluated at several turn budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub mode: StopMode,
    pub budgets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub protocols: Vec<Protocol>,
    pub recall: RecallMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub final_loss: f64,
    pub metrics: MetricsReport,
}

/// One variant under one protocol budget, summarised over seeds. `combined`
/// is the harmonic mean of the seed-averaged accuracy and recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub mode: StopMode,
    #[serde(rename = "T_max")]
    pub max_turns: usize,
    #[serde(rename = "Ac")]
    pub accuracy: f64,
    #[serde(rename = "Ac_std")]
    pub accuracy_std: f64,
    #[serde(rename = "Rc")]
    pub recall: f64,
    #[serde(rename = "Rc_std")]
    pub recall_std: f64,
    #[serde(rename = "Cs")]
    pub combined: f64,
    #[serde(rename = "T")]
    pub avg_turns: f64,
    pub per_seed: Vec<SeedMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub cells: Vec<Cell>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn mode_name(mode: StopMode) -> &'static str {
    match mode {
        StopMode::Limited => "limited",
        StopMode::Fixed => "fixed",
    }
}

impl ExperimentReport {
    pub fn cell(&self, variant: Variant, mode: StopMode, max_turns: usize) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.mode == mode && c.max_turns == max_turns)
    }

    /// One block per (mode, budget); rows are variants.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let mut blocks: Vec<(StopMode, usize)> = Vec::new();
        for c in &self.cells {
            if !blocks.contains(&(c.mode, c.max_turns)) {
                blocks.push((c.mode, c.max_turns));
            }
        }
        for (i, &(mode, budget)) in blocks.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "{} turns = {budget}", mode_name(mode));
            let _ = writeln!(
                out,
                "{:<8} {:>16} {:>16} {:>8} {:>7}",
                "variant", "Ac", "Rc", "Cs", "T"
            );
            for c in self
                .cells
                .iter()
                .filter(|c| c.mode == mode && c.max_turns == budget)
            {
                let _ = writeln!(
                    out,
                    "{:<8} {:>8.4} ± {:<5.3} {:>8.4} ± {:<5.3} {:>8.4} {:>7.2}",
                    c.variant.name(),
                    c.accuracy,
                    c.accuracy_std,
                    c.recall,
                    c.recall_std,
                    c.combined,
                    c.avg_turns
                );
            }
        }
        out
    }
}

struct Run {
    variant: Variant,
    seed: u64,
    final_loss: f64,
    /// Parallel to the flattened (protocol, budget) list.
    metrics: Vec<MetricsReport>,
}

/// Trains every (variant, seed) pair in parallel and evaluates each model
/// under every protocol budget.
pub fn run_experiment(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(CoadError::config(
            "an experiment needs at least one variant and one seed",
        ));
    }
    let settings: Vec<DialogueConfig> = cfg
        .protocols
        .iter()
        .flat_map(|p| {
            p.budgets.iter().map(move |&max_turns| DialogueConfig {
                max_turns,
                mode: p.mode,
            })
        })
        .collect();
    if settings.is_empty() {
        return Err(CoadError::config(
            "an experiment needs at least one turn budget",
        ));
    }
    let jobs: Vec<(Variant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let tc = TrainConfig {
                variant,
                seed,
                ..cfg.train.clone()
            };
            let outcome = train(corpus, &tc, None)?;
            let metrics = settings
                .iter()
                .map(|&d| evaluate(&outcome.model, &corpus.test, d, cfg.recall))
                .collect::<Result<Vec<_>>>()?;
            log::info!("trained {variant} seed {seed}");
            Ok(Run {
                variant,
                seed,
                final_loss: outcome.log.last().map_or(f64::NAN, |e| e.loss_total),
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for (k, setting) in settings.iter().enumerate() {
        for &variant in &cfg.variants {
            let per_seed: Vec<SeedMetrics> = runs
                .iter()
                .filter(|r| r.variant == variant)
                .map(|r| SeedMetrics {
                    seed: r.seed,
                    final_loss: r.final_loss,
                    metrics: r.metrics[k],
                })
                .collect();
            let acc: Vec<f64> = per_seed.iter().map(|s| s.metrics.accuracy).collect();
            let rec: Vec<f64> = per_seed.iter().map(|s| s.metrics.recall).collect();
            let turns: Vec<f64> = per_seed.iter().map(|s| s.metrics.avg_turns).collect();
            let (accuracy, accuracy_std) = mean_std(&acc);
            let (recall, recall_std) = mean_std(&rec);
            cells.push(Cell {
                variant,
                mode: setting.mode,
                max_turns: setting.max_turns,
                accuracy,
                accuracy_std,
                recall,
                recall_std,
                combined: combined_score(accuracy, recall),
                avg_turns: mean_std(&turns).0,
                per_seed,
            });
        }
    }
    Ok(ExperimentReport {
        config: cfg.clone(),
        cells,
    })
}
