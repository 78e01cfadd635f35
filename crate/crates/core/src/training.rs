//! Turning expanded samples into batches and fitting the model.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use coad_tensor::optim::{clip_grad_norm, Adam};
use coad_tensor::{Graph, Mask, Reduction, Scalar, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{expand_record, AugmentConfig, ExpandedSample, SymptomLabel};
use crate::corpus::{Corpus, PatientRecord, PrefixIndex};
use crate::error::{CoadError, Result};
use crate::model::{chain_positions, CoadModel, ModelConfig, ModelInput};

/// Which supervision the model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Repeated input with every symptom and disease label.
    Full,
    /// Repeated input; disease supervision only on the final position.
    NoD,
    /// Repeated input with the expanded disease labels, but each group
    /// predicts only its next symptom, at its anchor.
    NoS,
    /// Causal next-symptom prediction on the plain sequence, disease at the
    /// end.
    Plain,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Full, Self::NoD, Self::NoS, Self::Plain];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoD => "no_d",
            Self::NoS => "no_s",
            Self::Plain => "plain",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CoadError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                CoadError::config(format!("unknown variant {s:?} (full, no_d, no_s, plain)"))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub augment: AugmentConfig,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            augment: AugmentConfig::default(),
            layers: 2,
            hidden: 64,
            heads: 2,
            ff: 256,
            dropout: 0.1,
            max_len: 64,
            batch_size: 32,
            steps: 1500,
            lr: 1e-3,
            clip_norm: 1.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Narrower and shorter; for test suites on a single core.
    pub fn fast() -> Self {
        Self {
            hidden: 32,
            ff: 64,
            steps: 400,
            lr: 3e-3,
            ..Self::default()
        }
    }

    /// Learning rate and batch size used for the public and private
    /// benchmark corpora (`dxy`, `muzhi`, `muzhi2`, `ped`), on top of the
    /// desk defaults. These rates are far below what the desk model needs
    /// in a few thousand steps.
    pub fn preset(name: &str) -> Result<Self> {
        let (lr, batch_size) = match name {
            "dxy" => (5e-6, 64),
            "muzhi" => (1e-6, 64),
            "muzhi2" => (5e-6, 32),
            "ped" => (1e-6, 32),
            _ => {
                return Err(CoadError::config(format!(
                    "unknown preset {name:?} (dxy, muzhi, muzhi2, ped)"
                )))
            }
        };
        Ok(Self {
            lr,
            batch_size,
            ..Self::default()
        })
    }

    pub fn model_config(&self, corpus: &Corpus) -> ModelConfig {
        ModelConfig {
            n_symptoms: corpus.vocab.n_symptoms(),
            n_diseases: corpus.vocab.n_diseases(),
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ff: self.ff,
            dropout: self.dropout,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(CoadError::config("batch_size and steps must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoadError::config("lr must be positive"));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(CoadError::config(
                "clip_norm must be nonnegative (0 disables clipping)",
            ));
        }
        Ok(())
    }
}

/// One training sequence with per-position targets over its whole input.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub tokens: Vec<usize>,
    pub statuses: Vec<usize>,
    pub positions: Vec<usize>,
    pub mask: Mask,
    pub s_targets: Vec<usize>,
    pub d_targets: Vec<usize>,
    pub s_weights: Vec<f64>,
    pub d_weights: Vec<f64>,
}

impl TrainSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn plain_sample(record: &PatientRecord, n_symptoms: usize, n_diseases: usize) -> TrainSample {
    let seq: Vec<_> = record.sequence().copied().collect();
    let len = seq.len();
    let n = record.n_explicit();
    let s_ignore = n_symptoms + 2;
    let mut s_targets = vec![s_ignore; len];
    let mut d_targets = vec![n_diseases; len];
    for i in n - 1..len - 1 {
        s_targets[i] = seq[i + 1].symptom.0;
    }
    s_targets[len - 1] = n_symptoms;
    d_targets[len - 1] = record.disease.0;
    TrainSample {
        tokens: seq.iter().map(|f| f.symptom.0).collect(),
        statuses: seq.iter().map(|f| f.status.code() as usize).collect(),
        positions: (0..len).collect(),
        mask: Mask::causal(len),
        s_targets,
        d_targets,
        s_weights: vec![1.0; len],
        d_weights: vec![1.0; len],
    }
}

fn repeated_sample(
    sample: &ExpandedSample,
    variant: Variant,
    n_symptoms: usize,
    n_diseases: usize,
) -> TrainSample {
    let p = sample.prefix_len();
    let len = sample.input_len();
    let m = sample.n_implicit;
    let s_ignore = n_symptoms + 2;
    let mut s_targets = vec![s_ignore; len];
    let mut d_targets = vec![n_diseases; len];
    let mut s_weights = vec![0.0; len];
    let mut d_weights = vec![0.0; len];
    for r in 0..sample.region_len() {
        let i = p + r;
        s_targets[i] = sample.s_labels[r].class(n_symptoms);
        d_targets[i] = sample.d_labels[r].class(n_diseases);
        s_weights[i] = sample.weights[r];
        d_weights[i] = sample.weights[r];
    }
    match variant {
        Variant::Full | Variant::Plain => {}
        Variant::NoD => {
            for r in 0..sample.region_len() - 1 {
                d_targets[p + r] = n_diseases;
            }
        }
        Variant::NoS => {
            for r in 0..sample.region_len() - 1 {
                s_targets[p + r] = s_ignore;
                s_weights[p + r] = 0.0;
            }
            for (g, &a) in sample.anchors[..m].iter().enumerate() {
                // The first position of group g carries its next symptom.
                let next = sample.s_labels[a + 1 - (m - g)];
                debug_assert!(matches!(next, SymptomLabel::Symptom(_)));
                s_targets[p + a] = next.class(n_symptoms);
                s_weights[p + a] = 1.0;
            }
            s_weights[len - 1] = 1.0;
        }
    }
    TrainSample {
        tokens: sample.repeated_tokens.iter().map(|f| f.symptom.0).collect(),
        statuses: sample
            .repeated_tokens
            .iter()
            .map(|f| f.status.code() as usize)
            .collect(),
        positions: chain_positions(sample),
        mask: sample.mask.as_mask().clone(),
        s_targets,
        d_targets,
        s_weights,
        d_weights,
    }
}

/// Training sequences for every record of `corpus.train`.
pub fn build_samples(
    corpus: &Corpus,
    variant: Variant,
    augment: AugmentConfig,
) -> Vec<TrainSample> {
    let (ns, nd) = (corpus.vocab.n_symptoms(), corpus.vocab.n_diseases());
    if variant == Variant::Plain {
        return corpus
            .train
            .iter()
            .map(|r| plain_sample(r, ns, nd))
            .collect();
    }
    let index = PrefixIndex::build(&corpus.train);
    corpus
        .train
        .iter()
        .map(|r| repeated_sample(&expand_record(r, &index, augment), variant, ns, nd))
        .collect()
}

/// Padded batch. Weights are pre-normalised so that summing `w·nll` gives
/// the mean over samples of each sample's weighted-mean loss.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: ModelInput,
    pub s_targets: Vec<usize>,
    pub d_targets: Vec<usize>,
    pub s_weights: Vec<f64>,
    pub d_weights: Vec<f64>,
}

pub fn collate(samples: &[&TrainSample], model: &ModelConfig) -> Batch {
    let b = samples.len();
    let len = samples.iter().map(|s| s.len()).max().unwrap_or(0);
    let rows = b * len;
    let (s_ignore, d_ignore) = (model.symptom_ignore(), model.disease_ignore());
    let mut batch = Batch {
        input: ModelInput {
            batch: b,
            len,
            tokens: vec![model.pad_token(); rows],
            statuses: vec![0; rows],
            positions: vec![0; rows],
            masks: Vec::with_capacity(b),
        },
        s_targets: vec![s_ignore; rows],
        d_targets: vec![d_ignore; rows],
        s_weights: vec![0.0; rows],
        d_weights: vec![0.0; rows],
    };
    let normalise = |targets: &[usize], weights: &[f64], ignore: usize| -> Vec<f64> {
        let z: f64 = targets
            .iter()
            .zip(weights)
            .filter(|(t, _)| **t != ignore)
            .map(|(_, w)| w)
            .sum();
        weights
            .iter()
            .zip(targets)
            .map(|(w, t)| {
                if *t == ignore || z == 0.0 {
                    0.0
                } else {
                    w / z / b as f64
                }
            })
            .collect()
    };
    for (k, s) in samples.iter().enumerate() {
        let at = k * len;
        let n = s.len();
        batch.input.tokens[at..at + n].copy_from_slice(&s.tokens);
        batch.input.statuses[at..at + n].copy_from_slice(&s.statuses);
        batch.input.positions[at..at + n].copy_from_slice(&s.positions);
        batch.s_targets[at..at + n].copy_from_slice(&s.s_targets);
        batch.d_targets[at..at + n].copy_from_slice(&s.d_targets);
        batch.s_weights[at..at + n].copy_from_slice(&normalise(
            &s.s_targets,
            &s.s_weights,
            s_ignore,
        ));
        batch.d_weights[at..at + n].copy_from_slice(&normalise(
            &s.d_targets,
            &s.d_weights,
            d_ignore,
        ));
        // Padding keys are invisible; a padding query sees only itself.
        batch.input.masks.push(Mask::from_fn(len, len, |q, key| {
            if q < n {
                key < n && s.mask.get(q, key)
            } else {
                q == key
            }
        }));
    }
    batch
}

pub struct LossVars {
    pub total: Var,
    pub symptom: Var,
    pub disease: Var,
    pub params: Vec<Var>,
}

pub fn loss<'a, T: Scalar>(
    model: &'a CoadModel<T>,
    g: &mut Graph<'a, T>,
    batch: &Batch,
) -> Result<LossVars> {
    let cfg = model.config();
    let out = model.forward(g, &batch.input)?;
    let cast = |w: &[f64]| w.iter().map(|&v| T::from_f64_lossy(v)).collect::<Vec<T>>();
    let symptom = g.cross_entropy(
        out.symptom_logits,
        &batch.s_targets,
        cfg.symptom_ignore(),
        &cast(&batch.s_weights),
        Reduction::WeightedSum,
    )?;
    let disease = g.cross_entropy(
        out.disease_logits,
        &batch.d_targets,
        cfg.disease_ignore(),
        &cast(&batch.d_weights),
        Reduction::WeightedSum,
    )?;
    let total = g.add(symptom, disease)?;
    Ok(LossVars {
        total,
        symptom,
        disease,
        params: out.params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss_total: f64,
    pub loss_sym: f64,
    pub loss_dis: f64,
    pub lr: f64,
    pub seed: u64,
}

pub struct TrainOutcome<T: Scalar = f32> {
    pub model: CoadModel<T>,
    pub log: Vec<LogEntry>,
}

const BUCKET_BATCHES: usize = 8;

/// One pass over the samples: shuffle, sort runs of a few batches by length
/// to cut padding, then shuffle the batches.
fn epoch_batches(lens: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(lens.len().div_ceil(batch_size));
    for run in order.chunks_mut(batch_size * BUCKET_BATCHES) {
        run.sort_by_key(|&i| lens[i]);
        batches.extend(run.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Fits a fresh 32-bit model on `corpus.train`. When `log_sink` is given
/// every step is written to it as one JSON line.
pub fn train(
    corpus: &Corpus,
    cfg: &TrainConfig,
    log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    train_as::<f32>(corpus, cfg, log_sink)
}

/// [`train`] at any precision.
pub fn train_as<T: Scalar>(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(CoadError::validation("the training split is empty"));
    }
    let model_cfg = cfg.model_config(corpus);
    let mut model = CoadModel::<T>::new(model_cfg.clone(), cfg.seed)?;
    let samples = build_samples(corpus, cfg.variant, cfg.augment);
    if let Some(s) = samples.iter().find(|s| s.len() > model_cfg.max_len) {
        return Err(CoadError::config(format!(
            "a training sequence has length {} but max_len is {}",
            s.len(),
            model_cfg.max_len
        )));
    }
    let lens: Vec<usize> = samples.iter().map(TrainSample::len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_da7a);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut adam = Adam::<T>::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if queue.is_empty() {
            queue = epoch_batches(&lens, cfg.batch_size, &mut rng);
            queue.reverse();
        }
        let ids = queue.pop().expect("an epoch has at least one batch");
        let picked: Vec<&TrainSample> = ids.iter().map(|&i| &samples[i]).collect();
        let batch = collate(&picked, &model_cfg);
        let lr = cfg.lr;
        let (entry, mut grads) = {
            let mut g = Graph::new(
                true,
                cfg.seed.wrapping_mul(1_000_003).wrapping_add(step as u64),
            );
            let lv = loss(&model, &mut g, &batch)?;
            let entry = LogEntry {
                step,
                loss_total: g.value(lv.total).item().as_f64(),
                loss_sym: g.value(lv.symptom).item().as_f64(),
                loss_dis: g.value(lv.disease).item().as_f64(),
                lr,
                seed: cfg.seed,
            };
            if !entry.loss_total.is_finite() {
                return Err(CoadError::Diverged {
                    step,
                    loss: entry.loss_total,
                });
            }
            let mut grads = g.backward(lv.total)?;
            let flat: Vec<Vec<T>> = lv
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![T::zero(); p.len()]))
                .collect();
            (entry, flat)
        };
        if cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, cfg.clip_norm);
        }
        adam.step(model.params_mut(), &grads)?;
        if let Some(w) = log_sink.as_mut() {
            writeln!(
                w,
                "{}",
                serde_json::to_string(&entry).expect("log entry serializes")
            )?;
        }
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}
