//! Decoder-only transformer with a symptom head and a disease head.
//!
//! Pre-LN blocks in the GPT-2 layout: token, status and position embeddings
//! summed, then `L` blocks of masked multi-head attention and a GELU
//! feed-forward, each wrapped in a residual, then a final layer norm shared by
//! both heads. The symptom head scores `n_symptoms + 2` classes (symptoms,
//! END, PAD); the disease head scores `n_diseases`.

use std::path::Path;

use coad_tensor::checkpoint::{load_checkpoint, save_checkpoint};
use coad_tensor::{Graph, Mask, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augmentation::ExpandedSample;
use crate::corpus::Vocab;
use crate::error::{CoadError, Result};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_symptoms: usize,
    pub n_diseases: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl ModelConfig {
    /// Two layers, width 64, two heads.
    pub fn small(vocab: &Vocab) -> Self {
        Self {
            n_symptoms: vocab.n_symptoms(),
            n_diseases: vocab.n_diseases(),
            layers: 2,
            hidden: 64,
            heads: 2,
            ff: 256,
            dropout: 0.1,
            max_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ff == 0 {
            return Err(CoadError::config(
                "layers, hidden, heads and ff must be positive",
            ));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(CoadError::config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoadError::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.n_diseases == 0 || self.max_len == 0 {
            return Err(CoadError::config("n_diseases and max_len must be positive"));
        }
        Ok(())
    }

    /// Input vocabulary: symptoms, END, PAD.
    pub fn n_input_tokens(&self) -> usize {
        self.n_symptoms + 2
    }

    pub fn pad_token(&self) -> usize {
        self.n_symptoms + 1
    }

    pub fn symptom_ignore(&self) -> usize {
        self.n_symptoms + 2
    }

    pub fn disease_ignore(&self) -> usize {
        self.n_diseases
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let (h, f) = (self.hidden, self.ff);
        let mut v = vec![
            (
                "tok_emb".to_string(),
                vec![self.n_input_tokens(), h],
                Init::Normal,
            ),
            ("status_emb".into(), vec![3, h], Init::Normal),
            ("pos_emb".into(), vec![self.max_len, h], Init::Normal),
            ("ln_emb.gamma".into(), vec![h], Init::One),
            ("ln_emb.beta".into(), vec![h], Init::Zero),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("block{l}.{s}");
            v.extend([
                (p("ln1.gamma"), vec![h], Init::One),
                (p("ln1.beta"), vec![h], Init::Zero),
                (p("attn.w_qkv"), vec![h, 3 * h], Init::Normal),
                (p("attn.b_qkv"), vec![3 * h], Init::Zero),
                (p("attn.w_out"), vec![h, h], Init::Normal),
                (p("attn.b_out"), vec![h], Init::Zero),
                (p("ln2.gamma"), vec![h], Init::One),
                (p("ln2.beta"), vec![h], Init::Zero),
                (p("ff.w_in"), vec![h, f], Init::Normal),
                (p("ff.b_in"), vec![f], Init::Zero),
                (p("ff.w_out"), vec![f, h], Init::Normal),
                (p("ff.b_out"), vec![h], Init::Zero),
            ]);
        }
        v.extend([
            ("ln_f.gamma".to_string(), vec![h], Init::One),
            ("ln_f.beta".into(), vec![h], Init::Zero),
            (
                "symptom_head.w".into(),
                vec![h, self.n_symptoms + 2],
                Init::Normal,
            ),
            (
                "symptom_head.b".into(),
                vec![self.n_symptoms + 2],
                Init::Zero,
            ),
            (
                "disease_head.w".into(),
                vec![h, self.n_diseases],
                Init::Normal,
            ),
            ("disease_head.b".into(), vec![self.n_diseases], Init::Zero),
        ]);
        v
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zero,
    One,
}

const EMBED: usize = 5;
const PER_LAYER: usize = 12;

/// A padded batch of `batch` sequences of length `len`, flattened row-major.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub batch: usize,
    pub len: usize,
    pub tokens: Vec<usize>,
    pub statuses: Vec<usize>,
    pub positions: Vec<usize>,
    /// One `len × len` visibility mask per sequence.
    pub masks: Vec<Mask>,
}

impl ModelInput {
    pub fn single(
        tokens: Vec<usize>,
        statuses: Vec<usize>,
        positions: Vec<usize>,
        mask: Mask,
    ) -> Self {
        Self {
            batch: 1,
            len: tokens.len(),
            tokens,
            statuses,
            positions,
            masks: vec![mask],
        }
    }

    /// Plain causal sequence at positions `0..len`.
    pub fn causal(tokens: Vec<usize>, statuses: Vec<usize>) -> Self {
        let n = tokens.len();
        Self::single(tokens, statuses, (0..n).collect(), Mask::causal(n))
    }

    /// The repeated input of an expanded sample with chain positions.
    pub fn repeated(sample: &ExpandedSample) -> Self {
        let (tokens, statuses) = sample
            .repeated_tokens
            .iter()
            .map(|f| (f.symptom.0, f.status.code() as usize))
            .unzip();
        Self::single(
            tokens,
            statuses,
            chain_positions(sample),
            sample.mask.as_mask().clone(),
        )
    }
}

/// Positions that make each anchor sit where its token sits in the plain
/// sequence: prefix `0..N−1`, group `g` at `N−1+g`, the final position at
/// `N−1+M`.
pub fn chain_positions(sample: &ExpandedSample) -> Vec<usize> {
    let p = sample.prefix_len();
    (0..p)
        .chain(sample.group_of.iter().map(|g| p + g))
        .collect()
}

pub struct ModelOutput {
    /// `[batch·len × (n_symptoms+2)]`
    pub symptom_logits: Var,
    /// `[batch·len × n_diseases]`
    pub disease_logits: Var,
    /// Final hidden states, `[batch·len × hidden]`.
    pub hidden: Var,
    /// One handle per parameter, in [`CoadModel::param_names`] order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoadModel<T: Scalar> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    symptoms: Vec<String>,
    diseases: Vec<String>,
}

impl<T: Scalar> CoadModel<T> {
    /// Weights from N(0, 0.02), zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let specs = config.param_specs();
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let t = match init {
                Init::Zero => Tensor::zeros(&shape),
                Init::One => Tensor::ones(&shape),
                Init::Normal => {
                    let n: usize = shape.iter().product();
                    let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::from_f64(&shape, &data)?
                }
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Every weight and bias zero, layer-norm gains one.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (names, params) = config
            .param_specs()
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::One => Tensor::ones(&shape),
                    _ => Tensor::zeros(&shape),
                };
                (name, t)
            })
            .unzip();
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> CoadModel<U> {
        CoadModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let rows = input.batch * input.len;
        if input.tokens.len() != rows
            || input.statuses.len() != rows
            || input.positions.len() != rows
            || input.masks.len() != input.batch
        {
            return Err(CoadError::validation(
                "model input arrays disagree in length",
            ));
        }
        if input.len > self.config.max_len {
            return Err(CoadError::validation(format!(
                "sequence length {} exceeds the model maximum {}",
                input.len, self.config.max_len
            )));
        }
        if let Some(&p) = input.positions.iter().find(|&&p| p >= self.config.max_len) {
            return Err(CoadError::validation(format!(
                "position {p} exceeds the model maximum {}",
                self.config.max_len
            )));
        }
        if let Some(&s) = input.statuses.iter().find(|&&s| s > 2) {
            return Err(CoadError::validation(format!(
                "status code {s} out of range"
            )));
        }
        Ok(())
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, input: &ModelInput) -> Result<ModelOutput> {
        self.check_input(input)?;
        let cfg = &self.config;
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p)).collect();
        let (b, l, h) = (input.batch, input.len, cfg.hidden);
        let dh = h / cfg.heads;
        let inv_sqrt = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

        let tok = g.gather(params[0], &input.tokens)?;
        let st = g.gather(params[1], &input.statuses)?;
        let pos = g.gather(params[2], &input.positions)?;
        let x = g.add(tok, st)?;
        let x = g.add(x, pos)?;
        let x = g.layer_norm(x, params[3], params[4], LN_EPS)?;
        let mut x = g.dropout(x, cfg.dropout)?;

        for layer in 0..cfg.layers {
            let p = &params[EMBED + layer * PER_LAYER..EMBED + (layer + 1) * PER_LAYER];
            let a = g.layer_norm(x, p[0], p[1], LN_EPS)?;
            let qkv = g.matmul(a, p[2])?;
            let qkv = g.add_bias(qkv, p[3])?;
            let mut samples = Vec::with_capacity(b);
            for s in 0..b {
                let rows = g.slice_rows(qkv, s * l, l)?;
                let mut heads = Vec::with_capacity(cfg.heads);
                for head in 0..cfg.heads {
                    let q = g.slice_cols(rows, head * dh, dh)?;
                    let k = g.slice_cols(rows, h + head * dh, dh)?;
                    let v = g.slice_cols(rows, 2 * h + head * dh, dh)?;
                    let scores = g.matmul_bt(q, k)?;
                    let scores = g.scale(scores, inv_sqrt);
                    let probs = g.masked_softmax(scores, &input.masks[s])?;
                    let probs = g.dropout(probs, cfg.dropout)?;
                    heads.push(g.matmul(probs, v)?);
                }
                samples.push(g.concat_cols(&heads)?);
            }
            let attn = g.concat_rows(&samples)?;
            let attn = g.matmul(attn, p[4])?;
            let attn = g.add_bias(attn, p[5])?;
            let attn = g.dropout(attn, cfg.dropout)?;
            x = g.add(x, attn)?;

            let f = g.layer_norm(x, p[6], p[7], LN_EPS)?;
            let f = g.matmul(f, p[8])?;
            let f = g.add_bias(f, p[9])?;
            let f = g.gelu(f);
            let f = g.matmul(f, p[10])?;
            let f = g.add_bias(f, p[11])?;
            let f = g.dropout(f, cfg.dropout)?;
            x = g.add(x, f)?;
        }

        let tail = EMBED + cfg.layers * PER_LAYER;
        let hidden = g.layer_norm(x, params[tail], params[tail + 1], LN_EPS)?;
        let s = g.matmul(hidden, params[tail + 2])?;
        let symptom_logits = g.add_bias(s, params[tail + 3])?;
        let d = g.matmul(hidden, params[tail + 4])?;
        let disease_logits = g.add_bias(d, params[tail + 5])?;
        Ok(ModelOutput {
            symptom_logits,
            disease_logits,
            hidden,
            params,
        })
    }

    /// Symptom and disease logits at the last position of a plain causal
    /// sequence, in evaluation mode.
    pub fn next_logits(&self, tokens: &[usize], statuses: &[usize]) -> Result<(Vec<T>, Vec<T>)> {
        if tokens.is_empty() {
            return Err(CoadError::validation("empty transcript"));
        }
        let input = ModelInput::causal(tokens.to_vec(), statuses.to_vec());
        let mut g = Graph::new(false, 0);
        let out = self.forward(&mut g, &input)?;
        let last = tokens.len() - 1;
        Ok((
            g.value(out.symptom_logits).row(last).to_vec(),
            g.value(out.disease_logits).row(last).to_vec(),
        ))
    }

    /// Config and vocabulary travel in the checkpoint header as JSON.
    pub fn save(&self, path: &Path, vocab: &Vocab) -> Result<()> {
        let meta = CheckpointMeta {
            model: self.config.clone(),
            symptoms: vocab.symptoms().to_vec(),
            diseases: vocab.diseases().to_vec(),
        };
        let json = serde_json::to_string(&meta).expect("metadata serializes");
        let named: Vec<(&str, &Tensor<T>)> = self
            .names
            .iter()
            .map(String::as_str)
            .zip(&self.params)
            .collect();
        save_checkpoint(path, &json, &named)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Vocab)> {
        let ckpt = load_checkpoint::<T>(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.config)
            .map_err(|e| CoadError::validation(format!("checkpoint metadata: {e}")))?;
        let vocab = Vocab::new(meta.symptoms, meta.diseases)?;
        if vocab.n_symptoms() != meta.model.n_symptoms
            || vocab.n_diseases() != meta.model.n_diseases
        {
            return Err(CoadError::validation(
                "checkpoint vocabulary disagrees with its model config",
            ));
        }
        let mut model = Self::zeroed(meta.model)?;
        if ckpt.params.len() != model.params.len() {
            return Err(CoadError::validation(format!(
                "checkpoint has {} parameters, expected {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for ((name, t), (want, slot)) in ckpt
            .params
            .into_iter()
            .zip(model.names.iter().zip(&mut model.params))
        {
            if &name != want || t.shape() != slot.shape() {
                return Err(CoadError::validation(format!(
                    "checkpoint parameter {name} {:?} does not match {want} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok((model, vocab))
    }
}
