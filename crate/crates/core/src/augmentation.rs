//! Expansion of one patient record into its collaborative-generation
//! training view.
//!
//! A record `E¹..Eᴺ, I¹..Iᴹ` becomes an input of length `(N−1) + M′` with
//! `M′ = M(M+1)/2 + 1`: the explicit prefix `E¹..Eᴺ⁻¹`, then the repeated
//! region. Group `g` (0-based, `g < M`) holds `M−g` copies of `Eᴺ` (for
//! `g = 0`) or `Iᵍ`, and carries the symptom labels `Iᵍ⁺¹..Iᴹ`, one per copy.
//! A final position holds `Iᴹ` and carries END. The last copy of each group
//! (its anchor) plus the final position reproduce the plain causal chain;
//! every other copy is a probe that nothing else attends to.
//!
//! Region positions are 0-based throughout; the 1-based anchor formula
//! `A_K = (K+1)(2M−K)/2` is exposed as [`anchor_formula`].

use std::fmt::Write as _;

use coad_tensor::Mask;
use serde::{Deserialize, Serialize};

use crate::corpus::{DiseaseId, Finding, PatientRecord, PrefixIndex, SymptomId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymptomLabel {
    Symptom(SymptomId),
    End,
    Ignore,
}

impl SymptomLabel {
    /// Class index on the symptom head, or the vocab's IGNORE token.
    pub fn class(self, vocab_symptoms: usize) -> usize {
        match self {
            Self::Symptom(s) => s.0,
            Self::End => vocab_symptoms,
            Self::Ignore => vocab_symptoms + 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiseaseLabel {
    Disease(DiseaseId),
    Ignore,
}

impl DiseaseLabel {
    pub fn class(self, n_diseases: usize) -> usize {
        match self {
            Self::Disease(d) => d.0,
            Self::Ignore => n_diseases,
        }
    }
}

/// Symptom label on the final position.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalLabel {
    #[default]
    End,
    Ignore,
}

/// Per-position loss weights of the repeated region.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFormula {
    /// `1/(M−g)` for every position of group `g`; 1 on the final position.
    #[default]
    GroupReciprocal,
    /// `1/(M−T+1)` where `T` is the (1-based) target implicit symptom.
    TargetReciprocal,
    /// `1/(M−g−1)` for group `g`, clamped to 1 where the denominator is not
    /// positive.
    ShiftedGroupReciprocal,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub final_label: FinalLabel,
    pub weights: WeightFormula,
}

/// Query/key visibility over the full repeated input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask(pub Mask);

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn visible(&self, query: usize, key: usize) -> bool {
        self.0.get(query, key)
    }

    pub fn as_mask(&self) -> &Mask {
        &self.0
    }
}

/// `M′ = M(M+1)/2 + 1`
pub fn repeated_len(m: usize) -> usize {
    m * (m + 1) / 2 + 1
}

/// 1-based region position of the anchor of group `k`: `(k+1)(2m−k)/2`.
pub fn anchor_formula(m: usize, k: usize) -> usize {
    (k + 1) * (2 * m - k) / 2
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepeatedInput {
    /// Explicit prefix followed by the repeated region.
    pub tokens: Vec<Finding>,
    /// Group of each region position; the final position is group `M`.
    pub group_of: Vec<usize>,
    /// 0-based region positions of the group anchors, then the final position.
    pub anchors: Vec<usize>,
}

pub fn build_repeated_input(record: &PatientRecord) -> RepeatedInput {
    let n = record.n_explicit();
    let m = record.n_implicit();
    let mut tokens: Vec<Finding> = record.explicit[..n - 1].to_vec();
    let mut group_of = Vec::with_capacity(repeated_len(m));
    let mut anchors = Vec::with_capacity(m + 1);
    for g in 0..m {
        let tok = if g == 0 {
            record.explicit[n - 1]
        } else {
            record.implicit[g - 1]
        };
        for _ in 0..m - g {
            tokens.push(tok);
            group_of.push(g);
        }
        anchors.push(group_of.len() - 1);
    }
    let last = record
        .implicit
        .last()
        .copied()
        .unwrap_or(record.explicit[n - 1]);
    tokens.push(last);
    group_of.push(m);
    anchors.push(group_of.len() - 1);
    RepeatedInput {
        tokens,
        group_of,
        anchors,
    }
}

/// Visibility over `(n−1) + M′` positions: causal within the explicit
/// prefix; each region position sees the prefix, itself and every anchor
/// before it.
pub fn build_attention_mask(n: usize, m: usize) -> AttentionMask {
    assert!(n >= 1, "a record has at least one explicit symptom");
    let p = n - 1;
    let len = p + repeated_len(m);
    let mut is_anchor = vec![false; len];
    for k in 0..m {
        is_anchor[p + anchor_formula(m, k) - 1] = true;
    }
    AttentionMask(Mask::from_fn(len, len, |q, k| {
        if q < p {
            k <= q
        } else {
            k < p || k == q || (k < q && is_anchor[k])
        }
    }))
}

/// One disease label per implicit symptom: `d*` where the prefix through
/// that symptom is not the complete sample of another training record.
pub fn align_d_labels(record: &PatientRecord, index: &PrefixIndex) -> Vec<DiseaseLabel> {
    let mut prefix: Vec<Finding> = record.explicit.clone();
    record
        .implicit
        .iter()
        .map(|f| {
            prefix.push(*f);
            if index.collides_with_other(&prefix, record) {
                DiseaseLabel::Ignore
            } else {
                DiseaseLabel::Disease(record.disease)
            }
        })
        .collect()
}

pub fn expand_s_labels(record: &PatientRecord, final_label: FinalLabel) -> Vec<SymptomLabel> {
    let m = record.n_implicit();
    let mut out = Vec::with_capacity(repeated_len(m));
    for g in 0..m {
        out.extend(
            record.implicit[g..]
                .iter()
                .map(|f| SymptomLabel::Symptom(f.symptom)),
        );
    }
    out.push(match final_label {
        FinalLabel::End => SymptomLabel::End,
        FinalLabel::Ignore => SymptomLabel::Ignore,
    });
    out
}

/// The probe of group `g` targeting `Iᵗ` gets `d*` iff `{E, I¹..Iᵍ, Iᵗ}`
/// passes the availability check; the final position always gets `d*`.
pub fn expand_d_labels(
    record: &PatientRecord,
    aligned: &[DiseaseLabel],
    index: &PrefixIndex,
) -> Vec<DiseaseLabel> {
    let m = record.n_implicit();
    let gold = DiseaseLabel::Disease(record.disease);
    let mut out = Vec::with_capacity(repeated_len(m));
    let mut context: Vec<Finding> = record.explicit.clone();
    for (g, &first) in aligned.iter().enumerate().take(m) {
        if g > 0 {
            context.push(record.implicit[g - 1]);
        }
        // The first target of group g is the next symptom.
        out.push(first);
        for t in g + 1..m {
            context.push(record.implicit[t]);
            let label = if index.collides_with_other(&context, record) {
                DiseaseLabel::Ignore
            } else {
                gold
            };
            context.pop();
            out.push(label);
        }
    }
    out.push(gold);
    out
}

pub fn compute_loss_weights(m: usize, formula: WeightFormula) -> Vec<f64> {
    let mut out = Vec::with_capacity(repeated_len(m));
    for g in 0..m {
        for t in g..m {
            // t is the 0-based index of the target implicit symptom
            let w = match formula {
                WeightFormula::GroupReciprocal => 1.0 / (m - g) as f64,
                WeightFormula::TargetReciprocal => 1.0 / (m - t) as f64,
                WeightFormula::ShiftedGroupReciprocal => {
                    let denom = m as i64 - g as i64 - 1;
                    if denom >= 1 {
                        1.0 / denom as f64
                    } else {
                        1.0
                    }
                }
            };
            out.push(w);
        }
    }
    out.push(1.0);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedSample {
    pub disease: DiseaseId,
    pub n_explicit: usize,
    pub n_implicit: usize,
    /// `E¹..Eᴺ, I¹..Iᴹ`
    pub plain_tokens: Vec<Finding>,
    /// Explicit prefix `E¹..Eᴺ⁻¹` followed by the repeated region.
    pub repeated_tokens: Vec<Finding>,
    pub group_of: Vec<usize>,
    pub anchors: Vec<usize>,
    pub s_labels: Vec<SymptomLabel>,
    pub d_labels: Vec<DiseaseLabel>,
    pub weights: Vec<f64>,
    pub mask: AttentionMask,
}

impl ExpandedSample {
    pub fn prefix_len(&self) -> usize {
        self.n_explicit - 1
    }

    pub fn region_len(&self) -> usize {
        self.group_of.len()
    }

    pub fn input_len(&self) -> usize {
        self.repeated_tokens.len()
    }

    /// Aligned text columns plus a mask bitmap.
    pub fn render(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "N={} M={} M'={} disease={}",
            self.n_explicit,
            self.n_implicit,
            self.region_len(),
            vocab.disease_name(self.disease)
        );
        let p = self.prefix_len();
        let s_name = |l: SymptomLabel| match l {
            SymptomLabel::Symptom(s) => vocab.symptom_name(s).to_string(),
            SymptomLabel::End => crate::corpus::END_NAME.to_string(),
            SymptomLabel::Ignore => crate::corpus::IGNORE_NAME.to_string(),
        };
        let d_name = |l: DiseaseLabel| match l {
            DiseaseLabel::Disease(d) => vocab.disease_name(d).to_string(),
            DiseaseLabel::Ignore => crate::corpus::IGNORE_NAME.to_string(),
        };
        let mut rows: Vec<[String; 7]> = vec![[
            "pos".into(),
            "token".into(),
            "status".into(),
            "group".into(),
            "s-label".into(),
            "d-label".into(),
            "weight".into(),
        ]];
        for (i, tok) in self.repeated_tokens.iter().enumerate() {
            let base = [
                (i + 1).to_string(),
                vocab.symptom_name(tok.symptom).to_string(),
                tok.status.code().to_string(),
            ];
            let rest = if i < p {
                ["-".into(), "-".into(), "-".into(), "-".into()]
            } else {
                let r = i - p;
                let anchor = if self.anchors.contains(&r) { "*" } else { "" };
                [
                    format!("{}{anchor}", self.group_of[r]),
                    s_name(self.s_labels[r]),
                    d_name(self.d_labels[r]),
                    format!("{:.4}", self.weights[r]),
                ]
            };
            let [a, b, c] = base;
            let [d, e, f, g] = rest;
            rows.push([a, b, c, d, e, f, g]);
        }
        let mut widths = [0usize; 7];
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        let _ = writeln!(out, "mask:");
        let len = self.input_len();
        for q in 0..len {
            let bits: String = (0..len)
                .map(|k| if self.mask.visible(q, k) { '1' } else { '.' })
                .collect();
            let _ = writeln!(out, "{:>4} {bits}", q + 1);
        }
        out
    }
}

pub fn expand_record(
    record: &PatientRecord,
    index: &PrefixIndex,
    cfg: AugmentConfig,
) -> ExpandedSample {
    let m = record.n_implicit();
    let repeated = build_repeated_input(record);
    let aligned = align_d_labels(record, index);
    ExpandedSample {
        disease: record.disease,
        n_explicit: record.n_explicit(),
        n_implicit: m,
        plain_tokens: record.sequence().copied().collect(),
        repeated_tokens: repeated.tokens,
        group_of: repeated.group_of,
        anchors: repeated.anchors,
        s_labels: expand_s_labels(record, cfg.final_label),
        d_labels: expand_d_labels(record, &aligned, index),
        weights: compute_loss_weights(m, cfg.weights),
        mask: build_attention_mask(record.n_explicit(), m),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Finding, SymptomStatus};
    use proptest::prelude::*;

    fn rec(explicit: &[usize], implicit: &[usize], d: usize) -> PatientRecord {
        PatientRecord {
            explicit: explicit.iter().map(|&s| Finding::present(s)).collect(),
            implicit: implicit.iter().map(|&s| Finding::present(s)).collect(),
            disease: DiseaseId(d),
        }
    }

    fn ids(labels: &[SymptomLabel]) -> Vec<Option<usize>> {
        labels
            .iter()
            .map(|l| match l {
                SymptomLabel::Symptom(s) => Some(s.0),
                _ => None,
            })
            .collect()
    }

    // Sneezing=0, Allergy=1, Rash=2, Dyspnea=3
    fn allergy_rash() -> PatientRecord {
        rec(&[0], &[1, 2, 3], 0)
    }

    #[test]
    fn allergy_rash_layout() {
        let r = allergy_rash();
        let idx = PrefixIndex::build(std::slice::from_ref(&r));
        let s = expand_record(&r, &idx, AugmentConfig::default());
        let toks: Vec<usize> = s.repeated_tokens.iter().map(|f| f.symptom.0).collect();
        assert_eq!(toks, vec![0, 0, 0, 1, 1, 2, 3]);
        assert_eq!(
            ids(&s.s_labels),
            vec![Some(1), Some(2), Some(3), Some(2), Some(3), Some(3), None]
        );
        assert_eq!(s.s_labels[6], SymptomLabel::End);
        assert!(s
            .d_labels
            .iter()
            .all(|d| *d == DiseaseLabel::Disease(DiseaseId(0))));
        assert_eq!(s.anchors, vec![2, 4, 5, 6]);
    }

    #[test]
    fn s_labels_small_cases() {
        assert_eq!(
            expand_s_labels(&rec(&[0], &[5], 0), FinalLabel::End),
            vec![SymptomLabel::Symptom(SymptomId(5)), SymptomLabel::End]
        );
        assert_eq!(
            expand_s_labels(&rec(&[0], &[], 0), FinalLabel::End),
            vec![SymptomLabel::End]
        );
        let four = expand_s_labels(&rec(&[0], &[1, 2, 3, 4], 0), FinalLabel::Ignore);
        assert_eq!(four.len(), 11);
        assert_eq!(four[10], SymptomLabel::Ignore);
    }

    #[test]
    fn align_without_implicit_is_empty() {
        let r = rec(&[0], &[], 0);
        let idx = PrefixIndex::build(std::slice::from_ref(&r));
        assert!(align_d_labels(&r, &idx).is_empty());
        assert_eq!(
            expand_d_labels(&r, &[], &idx),
            vec![DiseaseLabel::Disease(DiseaseId(0))]
        );
    }

    #[test]
    fn align_marks_colliding_prefix() {
        let a = rec(&[0], &[1, 2, 3], 0);
        let b = rec(&[1], &[0], 1);
        let idx = PrefixIndex::build(&[a.clone(), b]);
        let d = DiseaseLabel::Disease(DiseaseId(0));
        assert_eq!(align_d_labels(&a, &idx), vec![DiseaseLabel::Ignore, d, d]);
    }

    #[test]
    fn expand_d_marks_single_reordered_collision() {
        // {E, I²} is the complete sample of another record: only the group-0
        // probe targeting I² is unavailable.
        let a = rec(&[0], &[1, 2, 3], 0);
        let b = rec(&[0], &[2], 1);
        let idx = PrefixIndex::build(&[a.clone(), b]);
        let aligned = align_d_labels(&a, &idx);
        let labels = expand_d_labels(&a, &aligned, &idx);
        let ignored: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == DiseaseLabel::Ignore)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(ignored, vec![1]);
    }

    #[test]
    fn zero_implicit_record() {
        let r = rec(&[4, 7], &[], 2);
        let idx = PrefixIndex::build(std::slice::from_ref(&r));
        let s = expand_record(&r, &idx, AugmentConfig::default());
        assert_eq!(s.region_len(), 1);
        assert_eq!(s.repeated_tokens.len(), 2);
        assert_eq!(s.repeated_tokens[1].symptom, SymptomId(7));
        assert_eq!(s.s_labels, vec![SymptomLabel::End]);
        assert_eq!(s.d_labels, vec![DiseaseLabel::Disease(DiseaseId(2))]);
        assert_eq!(s.mask.as_mask(), &Mask::causal(2));
    }

    #[test]
    fn weights_for_three_implicit() {
        let w = compute_loss_weights(3, WeightFormula::GroupReciprocal);
        let t = 1.0 / 3.0;
        let expected = [t, t, t, 0.5, 0.5, 1.0, 1.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(
            compute_loss_weights(1, WeightFormula::GroupReciprocal),
            vec![1.0, 1.0]
        );
        let target = compute_loss_weights(3, WeightFormula::TargetReciprocal);
        assert_eq!(target, vec![1.0 / 3.0, 0.5, 1.0, 0.5, 1.0, 1.0, 1.0]);
        let group = compute_loss_weights(3, WeightFormula::ShiftedGroupReciprocal);
        assert_eq!(group, vec![0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn mask_example_two_explicit_two_implicit() {
        // prefix 1 position; region positions 1..4 sit at input 1..4 (0-based)
        let m = build_attention_mask(2, 2);
        let visible = |q: usize| (0..5).filter(|&k| m.visible(q, k)).collect::<Vec<_>>();
        assert_eq!(visible(2), vec![0, 2]);
        assert_eq!(visible(3), vec![0, 2, 3]);
        assert_eq!(visible(1), vec![0, 1]);
        assert_eq!(visible(4), vec![0, 2, 3, 4]);
    }

    #[test]
    fn statuses_are_copied_into_repetitions() {
        let mut r = rec(&[0], &[1, 2], 0);
        r.explicit[0].status = SymptomStatus::Absent;
        let rep = build_repeated_input(&r);
        assert!(rep.tokens[..2]
            .iter()
            .all(|f| f.status == SymptomStatus::Absent));
        assert_eq!(rep.tokens[2].status, SymptomStatus::Present);
    }

    #[test]
    fn render_lists_every_input_position() {
        let r = rec(&[9, 0], &[1, 2, 3], 0);
        let idx = PrefixIndex::build(std::slice::from_ref(&r));
        let s = expand_record(&r, &idx, AugmentConfig::default());
        let vocab = Vocab::numbered(10, 1);
        let text = s.render(&vocab);
        assert!(text.starts_with("N=2 M=3 M'=7"));
        assert_eq!(text.lines().count(), 1 + 1 + 8 + 1 + 8);
    }

    proptest! {
        #[test]
        fn counting_and_anchor_laws(n in 1usize..6, m in 0usize..9) {
            let r = rec(&(0..n).collect::<Vec<_>>(), &(n..n + m).collect::<Vec<_>>(), 0);
            let rep = build_repeated_input(&r);
            prop_assert_eq!(rep.tokens.len(), (n - 1) + m * (m + 1) / 2 + 1);
            let expected: Vec<usize> = (0..m).map(|k| anchor_formula(m, k) - 1)
                .chain(std::iter::once(repeated_len(m) - 1)).collect();
            prop_assert_eq!(&rep.anchors, &expected);
            for (g, &a) in rep.anchors.iter().enumerate() {
                prop_assert_eq!(rep.group_of[a], g);
            }

            let labels = expand_s_labels(&r, FinalLabel::End);
            for (t, f) in r.implicit.iter().enumerate() {
                let count = labels.iter().filter(|l| **l == SymptomLabel::Symptom(f.symptom)).count();
                prop_assert_eq!(count, t + 1);
            }
            prop_assert_eq!(labels.iter().filter(|l| **l == SymptomLabel::End).count(), 1);
        }

        #[test]
        fn isolated_record_labels_are_all_gold(m in 0usize..8) {
            let r = rec(&[0], &(1..=m).collect::<Vec<_>>(), 3);
            let idx = PrefixIndex::build(std::slice::from_ref(&r));
            let s = expand_record(&r, &idx, AugmentConfig::default());
            prop_assert_eq!(s.d_labels.len(), repeated_len(m));
            prop_assert!(s.d_labels.iter().all(|d| *d == DiseaseLabel::Disease(DiseaseId(3))));
            let total: f64 = s.weights.iter().sum();
            prop_assert!((total - (m as f64 + 1.0)).abs() < 1e-9);
        }
    }
}
