//! Domain types shared by every other module: vocabularies, responses,
//! preference triples and datasets, plus response-space enumeration and
//! dataset validation.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A token id. `0` is the terminator, `1..=V` are regular tokens.
pub type Token = u32;

pub const TERMINATOR: Token = 0;

/// Default maximum number of sequences [`enumerate_responses`] will produce.
pub const DEFAULT_ENUMERATION_CAP: u64 = 100_000;

/// A tiny vocabulary: `V` regular tokens and responses of length `1..=L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    #[serde(rename = "V")]
    regular_size: u32,
    #[serde(rename = "L")]
    max_len: usize,
}

impl Vocabulary {
    pub fn new(regular_size: u32, max_len: usize) -> Result<Self> {
        if regular_size == 0 {
            return Err(Error::Domain("vocabulary needs at least one regular token".into()));
        }
        if max_len == 0 {
            return Err(Error::Domain("maximum response length must be positive".into()));
        }
        Ok(Self { regular_size, max_len })
    }

    pub fn regular_size(&self) -> u32 {
        self.regular_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Number of next-token symbols, including the terminator.
    pub fn symbol_count(&self) -> usize {
        self.regular_size as usize + 1
    }

    /// `|Y| = Σ_{k=1..L} V^k`, saturating.
    pub fn response_space_size(&self) -> u128 {
        let v = self.regular_size as u128;
        let mut total: u128 = 0;
        let mut power: u128 = 1;
        for _ in 0..self.max_len {
            power = power.saturating_mul(v);
            total = total.saturating_add(power);
        }
        total
    }

    pub fn is_regular(&self, token: Token) -> bool {
        (1..=self.regular_size).contains(&token)
    }

    /// Checks that `response` is a valid element of `Y(V, L)`.
    pub fn check_response(&self, response: &[Token]) -> Result<()> {
        if response.is_empty() || response.len() > self.max_len {
            return Err(Error::OutOfRange(format!(
                "response length {} outside 1..={}",
                response.len(),
                self.max_len
            )));
        }
        self.check_tokens(response)
    }

    pub fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| !self.is_regular(t)) {
            Some(&token) => Err(Error::InvalidToken {
                token,
                vocab_size: self.regular_size,
            }),
            None => Ok(()),
        }
    }

    /// Position of `response` in the order produced by [`enumerate_responses`].
    pub fn response_index(&self, response: &[Token]) -> Result<usize> {
        self.check_response(response)?;
        let v = self.regular_size as usize;
        let mut offset = 0usize;
        let mut power = 1usize;
        for _ in 1..response.len() {
            power *= v;
            offset += power;
        }
        let within = response.iter().fold(0usize, |acc, &t| acc * v + (t as usize - 1));
        Ok(offset + within)
    }
}

/// Every response of length `1..=L`, shortest first and lexicographic within a
/// length, using the default cap.
pub fn enumerate_responses(vocab: &Vocabulary) -> Result<Vec<Vec<Token>>> {
    enumerate_responses_capped(vocab, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_responses_capped(vocab: &Vocabulary, cap: u64) -> Result<Vec<Vec<Token>>> {
    let size = vocab.response_space_size();
    if size > cap as u128 {
        return Err(Error::EnumerationTooLarge { size, cap });
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut layer: Vec<Vec<Token>> = vec![Vec::new()];
    for _ in 0..vocab.max_len {
        let mut next = Vec::with_capacity(layer.len() * vocab.regular_size as usize);
        for prefix in &layer {
            for t in 1..=vocab.regular_size {
                let mut seq = prefix.clone();
                seq.push(t);
                next.push(seq);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    Ok(out)
}

/// Per-token annotations attached to one response.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenAnnotations {
    /// Token importance weights `w_i ≥ 0`.
    pub weights: Option<Vec<f64>>,
    /// Reward mask `μ1 ∈ [0, 1]`.
    pub mu1: Option<Vec<f64>>,
    /// KL mask `μ2 ∈ [0, 1]`.
    pub mu2: Option<Vec<f64>>,
}

impl TokenAnnotations {
    pub fn ones(len: usize) -> Self {
        Self {
            weights: Some(vec![1.0; len]),
            mu1: Some(vec![1.0; len]),
            mu2: Some(vec![1.0; len]),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_none() && self.mu1.is_none() && self.mu2.is_none()
    }

    fn problems(&self, len: usize, label: &str) -> Vec<String> {
        let mut out = Vec::new();
        let fields = [
            ("weights", &self.weights, 0.0, f64::INFINITY),
            ("mu1", &self.mu1, 0.0, 1.0),
            ("mu2", &self.mu2, 0.0, 1.0),
        ];
        for (name, values, lo, hi) in fields {
            let Some(values) = values else { continue };
            if values.len() != len {
                out.push(format!(
                    "{label} {name} has length {}, response has length {len}",
                    values.len()
                ));
            }
            if values.iter().any(|v| !v.is_finite() || *v < lo || *v > hi) {
                out.push(format!("{label} {name} has values outside [{lo}, {hi}]"));
            }
        }
        out
    }
}

/// One `(x, y_w, y_l)` record.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTriple {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    pub chosen_annotations: Option<TokenAnnotations>,
    pub rejected_annotations: Option<TokenAnnotations>,
}

impl PreferenceTriple {
    pub fn new(prompt: Vec<Token>, chosen: Vec<Token>, rejected: Vec<Token>) -> Self {
        Self {
            prompt,
            chosen,
            rejected,
            chosen_annotations: None,
            rejected_annotations: None,
        }
    }

    pub fn with_annotations(mut self, chosen: TokenAnnotations, rejected: TokenAnnotations) -> Self {
        self.chosen_annotations = Some(chosen);
        self.rejected_annotations = Some(rejected);
        self
    }

    fn problems(&self, vocab: &Vocabulary) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = vocab.check_tokens(&self.prompt) {
            out.push(format!("prompt: {e}"));
        }
        if let Err(e) = vocab.check_response(&self.chosen) {
            out.push(format!("chosen: {e}"));
        }
        if let Err(e) = vocab.check_response(&self.rejected) {
            out.push(format!("rejected: {e}"));
        }
        if self.chosen == self.rejected {
            out.push("chosen and rejected responses are identical".into());
        }
        if let Some(a) = &self.chosen_annotations {
            out.extend(a.problems(self.chosen.len(), "chosen"));
        }
        if let Some(a) = &self.rejected_annotations {
            out.extend(a.problems(self.rejected.len(), "rejected"));
        }
        out
    }
}

/// A non-empty ordered list of triples over one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    vocabulary: Vocabulary,
    triples: Vec<PreferenceTriple>,
}

impl PreferenceDataset {
    /// Builds a dataset, rejecting empty input and triples that are structurally
    /// invalid for the vocabulary. Label consistency is checked separately by
    /// [`validate_dataset`].
    pub fn new(vocabulary: Vocabulary, triples: Vec<PreferenceTriple>) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::Domain("dataset must contain at least one triple".into()));
        }
        let dataset = Self { vocabulary, triples };
        let report = validate_dataset(&dataset);
        if let Some(problem) = report.problems.first() {
            return Err(Error::Domain(problem.clone()));
        }
        Ok(dataset)
    }

    /// Builds a dataset without any validation; used to exercise the validator.
    pub fn new_unchecked(vocabulary: Vocabulary, triples: Vec<PreferenceTriple>) -> Self {
        Self { vocabulary, triples }
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn triples(&self) -> &[PreferenceTriple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Distinct prompts in first-appearance order.
    pub fn prompts(&self) -> Vec<Vec<Token>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for t in &self.triples {
            if seen.insert(t.prompt.clone()) {
                out.push(t.prompt.clone());
            }
        }
        out
    }

    /// The triples, in order, that keep every `(prompt, response)` on a single
    /// side: a triple is dropped when its winner was already a loser or its
    /// loser already a winner.
    pub fn absolute_subset(&self) -> PreferenceDataset {
        let mut winners = BTreeSet::new();
        let mut losers = BTreeSet::new();
        let kept = self
            .triples
            .iter()
            .filter(|t| {
                let w = (t.prompt.clone(), t.chosen.clone());
                let l = (t.prompt.clone(), t.rejected.clone());
                if losers.contains(&w) || winners.contains(&l) {
                    return false;
                }
                winners.insert(w);
                losers.insert(l);
                true
            })
            .cloned()
            .collect();
        Self::new_unchecked(self.vocabulary, kept)
    }

    /// Splits the triples into `rounds` contiguous, near-equal chunks.
    pub fn split_rounds(&self, rounds: usize) -> Result<Vec<PreferenceDataset>> {
        if rounds == 0 || rounds > self.triples.len() {
            return Err(Error::Domain(format!(
                "cannot split {} triples into {rounds} rounds",
                self.triples.len()
            )));
        }
        let base = self.triples.len() / rounds;
        let extra = self.triples.len() % rounds;
        let mut out = Vec::with_capacity(rounds);
        let mut start = 0;
        for r in 0..rounds {
            let len = base + usize::from(r < extra);
            out.push(PreferenceDataset {
                vocabulary: self.vocabulary,
                triples: self.triples[start..start + len].to_vec(),
            });
            start += len;
        }
        Ok(out)
    }

    pub fn read_jsonl(path: &Path, vocabulary: Vocabulary) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut triples = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TripleRecord =
                serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            triples.push(record.into_triple());
        }
        Self::new(vocabulary, triples)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(self.to_jsonl()?.as_bytes())?;
        out.flush()?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for t in &self.triples {
            s.push_str(&serde_json::to_string(&TripleRecord::from_triple(t))?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// The flat JSON Lines record, one triple per line.
#[derive(Debug, Serialize, Deserialize)]
struct TripleRecord {
    prompt: Vec<Token>,
    chosen: Vec<Token>,
    rejected: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chosen_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rejected_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chosen_mu1: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chosen_mu2: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rejected_mu1: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rejected_mu2: Option<Vec<f64>>,
}

impl TripleRecord {
    fn from_triple(t: &PreferenceTriple) -> Self {
        let c = t.chosen_annotations.clone().unwrap_or_default();
        let r = t.rejected_annotations.clone().unwrap_or_default();
        Self {
            prompt: t.prompt.clone(),
            chosen: t.chosen.clone(),
            rejected: t.rejected.clone(),
            chosen_weights: c.weights,
            rejected_weights: r.weights,
            chosen_mu1: c.mu1,
            chosen_mu2: c.mu2,
            rejected_mu1: r.mu1,
            rejected_mu2: r.mu2,
        }
    }

    fn into_triple(self) -> PreferenceTriple {
        let chosen = TokenAnnotations {
            weights: self.chosen_weights,
            mu1: self.chosen_mu1,
            mu2: self.chosen_mu2,
        };
        let rejected = TokenAnnotations {
            weights: self.rejected_weights,
            mu1: self.rejected_mu1,
            mu2: self.rejected_mu2,
        };
        PreferenceTriple {
            prompt: self.prompt,
            chosen: self.chosen,
            rejected: self.rejected,
            chosen_annotations: (!chosen.is_empty()).then_some(chosen),
            rejected_annotations: (!rejected.is_empty()).then_some(rejected),
        }
    }
}

/// Hyper-parameters of the alignment losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Loss temperature `α`.
    pub alpha: f64,
    /// KL-regularisation strength `β`; must satisfy `α β = 1`.
    pub beta: f64,
    /// SimPO target margin `γ`.
    pub gamma: f64,
    /// Entropy-controllable exponent `η`.
    pub eta_exp: f64,
    /// Length coefficient of the length-regularised prior.
    pub len_coeff: f64,
    pub seed: u64,
    pub tol_equiv: f64,
    pub tol_grad: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
            eta_exp: 1.0,
            len_coeff: 0.0,
            seed: 0,
            tol_equiv: 1e-9,
            tol_grad: 1e-4,
        }
    }
}

impl AlignmentConfig {
    /// A config with `β` set and `α = 1/β`.
    pub fn with_beta(beta: f64) -> Self {
        Self {
            alpha: 1.0 / beta,
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("eta_exp", self.eta_exp),
            ("tol_grad", self.tol_grad),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config("alignment", format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("len_coeff", self.len_coeff),
            ("tol_equiv", self.tol_equiv),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    "alignment",
                    format!("{name} must be non-negative, got {v}"),
                ));
            }
        }
        if ((self.alpha * self.beta) - 1.0).abs() > 1e-12 {
            return Err(Error::config(
                "alignment",
                format!("alpha * beta must equal 1, got {}", self.alpha * self.beta),
            ));
        }
        Ok(())
    }
}

/// Findings of [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub ok: bool,
    pub absolute_labels_ok: bool,
    /// `(prompt, response)` pairs labelled winner in one triple and loser in another.
    pub violations: Vec<(Vec<Token>, Vec<Token>)>,
    /// Structural problems: token ranges, lengths, identical responses, annotations.
    pub problems: Vec<String>,
}

/// Checks token ranges, annotation lengths and the absolute-label assumption.
pub fn validate_dataset(data: &PreferenceDataset) -> ValidationReport {
    let vocab = data.vocabulary();
    let mut problems = Vec::new();
    let mut winners = BTreeSet::new();
    let mut losers = BTreeSet::new();
    for (i, t) in data.triples().iter().enumerate() {
        problems.extend(t.problems(vocab).into_iter().map(|p| format!("triple {i}: {p}")));
        winners.insert((t.prompt.clone(), t.chosen.clone()));
        losers.insert((t.prompt.clone(), t.rejected.clone()));
    }
    if data.triples().is_empty() {
        problems.push("dataset is empty".into());
    }
    problems.sort();
    let violations: Vec<_> = winners.intersection(&losers).cloned().collect();
    let absolute_labels_ok = violations.is_empty();
    ValidationReport {
        ok: absolute_labels_ok && problems.is_empty(),
        absolute_labels_ok,
        violations,
        problems,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(v: u32, l: usize) -> Vocabulary {
        Vocabulary::new(v, l).unwrap()
    }

    #[test]
    fn enumerate_single_token_vocab() {
        assert_eq!(enumerate_responses(&vocab(1, 2)).unwrap(), vec![vec![1], vec![1, 1]]);
        assert_eq!(enumerate_responses(&vocab(2, 1)).unwrap(), vec![vec![1], vec![2]]);
    }

    #[test]
    fn enumeration_count_matches_closed_form() {
        for v in 1..=4u32 {
            for l in 1..=4usize {
                let voc = vocab(v, l);
                let all = enumerate_responses(&voc).unwrap();
                let closed: usize = (1..=l).map(|k| (v as usize).pow(k as u32)).sum();
                assert_eq!(all.len(), closed);
                let unique: BTreeSet<_> = all.iter().collect();
                assert_eq!(unique.len(), closed);
                for (i, y) in all.iter().enumerate() {
                    assert_eq!(voc.response_index(y).unwrap(), i);
                }
            }
        }
        assert_eq!(enumerate_responses(&vocab(2, 3)).unwrap().len(), 14);
    }

    #[test]
    fn enumeration_cap_names_size() {
        let err = enumerate_responses(&vocab(50, 6)).unwrap_err();
        match err {
            Error::EnumerationTooLarge { size, cap } => {
                assert_eq!(cap, DEFAULT_ENUMERATION_CAP);
                assert!(size > 15_000_000_000);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(enumerate_responses_capped(&vocab(2, 3), 13).is_err());
    }

    #[test]
    fn validate_clean_dataset() {
        let d = PreferenceDataset::new(vocab(3, 2), vec![PreferenceTriple::new(vec![1], vec![1], vec![2])]).unwrap();
        let r = validate_dataset(&d);
        assert!(r.ok && r.absolute_labels_ok);
    }

    #[test]
    fn validate_flags_relative_labels() {
        let d = PreferenceDataset::new_unchecked(
            vocab(3, 2),
            vec![
                PreferenceTriple::new(vec![1], vec![1], vec![2]),
                PreferenceTriple::new(vec![1], vec![2], vec![3]),
            ],
        );
        let r = validate_dataset(&d);
        assert!(!r.absolute_labels_ok && !r.ok);
        assert_eq!(r.violations, vec![(vec![1], vec![2])]);
        // different prompt: no violation
        let d = PreferenceDataset::new_unchecked(
            vocab(3, 2),
            vec![
                PreferenceTriple::new(vec![1], vec![1], vec![2]),
                PreferenceTriple::new(vec![2], vec![2], vec![3]),
            ],
        );
        assert!(validate_dataset(&d).ok);
    }

    #[test]
    fn validate_flags_annotation_length() {
        let bad = TokenAnnotations {
            weights: Some(vec![1.0, 1.0]),
            ..Default::default()
        };
        let t = PreferenceTriple::new(vec![1], vec![1], vec![2]).with_annotations(bad, TokenAnnotations::ones(1));
        let d = PreferenceDataset::new_unchecked(vocab(2, 2), vec![t]);
        let r = validate_dataset(&d);
        assert!(!r.ok);
        assert!(r.absolute_labels_ok);
        assert!(PreferenceDataset::new(vocab(2, 2), d.triples().to_vec()).is_err());
    }

    #[test]
    fn validate_flags_bad_tokens_and_identical_responses() {
        let d = PreferenceDataset::new_unchecked(
            vocab(2, 2),
            vec![
                PreferenceTriple::new(vec![1], vec![3], vec![1]),
                PreferenceTriple::new(vec![1], vec![2, 2], vec![2, 2]),
                PreferenceTriple::new(vec![1], vec![1, 1, 1], vec![1]),
            ],
        );
        let r = validate_dataset(&d);
        assert!(!r.ok);
        assert_eq!(r.problems.len(), 3);
    }

    #[test]
    fn jsonl_record_parses_reference_line() {
        let line = r#"{"prompt":[1,2],"chosen":[3,1],"rejected":[2],"chosen_weights":[1.0,0.5],"rejected_weights":[1.0],"chosen_mu1":[1,0],"chosen_mu2":[1,1],"rejected_mu1":[1],"rejected_mu2":[0]}"#;
        let t = serde_json::from_str::<TripleRecord>(line).unwrap().into_triple();
        assert_eq!(t.chosen, vec![3, 1]);
        let ca = t.chosen_annotations.as_ref().unwrap();
        assert_eq!(ca.weights.as_deref(), Some(&[1.0, 0.5][..]));
        assert_eq!(ca.mu1.as_deref(), Some(&[1.0, 0.0][..]));
        assert_eq!(
            t.rejected_annotations.as_ref().unwrap().mu2.as_deref(),
            Some(&[0.0][..])
        );
        let bare = serde_json::from_str::<TripleRecord>(r#"{"prompt":[1],"chosen":[1],"rejected":[2]}"#)
            .unwrap()
            .into_triple();
        assert!(bare.chosen_annotations.is_none());
    }

    #[test]
    fn alignment_config_requires_reciprocal_temperatures() {
        assert!(AlignmentConfig::with_beta(4.0).validate().is_ok());
        let cfg = AlignmentConfig {
            alpha: 2.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn validation_is_order_insensitive(seed in 0u64..500) {
            use rand::{Rng, SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let voc = vocab(2, 2);
            let ys = enumerate_responses(&voc).unwrap();
            let mut triples = Vec::new();
            for _ in 0..6 {
                let a = rng.random_range(0..ys.len());
                let mut b = rng.random_range(0..ys.len());
                if a == b { b = (b + 1) % ys.len(); }
                triples.push(PreferenceTriple::new(vec![rng.random_range(1..=2)], ys[a].clone(), ys[b].clone()));
            }
            let d = PreferenceDataset::new_unchecked(voc, triples.clone());
            let r1 = validate_dataset(&d);
            triples.shuffle(&mut rng);
            let r2 = validate_dataset(&PreferenceDataset::new_unchecked(voc, triples));
            proptest::prop_assert_eq!(&r1, &r2);
            proptest::prop_assert_eq!(&r1, &validate_dataset(&d));
            let kept = d.absolute_subset();
            proptest::prop_assert!(validate_dataset(&kept).absolute_labels_ok);
            proptest::prop_assert!(!kept.is_empty());
            if r1.absolute_labels_ok {
                proptest::prop_assert_eq!(kept.len(), d.len());
            }
        }
    }
}
