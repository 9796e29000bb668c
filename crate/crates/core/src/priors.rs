//! Prior functionals `ζ(y | x)`.
//!
//! Every prior is evaluated in log space and only up to an additive constant
//! shared by all responses of one prompt; that constant cancels inside the
//! MI-DPO margin. [`normalize_prior`] turns a prior into an exact distribution
//! when one is needed.
//!
//! Token-level sums run over the response tokens `t = 1..|y|`, while sequence
//! log-probabilities include the terminator factor when `|y| < L`. The one
//! exception is the SparsePO reward-mask sum, which runs over every generation
//! step (response tokens, then the terminator when `|y| < L`) so that the
//! masked sum reproduces the sequence log-probability when the mask is all ones
//! or all zeros. The terminator step reuses the mask value of the last token.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{enumerate_responses, AlignmentConfig, Token, TokenAnnotations};
use crate::error::{Error, Result};
use crate::numerics::{kl_divergence, normalize_log_weights};
use crate::policy::{join_tokens, TabularPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Dpo,
    Dice,
    Centropy,
    Rdpo,
    Simpo,
    Tdpo,
    Tisdpo,
    Sparsepo,
    Table,
}

impl PriorKind {
    /// The eight kinds that correspond to a published variant loss.
    pub const VARIANTS: [PriorKind; 8] = [
        PriorKind::Dpo,
        PriorKind::Dice,
        PriorKind::Centropy,
        PriorKind::Rdpo,
        PriorKind::Simpo,
        PriorKind::Tdpo,
        PriorKind::Tisdpo,
        PriorKind::Sparsepo,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PriorKind::Dpo => "dpo",
            PriorKind::Dice => "dice",
            PriorKind::Centropy => "centropy",
            PriorKind::Rdpo => "rdpo",
            PriorKind::Simpo => "simpo",
            PriorKind::Tdpo => "tdpo",
            PriorKind::Tisdpo => "tisdpo",
            PriorKind::Sparsepo => "sparsepo",
            PriorKind::Table => "table",
        }
    }

    /// Whether the prior depends on the winner/loser label.
    pub fn needs_role(&self) -> bool {
        matches!(self, PriorKind::Simpo | PriorKind::Tisdpo)
    }

    pub fn needs_annotations(&self) -> bool {
        matches!(self, PriorKind::Tisdpo | PriorKind::Sparsepo)
    }
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::Parse(format!("unknown prior kind `{s}`")))
    }
}

/// Explicit log-weights over the enumerated response space, either shared by
/// all prompts or given per prompt (keys are comma-joined prompt tokens).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriorTable {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_prompt: BTreeMap<String, Vec<f64>>,
}

impl PriorTable {
    pub fn shared(log_weights: Vec<f64>) -> Self {
        Self {
            log_weights: Some(log_weights),
            per_prompt: BTreeMap::new(),
        }
    }

    pub fn insert_prompt(&mut self, prompt: &[Token], log_weights: Vec<f64>) {
        self.per_prompt.insert(join_tokens(prompt), log_weights);
    }

    pub fn weights_for(&self, prompt: &[Token]) -> Option<&[f64]> {
        self.per_prompt
            .get(&join_tokens(prompt))
            .or(self.log_weights.as_ref())
            .map(Vec::as_slice)
    }
}

/// Which prior to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PriorSpec {
    Dpo,
    Dice,
    Centropy,
    Rdpo,
    Simpo,
    Tdpo,
    Tisdpo,
    Sparsepo,
    Table(PriorTable),
}

impl PriorSpec {
    pub fn kind(&self) -> PriorKind {
        match self {
            PriorSpec::Dpo => PriorKind::Dpo,
            PriorSpec::Dice => PriorKind::Dice,
            PriorSpec::Centropy => PriorKind::Centropy,
            PriorSpec::Rdpo => PriorKind::Rdpo,
            PriorSpec::Simpo => PriorKind::Simpo,
            PriorSpec::Tdpo => PriorKind::Tdpo,
            PriorSpec::Tisdpo => PriorKind::Tisdpo,
            PriorSpec::Sparsepo => PriorKind::Sparsepo,
            PriorSpec::Table(_) => PriorKind::Table,
        }
    }

    /// The spec for a non-table kind.
    pub fn from_kind(kind: PriorKind) -> Result<Self> {
        Ok(match kind {
            PriorKind::Dpo => PriorSpec::Dpo,
            PriorKind::Dice => PriorSpec::Dice,
            PriorKind::Centropy => PriorSpec::Centropy,
            PriorKind::Rdpo => PriorSpec::Rdpo,
            PriorKind::Simpo => PriorSpec::Simpo,
            PriorKind::Tdpo => PriorSpec::Tdpo,
            PriorKind::Tisdpo => PriorSpec::Tisdpo,
            PriorKind::Sparsepo => PriorSpec::Sparsepo,
            PriorKind::Table => return Err(Error::config("table", "a table prior needs explicit log-weights")),
        })
    }
}

/// Label of the response a prior is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Winner,
    Loser,
    Neutral,
}

/// Everything a prior may depend on besides the prompt and response.
#[derive(Debug, Clone, Copy)]
pub struct PriorContext<'a> {
    pub llm: &'a TabularPolicy,
    pub reference: &'a TabularPolicy,
    /// Previous-round policy, required by DICE.
    pub prev: Option<&'a TabularPolicy>,
    pub config: &'a AlignmentConfig,
    pub role: Role,
    /// Annotations of the response being evaluated.
    pub annotations: Option<&'a TokenAnnotations>,
}

impl<'a> PriorContext<'a> {
    pub fn new(llm: &'a TabularPolicy, reference: &'a TabularPolicy, config: &'a AlignmentConfig) -> Self {
        Self {
            llm,
            reference,
            prev: None,
            config,
            role: Role::Neutral,
            annotations: None,
        }
    }

    pub fn with_prev(mut self, prev: Option<&'a TabularPolicy>) -> Self {
        self.prev = prev;
        self
    }

    pub fn with_role(mut self, role: Role, annotations: Option<&'a TokenAnnotations>) -> Self {
        self.role = role;
        self.annotations = annotations;
        self
    }
}

/// One additive component of `log ζ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorTerm {
    pub name: &'static str,
    pub value: f64,
}

fn annotation<'a>(
    ctx: &PriorContext<'a>,
    kind: PriorKind,
    field: &str,
    pick: impl Fn(&'a TokenAnnotations) -> Option<&'a Vec<f64>>,
    len: usize,
) -> Result<&'a [f64]> {
    let values = ctx
        .annotations
        .and_then(pick)
        .ok_or_else(|| Error::config(kind.name(), format!("missing `{field}` annotation")))?;
    if values.len() != len {
        return Err(Error::LengthMismatch {
            what: format!("{field} annotation"),
            expected: len,
            got: values.len(),
        });
    }
    Ok(values)
}

/// `KL(p(·|x, y^{<t}) || q(·|x, y^{<t}))` for `t = 1..|y|`.
fn position_kls(p: &TabularPolicy, q: &TabularPolicy, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
    (0..response.len())
        .map(|t| {
            let pd = p.next_token_dist(prompt, &response[..t])?;
            let qd = q.next_token_dist(prompt, &response[..t])?;
            Ok(kl_divergence(&pd, &qd))
        })
        .collect()
}

/// Log-probabilities of every generation step: response tokens, then the
/// terminator when `|y| < L`.
fn step_log_probs(policy: &TabularPolicy, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
    let mut steps = policy.token_log_probs(prompt, response)?;
    if let Some(term) = policy.terminator_log_prob(prompt, response)? {
        steps.push(term);
    }
    Ok(steps)
}

/// The additive components of `log ζ(y | x)` for a prior.
pub fn log_zeta_terms(
    spec: &PriorSpec,
    ctx: &PriorContext<'_>,
    prompt: &[Token],
    response: &[Token],
) -> Result<Vec<PriorTerm>> {
    let kind = spec.kind();
    if kind.needs_role() && ctx.role == Role::Neutral {
        return Err(Error::config(kind.name(), "prior depends on the winner/loser role"));
    }
    let term = |name, value| PriorTerm { name, value };
    let cfg = ctx.config;
    let terms = match spec {
        PriorSpec::Dpo => vec![term("log_ref", ctx.reference.seq_log_prob(prompt, response)?)],
        PriorSpec::Dice => {
            let prev = ctx
                .prev
                .ok_or_else(|| Error::config("dice", "missing previous-round policy"))?;
            vec![term("log_prev", prev.seq_log_prob(prompt, response)?)]
        }
        PriorSpec::Centropy => vec![
            term("log_ref", ctx.reference.seq_log_prob(prompt, response)?),
            term(
                "entropy_exponent",
                (1.0 - cfg.eta_exp) * ctx.llm.seq_log_prob(prompt, response)?,
            ),
        ],
        PriorSpec::Rdpo => vec![
            term("log_ref", ctx.reference.seq_log_prob(prompt, response)?),
            term("length_penalty", -cfg.len_coeff * response.len() as f64),
        ],
        PriorSpec::Simpo => {
            let half_margin = cfg.gamma / (2.0 * cfg.alpha);
            let offset = if ctx.role == Role::Winner {
                half_margin
            } else {
                -half_margin
            };
            let scale = 1.0 - 1.0 / response.len() as f64;
            vec![
                term("length_scaled_log_llm", scale * ctx.llm.seq_log_prob(prompt, response)?),
                term("role_offset", offset),
            ]
        }
        PriorSpec::Tdpo => {
            let kls = position_kls(ctx.reference, ctx.llm, prompt, response)?;
            vec![
                term("log_ref", ctx.reference.seq_log_prob(prompt, response)?),
                term("sequential_kl", -kls.iter().sum::<f64>()),
            ]
        }
        PriorSpec::Tisdpo => {
            let w = annotation(ctx, kind, "weights", |a| a.weights.as_ref(), response.len())?;
            let llm_tok = ctx.llm.token_log_probs(prompt, response)?;
            let ref_tok = ctx.reference.token_log_probs(prompt, response)?;
            let kls = position_kls(ctx.llm, ctx.reference, prompt, response)?;
            let ratio: f64 = (0..response.len()).map(|i| w[i] * (ref_tok[i] - llm_tok[i])).sum();
            let weighted_kl: f64 = (0..response.len()).map(|i| w[i] * kls[i]).sum();
            vec![
                term("log_llm", ctx.llm.seq_log_prob(prompt, response)?),
                term("weighted_token_ratio", ratio),
                term("weighted_seq_kl", weighted_kl),
            ]
        }
        PriorSpec::Sparsepo => {
            let mu1 = annotation(ctx, kind, "mu1", |a| a.mu1.as_ref(), response.len())?;
            let mu2 = annotation(ctx, kind, "mu2", |a| a.mu2.as_ref(), response.len())?;
            let llm_steps = step_log_probs(ctx.llm, prompt, response)?;
            let ref_steps = step_log_probs(ctx.reference, prompt, response)?;
            let last = mu1[mu1.len() - 1];
            let mask = |s: usize| mu1.get(s).copied().unwrap_or(last);
            let kls = position_kls(ctx.reference, ctx.llm, prompt, response)?;
            vec![
                term(
                    "unmasked_log_llm",
                    llm_steps.iter().enumerate().map(|(s, lp)| (1.0 - mask(s)) * lp).sum(),
                ),
                term(
                    "masked_log_ref",
                    ref_steps.iter().enumerate().map(|(s, lp)| mask(s) * lp).sum(),
                ),
                term(
                    "masked_sequential_kl",
                    -(0..response.len()).map(|t| mu2[t] * kls[t]).sum::<f64>(),
                ),
            ]
        }
        PriorSpec::Table(table) => {
            let weights = table
                .weights_for(prompt)
                .ok_or_else(|| Error::config("table", format!("no log-weights for prompt {prompt:?}")))?;
            let vocab = ctx.llm.vocab();
            let expected = vocab.response_space_size() as usize;
            if weights.len() != expected {
                return Err(Error::LengthMismatch {
                    what: "table log-weights".into(),
                    expected,
                    got: weights.len(),
                });
            }
            vec![term("table", weights[vocab.response_index(response)?])]
        }
    };
    Ok(terms)
}

/// `log ζ(y | x)` up to a prompt-wide additive constant.
pub fn log_zeta(spec: &PriorSpec, ctx: &PriorContext<'_>, prompt: &[Token], response: &[Token]) -> Result<f64> {
    Ok(log_zeta_terms(spec, ctx, prompt, response)?
        .iter()
        .map(|t| t.value)
        .sum())
}

/// The exact distribution `ζ(y) / Σ ζ(y')` over the enumerated responses.
///
/// Role-dependent priors use the context's role for every response; priors
/// that need per-response annotations cannot be normalised this way.
pub fn normalize_prior(spec: &PriorSpec, ctx: &PriorContext<'_>, prompt: &[Token]) -> Result<Vec<f64>> {
    let kind = spec.kind();
    if kind.needs_annotations() {
        return Err(Error::config(
            kind.name(),
            "per-response annotations are not defined over the whole response space",
        ));
    }
    let log_weights = enumerate_responses(ctx.llm.vocab())?
        .iter()
        .map(|y| log_zeta(spec, ctx, prompt, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize_log_weights(&log_weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocabulary;

    struct Fixture {
        llm: TabularPolicy,
        reference: TabularPolicy,
        prev: TabularPolicy,
        cfg: AlignmentConfig,
    }

    fn fixture(seed: u64) -> Fixture {
        let voc = Vocabulary::new(3, 3).unwrap();
        let prompts = vec![vec![1], vec![2]];
        Fixture {
            llm: TabularPolicy::random(voc, &prompts, seed),
            reference: TabularPolicy::random(voc, &prompts, seed + 1000),
            prev: TabularPolicy::random(voc, &prompts, seed + 2000),
            cfg: AlignmentConfig {
                alpha: 0.5,
                beta: 2.0,
                gamma: 0.7,
                eta_exp: 1.3,
                len_coeff: 0.4,
                ..AlignmentConfig::default()
            },
        }
    }

    fn eval(spec: &PriorSpec, f: &Fixture, role: Role, ann: Option<&TokenAnnotations>, y: &[Token]) -> f64 {
        let ctx = PriorContext::new(&f.llm, &f.reference, &f.cfg)
            .with_prev(Some(&f.prev))
            .with_role(role, ann);
        log_zeta(spec, &ctx, &[1], y).unwrap()
    }

    #[test]
    fn dpo_is_reference_log_prob() {
        let f = fixture(1);
        let y = [2, 3];
        assert_eq!(
            eval(&PriorSpec::Dpo, &f, Role::Neutral, None, &y),
            f.reference.seq_log_prob(&[1], &y).unwrap()
        );
        assert_eq!(
            eval(&PriorSpec::Dice, &f, Role::Neutral, None, &y),
            f.prev.seq_log_prob(&[1], &y).unwrap()
        );
    }

    #[test]
    fn reductions_to_dpo() {
        let mut f = fixture(2);
        let y = [1, 3, 2];
        let dpo = eval(&PriorSpec::Dpo, &f, Role::Neutral, None, &y);
        f.cfg.eta_exp = 1.0;
        assert_eq!(eval(&PriorSpec::Centropy, &f, Role::Neutral, None, &y), dpo);
        f.cfg.len_coeff = 0.0;
        assert_eq!(eval(&PriorSpec::Rdpo, &f, Role::Neutral, None, &y), dpo);
        f.llm = f.reference.clone();
        assert_eq!(eval(&PriorSpec::Tdpo, &f, Role::Neutral, None, &y), dpo);
    }

    #[test]
    fn zero_annotations_collapse_to_llm() {
        let f = fixture(3);
        for y in [vec![2], vec![1, 3], vec![3, 3, 1]] {
            let zeros = TokenAnnotations {
                weights: Some(vec![0.0; y.len()]),
                mu1: Some(vec![0.0; y.len()]),
                mu2: Some(vec![0.0; y.len()]),
            };
            let llm = f.llm.seq_log_prob(&[1], &y).unwrap();
            assert!((eval(&PriorSpec::Tisdpo, &f, Role::Winner, Some(&zeros), &y) - llm).abs() < 1e-14);
            assert!((eval(&PriorSpec::Sparsepo, &f, Role::Neutral, Some(&zeros), &y) - llm).abs() < 1e-14);
        }
    }

    #[test]
    fn simpo_single_token_without_margin_is_constant() {
        let mut f = fixture(4);
        f.cfg.gamma = 0.0;
        for t in 1..=3 {
            assert_eq!(eval(&PriorSpec::Simpo, &f, Role::Winner, None, &[t]), 0.0);
        }
    }

    #[test]
    fn simpo_role_offsets_differ_by_margin_over_alpha() {
        let f = fixture(5);
        let y = [1, 2];
        let w = eval(&PriorSpec::Simpo, &f, Role::Winner, None, &y);
        let l = eval(&PriorSpec::Simpo, &f, Role::Loser, None, &y);
        assert!((w - l - f.cfg.gamma / f.cfg.alpha).abs() < 1e-14);
    }

    #[test]
    fn missing_context_is_a_config_error() {
        let f = fixture(6);
        let ctx = PriorContext::new(&f.llm, &f.reference, &f.cfg);
        let err = |spec: &PriorSpec| log_zeta(spec, &ctx, &[1], &[1]).unwrap_err();
        assert!(matches!(err(&PriorSpec::Dice), Error::Config { kind, .. } if kind == "dice"));
        assert!(matches!(err(&PriorSpec::Simpo), Error::Config { kind, .. } if kind == "simpo"));
        assert!(matches!(err(&PriorSpec::Sparsepo), Error::Config { kind, .. } if kind == "sparsepo"));
        let ctx = ctx.with_role(Role::Winner, None);
        assert!(
            matches!(log_zeta(&PriorSpec::Tisdpo, &ctx, &[1], &[1]).unwrap_err(), Error::Config { kind, .. } if kind == "tisdpo")
        );
        let table = PriorSpec::Table(PriorTable::shared(vec![0.0; 5]));
        assert!(matches!(
            log_zeta(&table, &ctx, &[1], &[1]).unwrap_err(),
            Error::LengthMismatch { .. }
        ));
    }

    /// A second transcription of each prior, written straight from the
    /// next-token distributions without the policy's sequence helpers.
    fn brute_log_zeta(kind: PriorKind, f: &Fixture, role: Role, ann: &TokenAnnotations, y: &[Token]) -> f64 {
        let x = [1];
        let l = f.llm.vocab().max_len();
        let dist = |p: &TabularPolicy, t: usize| p.next_token_dist(&x, &y[..t]).unwrap();
        let seq = |p: &TabularPolicy| {
            let mut s = 0.0;
            for t in 0..y.len() {
                s += dist(p, t)[y[t] as usize].ln();
            }
            if y.len() < l {
                s += dist(p, y.len())[0].ln();
            }
            s
        };
        let kl = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p / q).ln())
                .sum::<f64>()
        };
        let (pi, rf, c) = (&f.llm, &f.reference, &f.cfg);
        match kind {
            PriorKind::Dpo => seq(rf),
            PriorKind::Dice => seq(&f.prev),
            PriorKind::Centropy => seq(rf) + (1.0 - c.eta_exp) * seq(pi),
            PriorKind::Rdpo => seq(rf) - c.len_coeff * y.len() as f64,
            PriorKind::Simpo => {
                let b = if role == Role::Winner {
                    c.gamma / (2.0 * c.alpha)
                } else {
                    -c.gamma / (2.0 * c.alpha)
                };
                (1.0 - 1.0 / y.len() as f64) * seq(pi) + b
            }
            PriorKind::Tdpo => seq(rf) - (0..y.len()).map(|t| kl(&dist(rf, t), &dist(pi, t))).sum::<f64>(),
            PriorKind::Tisdpo => {
                let w = ann.weights.as_ref().unwrap();
                let mut v = seq(pi);
                for i in 0..y.len() {
                    let k = y[i] as usize;
                    v += w[i] * (dist(rf, i)[k] / dist(pi, i)[k]).ln();
                    v += w[i] * kl(&dist(pi, i), &dist(rf, i));
                }
                v
            }
            PriorKind::Sparsepo => {
                let (m1, m2) = (ann.mu1.as_ref().unwrap(), ann.mu2.as_ref().unwrap());
                let mut v = 0.0;
                for t in 0..y.len() {
                    let k = y[t] as usize;
                    v += (1.0 - m1[t]) * dist(pi, t)[k].ln() + m1[t] * dist(rf, t)[k].ln();
                    v -= m2[t] * kl(&dist(rf, t), &dist(pi, t));
                }
                if y.len() < l {
                    let m = m1[y.len() - 1];
                    v += (1.0 - m) * dist(pi, y.len())[0].ln() + m * dist(rf, y.len())[0].ln();
                }
                v
            }
            PriorKind::Table => unreachable!(),
        }
    }

    #[test]
    fn every_kind_matches_second_transcription() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for seed in 0..20 {
            let f = fixture(seed);
            for y in [vec![1], vec![2, 3], vec![3, 1, 2]] {
                let mut draw = || (0..y.len()).map(|_| rng.random::<f64>()).collect::<Vec<_>>();
                let ann = TokenAnnotations {
                    weights: Some(draw()),
                    mu1: Some(draw()),
                    mu2: Some(draw()),
                };
                for kind in PriorKind::VARIANTS {
                    for role in [Role::Winner, Role::Loser] {
                        let spec = PriorSpec::from_kind(kind).unwrap();
                        let got = eval(&spec, &f, role, Some(&ann), &y);
                        let want = brute_log_zeta(kind, &f, role, &ann, &y);
                        assert!((got - want).abs() < 1e-12, "{kind} {y:?}: {got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn normalized_dpo_prior_is_reference_distribution() {
        let f = fixture(8);
        let ctx = PriorContext::new(&f.llm, &f.reference, &f.cfg);
        let table = normalize_prior(&PriorSpec::Dpo, &ctx, &[1]).unwrap();
        let direct = f.reference.sequence_distribution(&[1]).unwrap();
        for (a, b) in table.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-14);
        }
        for kind in [PriorKind::Centropy, PriorKind::Rdpo, PriorKind::Tdpo] {
            let t = normalize_prior(&PriorSpec::from_kind(kind).unwrap(), &ctx, &[1]).unwrap();
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(t.iter().all(|&p| p > 0.0));
        }
        assert!(normalize_prior(&PriorSpec::Sparsepo, &ctx, &[1]).is_err());
    }

    #[test]
    fn length_penalty_moves_mass_to_short_responses() {
        // Y = {[1], [1,1]} with V = 1, L = 2
        let voc = Vocabulary::new(1, 2).unwrap();
        let reference = TabularPolicy::random(voc, &[vec![1]], 3);
        let cfg = AlignmentConfig {
            len_coeff: 0.8,
            ..AlignmentConfig::default()
        };
        let ctx = PriorContext::new(&reference, &reference, &cfg);
        let dpo = normalize_prior(&PriorSpec::Dpo, &ctx, &[1]).unwrap();
        let rdpo = normalize_prior(&PriorSpec::Rdpo, &ctx, &[1]).unwrap();
        assert!(rdpo[0] > dpo[0]);
        // the odds ratio shifts by exactly e^{len_coeff}
        let shift = (rdpo[0] / rdpo[1]) / (dpo[0] / dpo[1]);
        assert!((shift - cfg.len_coeff.exp()).abs() < 1e-12);
    }

    #[test]
    fn prior_spec_json_shapes() {
        assert_eq!(serde_json::to_string(&PriorSpec::Tdpo).unwrap(), r#"{"kind":"tdpo"}"#);
        let t = PriorSpec::Table(PriorTable::shared(vec![0.0, -1.0]));
        assert_eq!(
            serde_json::to_string(&t).unwrap(),
            r#"{"kind":"table","log_weights":[0.0,-1.0]}"#
        );
        let back: PriorSpec = serde_json::from_str(r#"{"kind":"table","log_weights":[0.5]}"#).unwrap();
        assert_eq!(back, PriorSpec::Table(PriorTable::shared(vec![0.5])));
        assert_eq!("SparsePO".parse::<PriorKind>().unwrap(), PriorKind::Sparsepo);
    }
}
