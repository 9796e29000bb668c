//! Exact tabular autoregressive policies.
//!
//! A policy stores one logit vector of length `V + 1` per context
//! `(prompt, response prefix)`; index `0` is the terminator and index `t` is
//! regular token `t`. Contexts without stored logits behave as all-zero logits,
//! i.e. the uniform next-token distribution.
//!
//! A response `y` with `|y| < L` is generated by emitting its tokens and then the
//! terminator; a response with `|y| = L` stops unconditionally. Responses are
//! never empty, so at the empty prefix the terminator is excluded and the softmax
//! runs over the regular tokens only. Together these make the sequence
//! distribution over `Y(V, L)` exactly normalised.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{enumerate_responses, Token, Vocabulary, TERMINATOR};
use crate::error::{Error, Result};
use crate::numerics::{entropy, kl_divergence, log_softmax, softmax};

/// `(prompt, prefix)`.
pub type ContextKey = (Vec<Token>, Vec<Token>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolicyFile", try_from = "PolicyFile")]
pub struct TabularPolicy {
    vocab: Vocabulary,
    logits: BTreeMap<ContextKey, Vec<f64>>,
}

impl TabularPolicy {
    /// The policy with no stored logits: uniform at every context.
    pub fn uniform(vocab: Vocabulary) -> Self {
        Self {
            vocab,
            logits: BTreeMap::new(),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Stored logit vectors, ordered by context.
    pub fn entries(&self) -> impl Iterator<Item = (&ContextKey, &Vec<f64>)> {
        self.logits.iter()
    }

    pub fn logits(&self, prompt: &[Token], prefix: &[Token]) -> Option<&[f64]> {
        self.logits.get(&(prompt.to_vec(), prefix.to_vec())).map(Vec::as_slice)
    }

    /// Logits at a context, materialising the zero vector if it is unseen.
    pub fn logits_mut(&mut self, prompt: &[Token], prefix: &[Token]) -> Result<&mut Vec<f64>> {
        self.check_context(prompt, prefix)?;
        let n = self.vocab.symbol_count();
        Ok(self
            .logits
            .entry((prompt.to_vec(), prefix.to_vec()))
            .or_insert_with(|| vec![0.0; n]))
    }

    pub fn set_logits(&mut self, prompt: &[Token], prefix: &[Token], logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.vocab.symbol_count() {
            return Err(Error::LengthMismatch {
                what: "logit vector".into(),
                expected: self.vocab.symbol_count(),
                got: logits.len(),
            });
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("logits must be finite".into()));
        }
        *self.logits_mut(prompt, prefix)? = logits;
        Ok(())
    }

    fn check_context(&self, prompt: &[Token], prefix: &[Token]) -> Result<()> {
        if prefix.len() > self.vocab.max_len() {
            return Err(Error::OutOfRange(format!(
                "prefix length {} exceeds maximum length {}",
                prefix.len(),
                self.vocab.max_len()
            )));
        }
        self.vocab.check_tokens(prompt)?;
        self.vocab.check_tokens(prefix)
    }

    /// Logits with the terminator masked out at the empty prefix.
    fn effective_logits(&self, prompt: &[Token], prefix: &[Token]) -> Vec<f64> {
        let mut z = match self.logits(prompt, prefix) {
            Some(z) => z.to_vec(),
            None => vec![0.0; self.vocab.symbol_count()],
        };
        if prefix.is_empty() {
            z[TERMINATOR as usize] = f64::NEG_INFINITY;
        }
        z
    }

    /// `π(· | x, prefix)` over the `V + 1` symbols. The terminator entry is `0`
    /// at the empty prefix.
    pub fn next_token_dist(&self, prompt: &[Token], prefix: &[Token]) -> Result<Vec<f64>> {
        self.check_context(prompt, prefix)?;
        Ok(softmax(&self.effective_logits(prompt, prefix)))
    }

    pub fn next_token_log_dist(&self, prompt: &[Token], prefix: &[Token]) -> Result<Vec<f64>> {
        self.check_context(prompt, prefix)?;
        Ok(log_softmax(&self.effective_logits(prompt, prefix)))
    }

    /// `ln π(y_t | x, y^{<t})` for `t = 1..|y|`; no terminator factor.
    pub fn token_log_probs(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
        self.vocab.check_response(response)?;
        (0..response.len())
            .map(|t| {
                let log_dist = self.next_token_log_dist(prompt, &response[..t])?;
                Ok(log_dist[response[t] as usize])
            })
            .collect()
    }

    /// `ln π(terminator | x, y)` when `|y| < L`, `None` for a forced stop.
    pub fn terminator_log_prob(&self, prompt: &[Token], response: &[Token]) -> Result<Option<f64>> {
        self.vocab.check_response(response)?;
        if response.len() == self.vocab.max_len() {
            return Ok(None);
        }
        Ok(Some(self.next_token_log_dist(prompt, response)?[TERMINATOR as usize]))
    }

    /// `ln π(y | x)`, including the terminator factor when `|y| < L`.
    pub fn seq_log_prob(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        let tokens: f64 = self.token_log_probs(prompt, response)?.iter().sum();
        Ok(tokens + self.terminator_log_prob(prompt, response)?.unwrap_or(0.0))
    }

    /// Sequence distribution over `Y(V, L)` in enumeration order.
    pub fn sequence_distribution(&self, prompt: &[Token]) -> Result<Vec<f64>> {
        enumerate_responses(&self.vocab)?
            .iter()
            .map(|y| self.seq_log_prob(prompt, y).map(f64::exp))
            .collect()
    }

    /// Entropy of `π(· | x)` over whole responses.
    pub fn policy_entropy(&self, prompt: &[Token]) -> Result<f64> {
        Ok(entropy(&self.sequence_distribution(prompt)?))
    }

    /// A deep copy that later updates to `self` cannot affect.
    pub fn snapshot(&self) -> TabularPolicy {
        self.clone()
    }

    /// Standard-normal logits at every context reachable from `prompts`
    /// (prefix lengths `0..L`), drawn from a seeded ChaCha generator.
    pub fn random(vocab: Vocabulary, prompts: &[Vec<Token>], seed: u64) -> Self {
        Self::random_scaled(vocab, prompts, seed, 1.0)
    }

    pub fn random_scaled(vocab: Vocabulary, prompts: &[Vec<Token>], seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = Self::uniform(vocab);
        let mut prefixes: Vec<Vec<Token>> = vec![Vec::new()];
        let mut layer = prefixes.clone();
        for _ in 1..vocab.max_len() {
            layer = layer
                .iter()
                .flat_map(|p| {
                    (1..=vocab.regular_size()).map(move |t| {
                        let mut q = p.clone();
                        q.push(t);
                        q
                    })
                })
                .collect();
            prefixes.extend(layer.iter().cloned());
        }
        for prompt in prompts {
            for prefix in &prefixes {
                let z: Vec<f64> = (0..vocab.symbol_count())
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    })
                    .collect();
                policy.logits.insert((prompt.clone(), prefix.clone()), z);
            }
        }
        policy
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `KL(p(· | x, prefix) || q(· | x, prefix))` over the `V + 1` symbols.
pub fn token_kl(p: &TabularPolicy, q: &TabularPolicy, prompt: &[Token], prefix: &[Token]) -> Result<f64> {
    let pd = p.next_token_dist(prompt, prefix)?;
    let qd = q.next_token_dist(prompt, prefix)?;
    Ok(kl_divergence(&pd, &qd))
}

/// Convenience wrapper matching [`TabularPolicy::random`].
pub fn random_policy(vocab: Vocabulary, prompts: &[Vec<Token>], seed: u64) -> TabularPolicy {
    TabularPolicy::random(vocab, prompts, seed)
}

pub(crate) fn join_tokens(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn split_tokens(s: &str) -> Result<Vec<Token>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<Token>()
                .map_err(|e| Error::Parse(format!("token `{t}`: {e}")))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    vocab: Vocabulary,
    logits: BTreeMap<String, Vec<f64>>,
}

impl From<&TabularPolicy> for PolicyFile {
    fn from(p: &TabularPolicy) -> Self {
        Self {
            vocab: p.vocab,
            logits: p
                .logits
                .iter()
                .map(|((x, prefix), z)| (format!("{}|{}", join_tokens(x), join_tokens(prefix)), z.clone()))
                .collect(),
        }
    }
}

impl From<TabularPolicy> for PolicyFile {
    fn from(p: TabularPolicy) -> Self {
        Self::from(&p)
    }
}

impl TryFrom<PolicyFile> for TabularPolicy {
    type Error = Error;

    fn try_from(f: PolicyFile) -> Result<Self> {
        let vocab = Vocabulary::new(f.vocab.regular_size(), f.vocab.max_len())?;
        let mut policy = TabularPolicy::uniform(vocab);
        for (key, z) in f.logits {
            let (x, prefix) = key
                .split_once('|')
                .ok_or_else(|| Error::Parse(format!("context key `{key}` lacks `|`")))?;
            policy.set_logits(&split_tokens(x)?, &split_tokens(prefix)?, z)?;
        }
        Ok(policy)
    }
}
