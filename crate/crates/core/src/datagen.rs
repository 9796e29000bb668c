//! Synthetic worlds: Gaussian latent rewards and Bradley–Terry preference data.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{enumerate_responses, PreferenceDataset, PreferenceTriple, Token, TokenAnnotations, Vocabulary};
use crate::error::{Error, Result};
use crate::optimal::{bt_from_rewards, RewardBlock, RewardTable};
use crate::policy::TabularPolicy;

const MAX_PAIR_RETRIES: usize = 1000;
const REWARD_STREAM: u64 = 1;
const PREFERENCE_STREAM: u64 = 2;
const GENERATOR_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationMode {
    #[default]
    None,
    Ones,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub vocab: Vocabulary,
    pub n_prompts: usize,
    pub reward_scale: f64,
    pub n_triples: usize,
    pub seed: u64,
    pub annotation_mode: AnnotationMode,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_prompts == 0 || self.n_prompts > self.vocab.regular_size() as usize {
            return Err(Error::config(
                "world",
                format!("n_prompts must lie in 1..={}", self.vocab.regular_size()),
            ));
        }
        if !(self.reward_scale >= 0.0 && self.reward_scale.is_finite()) {
            return Err(Error::config("world", "reward_scale must be non-negative"));
        }
        if self.n_triples == 0 {
            return Err(Error::config("world", "n_triples must be positive"));
        }
        Ok(())
    }

    /// Single-token prompts `[1], [2], …, [n_prompts]`.
    pub fn prompts(&self) -> Vec<Vec<Token>> {
        (1..=self.n_prompts as Token).map(|t| vec![t]).collect()
    }

    /// The generator policy shared by `gen` and the tests; derived from `seed`.
    pub fn generator(&self) -> TabularPolicy {
        TabularPolicy::random(self.vocab, &self.prompts(), self.seed ^ GENERATOR_SALT)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Independent `N(0, reward_scale²)` entries, prompt-major in enumeration order.
pub fn sample_reward_table(spec: &WorldSpec) -> Result<RewardTable> {
    spec.validate()?;
    let size = enumerate_responses(&spec.vocab)?.len();
    let mut rng = stream_rng(spec.seed, REWARD_STREAM);
    let blocks = spec
        .prompts()
        .into_iter()
        .map(|prompt| {
            let rewards = (0..size)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.reward_scale * z
                })
                .collect();
            RewardBlock { prompt, rewards }
        })
        .collect();
    RewardTable::new(&spec.vocab, blocks)
}

/// Returns `true` when the first response wins, with probability `σ(r1 - r2)`.
pub fn label_pair<R: Rng>(r1: f64, r2: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < bt_from_rewards(r1, r2)
}

fn annotations<R: Rng>(mode: AnnotationMode, len: usize, rng: &mut R) -> TokenAnnotations {
    match mode {
        AnnotationMode::None => TokenAnnotations::default(),
        AnnotationMode::Ones => TokenAnnotations::ones(len),
        AnnotationMode::Random => {
            let mut draw = || (0..len).map(|_| rng.random::<f64>()).collect::<Vec<_>>();
            TokenAnnotations {
                weights: Some(draw()),
                mu1: Some(draw()),
                mu2: Some(draw()),
            }
        }
    }
}

pub fn sample_preferences(
    rewards: &RewardTable,
    generator: &TabularPolicy,
    spec: &WorldSpec,
) -> Result<PreferenceDataset> {
    spec.validate()?;
    if generator.vocab() != &spec.vocab {
        return Err(Error::config(
            "world",
            "generator vocabulary differs from the world vocabulary",
        ));
    }
    let responses = enumerate_responses(&spec.vocab)?;
    let prompts = spec.prompts();
    let samplers = prompts
        .iter()
        .map(|x| {
            WeightedIndex::new(generator.sequence_distribution(x)?)
                .map_err(|e| Error::Sampling(format!("generator distribution for {x:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = stream_rng(spec.seed, PREFERENCE_STREAM);
    let mut triples = Vec::with_capacity(spec.n_triples);
    for _ in 0..spec.n_triples {
        let xi = rng.random_range(0..prompts.len());
        let first = samplers[xi].sample(&mut rng);
        let second = (0..MAX_PAIR_RETRIES)
            .map(|_| samplers[xi].sample(&mut rng))
            .find(|&j| j != first)
            .ok_or_else(|| {
                Error::Sampling(format!(
                    "no distinct response pair for prompt {:?} after {MAX_PAIR_RETRIES} retries",
                    prompts[xi]
                ))
            })?;
        let block = rewards.for_prompt(&prompts[xi])?;
        let (w, l) = if label_pair(block[first], block[second], &mut rng) {
            (first, second)
        } else {
            (second, first)
        };
        let chosen = responses[w].clone();
        let rejected = responses[l].clone();
        let ca = annotations(spec.annotation_mode, chosen.len(), &mut rng);
        let ra = annotations(spec.annotation_mode, rejected.len(), &mut rng);
        triples.push(PreferenceTriple::new(prompts[xi].clone(), chosen, rejected).with_annotations(ca, ra));
    }
    PreferenceDataset::new(spec.vocab, triples)
}

/// Everything needed to reproduce a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub spec: WorldSpec,
    pub rewards: RewardTable,
    pub generator: TabularPolicy,
}

impl World {
    pub fn build(spec: WorldSpec) -> Result<Self> {
        let rewards = sample_reward_table(&spec)?;
        let generator = spec.generator();
        Ok(Self {
            spec,
            rewards,
            generator,
        })
    }

    pub fn sample(&self) -> Result<PreferenceDataset> {
        sample_preferences(&self.rewards, &self.generator, &self.spec)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(scale: f64, mode: AnnotationMode) -> WorldSpec {
        WorldSpec {
            vocab: Vocabulary::new(2, 2).unwrap(),
            n_prompts: 2,
            reward_scale: scale,
            n_triples: 200,
            seed: 11,
            annotation_mode: mode,
        }
    }

    #[test]
    fn zero_scale_rewards_vanish() {
        let t = sample_reward_table(&spec(0.0, AnnotationMode::None)).unwrap();
        assert!(t.blocks().iter().all(|b| b.rewards.iter().all(|&r| r == 0.0)));
    }

    #[test]
    fn reward_moments() {
        let mut s = spec(1.7, AnnotationMode::None);
        s.vocab = Vocabulary::new(3, 9).unwrap();
        s.n_prompts = 1;
        let t = sample_reward_table(&s).unwrap();
        let r = &t.blocks()[0].rewards;
        assert!(r.len() >= 10_000);
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let sd = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.05 * 1.7, "mean {mean}");
        assert!((sd / 1.7 - 1.0).abs() < 0.05, "sd {sd}");
    }

    #[test]
    fn deterministic_and_distinct() {
        let w = World::build(spec(1.0, AnnotationMode::Random)).unwrap();
        let a = w.sample().unwrap();
        let b = World::build(spec(1.0, AnnotationMode::Random))
            .unwrap()
            .sample()
            .unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        assert!(a.triples().iter().all(|t| t.chosen != t.rejected));
        assert_eq!(a.len(), 200);
    }

    #[test]
    fn degenerate_generator_exhausts_retries() {
        let s = spec(1.0, AnnotationMode::None);
        let mut g = TabularPolicy::uniform(s.vocab);
        for x in s.prompts() {
            g.set_logits(&x, &[], vec![0.0, 800.0, 0.0]).unwrap();
            g.set_logits(&x, &[1], vec![800.0, 0.0, 0.0]).unwrap();
        }
        let r = sample_reward_table(&s).unwrap();
        assert!(matches!(sample_preferences(&r, &g, &s), Err(Error::Sampling(_))));
    }

    #[test]
    fn world_round_trips_through_json() {
        let w = World::build(spec(0.5, AnnotationMode::Ones)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("world.json");
        w.write_json(&p).unwrap();
        assert_eq!(World::read_json(&p).unwrap(), w);
    }
}
