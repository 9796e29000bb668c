#![allow(dead_code)]

use midpo::datagen::{sample_preferences, sample_reward_table, AnnotationMode, WorldSpec};
use midpo::{AlignmentConfig, PreferenceDataset, TabularPolicy, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random policy triple, configuration and annotated dataset.
pub struct Draw {
    pub vocab: Vocabulary,
    pub reference: TabularPolicy,
    pub llm: TabularPolicy,
    pub prev: TabularPolicy,
    pub config: AlignmentConfig,
    pub data: PreferenceDataset,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixed lengths, strictly positive `γ` and `len_coeff`, random masks and
/// weights, absolute labels.
pub fn draw(seed: u64, n_triples: usize) -> Draw {
    let mut r = rng(seed);
    let vocab = Vocabulary::new(r.random_range(2..=3), r.random_range(2..=3)).unwrap();
    let spec = WorldSpec {
        vocab,
        n_prompts: r.random_range(1..=2),
        reward_scale: 1.0,
        n_triples,
        seed: r.random(),
        annotation_mode: AnnotationMode::Random,
    };
    let prompts = spec.prompts();
    let scale = r.random_range(0.5..1.5);
    let reference = TabularPolicy::random_scaled(vocab, &prompts, r.random(), scale);
    let llm = TabularPolicy::random_scaled(vocab, &prompts, r.random(), scale);
    let prev = TabularPolicy::random_scaled(vocab, &prompts, r.random(), scale);
    let mut config = AlignmentConfig::with_beta(r.random_range(0.3..2.0));
    config.gamma = r.random_range(0.1..1.0);
    config.eta_exp = r.random_range(0.3..1.7);
    config.len_coeff = r.random_range(0.1..1.0);
    let rewards = sample_reward_table(&spec).unwrap();
    let data = sample_preferences(&rewards, &spec.generator(), &spec)
        .unwrap()
        .absolute_subset();
    Draw {
        vocab,
        reference,
        llm,
        prev,
        config,
        data,
    }
}

/// A random point of the open simplex.
pub fn simplex_point<R: Rng>(r: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -(r.random::<f64>().max(1e-12)).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}
