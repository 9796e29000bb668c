mod common;

use common::{draw, rng, simplex_point};
use midpo::infotheory::{i_g, mutual_information, optimal_variational, rate_distortion_objective, DiscreteChannel};
use midpo::losses::{equivalence_report, mean_sigmoid_loss, mi_dpo_loss, mi_margins_with, LossContext};
use midpo::numerics::{entropy, kl_divergence};
use midpo::optimal::{optimal_policy_closed_form, regularized_objective, RewardBlock, RewardTable};
use midpo::priors::log_zeta;
use midpo::{PriorKind, PriorSpec, TabularPolicy, Vocabulary};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn prompt_constant_shift_leaves_every_loss_unchanged() {
    for seed in 0..20 {
        let d = draw(seed, 30);
        let ctx = LossContext::new(&d.reference, &d.config).with_prev(&d.prev);
        for kind in PriorKind::VARIANTS {
            let spec = PriorSpec::from_kind(kind).unwrap();
            let plain = mi_dpo_loss(&d.llm, &spec, &ctx, &d.data).unwrap();
            let shifted = mi_margins_with(&d.llm, &d.data, d.config.alpha, |t, role, y| {
                let base = log_zeta(&spec, &ctx.prior_context(&d.llm, t, role), &t.prompt, y)?;
                Ok(base + 17.3 * t.prompt[0] as f64)
            })
            .unwrap();
            let gap = (plain - mean_sigmoid_loss(&shifted)).abs();
            assert!(gap <= 1e-12, "{kind} seed {seed}: gap {gap:e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_reduction_holds_on_random_draws(seed in 1000u64..100_000) {
        let d = draw(seed, 25);
        let ctx = LossContext::new(&d.reference, &d.config).with_prev(&d.prev);
        for row in equivalence_report(&d.llm, &ctx, &d.data).unwrap() {
            prop_assert!(row.passes(1e-9), "{:?}", row);
        }
    }

    #[test]
    fn closed_form_beats_random_policies(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let n = r.random_range(2..=14);
        let zeta = simplex_point(&mut r, n);
        let rewards: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let beta = r.random_range(0.3..3.0);
        let best = optimal_policy_closed_form(&zeta, &rewards, beta).unwrap();
        let top = regularized_objective(&best.probs, &rewards, &zeta, beta);
        for _ in 0..50 {
            let pi = simplex_point(&mut r, n);
            prop_assert!(regularized_objective(&pi, &rewards, &zeta, beta) <= top + 1e-12);
        }
    }
}

fn random_world(seed: u64) -> (Vocabulary, TabularPolicy, RewardTable, Vec<f64>) {
    let mut r = rng(seed);
    let vocab = Vocabulary::new(r.random_range(2..=3), r.random_range(1..=2)).unwrap();
    let n_prompts = r.random_range(1..=vocab.regular_size());
    let prompts: Vec<Vec<u32>> = (1..=n_prompts).map(|t| vec![t]).collect();
    let size = vocab.response_space_size() as usize;
    let blocks = prompts
        .iter()
        .map(|p| RewardBlock {
            prompt: p.clone(),
            rewards: (0..size).map(|_| StandardNormal.sample(&mut r)).collect(),
        })
        .collect();
    let table = RewardTable::new(&vocab, blocks).unwrap();
    let llm = TabularPolicy::random(vocab, &prompts, r.random());
    let p_x = simplex_point(&mut r, n_prompts as usize);
    (vocab, llm, table, p_x)
}

#[test]
fn rate_distortion_equals_min_over_priors() {
    for seed in 0..40 {
        let (_, llm, table, p_x) = random_world(seed);
        let beta = 0.5 + seed as f64 / 20.0;
        let rows: Vec<Vec<f64>> = table.prompts().map(|x| llm.sequence_distribution(x).unwrap()).collect();
        let reward: f64 = table
            .blocks()
            .iter()
            .zip(&rows)
            .zip(&p_x)
            .map(|((b, row), px)| px * row.iter().zip(&b.rewards).map(|(p, r)| p * r).sum::<f64>())
            .sum();
        let channel = DiscreteChannel::new(p_x.clone(), rows.clone()).unwrap();
        let zeta = optimal_variational(&channel);
        let penalty: f64 = rows
            .iter()
            .zip(&p_x)
            .map(|(row, px)| px * kl_divergence(row, &zeta))
            .sum();
        let min_form = reward - penalty / beta;
        let objective = rate_distortion_objective(&llm, &table, beta, &p_x).unwrap();
        assert!((min_form - objective).abs() <= 1e-10, "seed {seed}");

        let mut r = rng(seed + 77);
        for _ in 0..100 {
            let q = simplex_point(&mut r, channel.output_size());
            assert!(i_g(&channel, &q) >= penalty - 1e-12);
        }
        if mutual_information(&channel) > 1e-9 {
            let sharper = rate_distortion_objective(&llm, &table, beta * 2.0, &p_x).unwrap();
            assert!(sharper > objective);
        }
    }
}

#[test]
fn mutual_information_respects_the_data_bound() {
    for seed in 0..200 {
        let mut r = rng(seed);
        let nx = r.random_range(1..=5);
        let ny = r.random_range(2..=9);
        let p_x = simplex_point(&mut r, nx);
        let rows: Vec<Vec<f64>> = (0..nx).map(|_| simplex_point(&mut r, ny)).collect();
        let channel = DiscreteChannel::new(p_x.clone(), rows).unwrap();
        let mi = mutual_information(&channel);
        let h_y = entropy(&optimal_variational(&channel));
        assert!(mi >= 0.0);
        assert!(mi <= entropy(&p_x).min(h_y) + 1e-12, "seed {seed}");
    }
}

#[test]
fn prompt_independent_policy_with_zero_reward_scores_zero() {
    let vocab = Vocabulary::new(2, 2).unwrap();
    let size = vocab.response_space_size() as usize;
    let prompts = vec![vec![1], vec![2]];
    let mut llm = TabularPolicy::random(vocab, &prompts, 5);
    let shared = TabularPolicy::random(vocab, &[vec![1]], 9);
    for ((_, prefix), logits) in shared.entries() {
        llm.set_logits(&[2], prefix, logits.clone()).unwrap();
        llm.set_logits(&[1], prefix, logits.clone()).unwrap();
    }
    let blocks = prompts
        .iter()
        .map(|p| RewardBlock {
            prompt: p.clone(),
            rewards: vec![0.0; size],
        })
        .collect();
    let table = RewardTable::new(&vocab, blocks).unwrap();
    let value = rate_distortion_objective(&llm, &table, 1.3, &[0.4, 0.6]).unwrap();
    assert!(value.abs() <= 1e-12);
}
