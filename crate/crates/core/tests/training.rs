use midpo::datagen::{AnnotationMode, World, WorldSpec};
use midpo::losses::LossContext;
use midpo::train::{dice_iterate, joint_vs_fixed_rows, minimize_fixed_zeta, TrainConfig};
use midpo::{AlignmentConfig, PriorSpec, Vocabulary};

fn world(seed: u64, triples: usize) -> World {
    World::build(WorldSpec {
        vocab: Vocabulary::new(2, 2).unwrap(),
        n_prompts: 2,
        reward_scale: 1.5,
        n_triples: triples,
        seed,
        annotation_mode: AnnotationMode::None,
    })
    .unwrap()
}

#[test]
fn fixed_prior_descent_never_ends_above_start() {
    let w = world(1, 60);
    let data = w.sample().unwrap();
    let config = AlignmentConfig::with_beta(1.0);
    let ctx = LossContext::new(&w.generator, &config);
    let cfg = TrainConfig {
        steps: 200,
        restarts: 2,
        ..TrainConfig::default()
    };
    let r = minimize_fixed_zeta(&PriorSpec::Dpo, &data, &ctx, &cfg, 3).unwrap();
    assert_eq!(r.loss_curve.len(), 201);
    assert!(r.final_loss <= r.initial_loss());
    assert!(r.loss_curve.windows(2).all(|w| w[1] <= w[0] + 1e-15));
}

#[test]
fn three_dice_rounds_keep_the_equivalence() {
    let w = world(2, 90);
    let data = w.sample().unwrap();
    let config = AlignmentConfig::with_beta(0.8);
    let ctx = LossContext::new(&w.generator, &config);
    let cfg = TrainConfig {
        steps: 40,
        restarts: 1,
        ..TrainConfig::default()
    };
    let rounds = data.split_rounds(3).unwrap();
    let out = dice_iterate(&rounds, &ctx, &cfg, 0).unwrap();
    assert_eq!(out.len(), 3);
    for r in &out {
        assert!(r.equivalence_gap <= 1e-9);
        assert!(r.result.final_loss <= r.result.initial_loss());
    }
}

#[test]
fn joint_prior_is_never_worse_than_fixed() {
    let w = world(5, 40);
    let data = w.sample().unwrap();
    let config = AlignmentConfig::with_beta(1.0);
    let ctx = LossContext::new(&w.generator, &config);
    let cfg = TrainConfig {
        steps: 60,
        restarts: 3,
        ..TrainConfig::default()
    };
    for seed in 0..3 {
        let rows = joint_vs_fixed_rows(
            &data,
            &ctx,
            &cfg,
            &[PriorSpec::Dpo, PriorSpec::Rdpo, PriorSpec::Tdpo],
            seed,
        )
        .unwrap();
        for r in rows {
            assert!(r.holds, "{r:?}");
            assert!(r.joint_final <= r.fixed_final + 1e-8);
        }
    }
}
