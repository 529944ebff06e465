mod common;

use common::*;
use pppo::policy::{FeatureMap, PolicyParams};
use pppo::rollout::*;
use pppo::tasks::{sym, TaskInstance, Token, Vocab};
use pppo::SeedStream;
use proptest::prelude::*;
use rand::Rng;

fn instance() -> TaskInstance {
    TaskInstance {
        id: 1,
        prompt: vec![sym::QUESTION, sym::digit(3), sym::EQUALS],
        answer: vec![sym::digit(3)],
        difficulty: 1,
    }
}

fn rollout(len: usize) -> Rollout {
    Rollout { instance_id: 1, generated: vec![sym::SEP; len], old_logprobs: vec![-1.0; len], terminated_by_eos: false }
}

/// A policy that, whatever the context, puts nearly all mass on `t`.
fn near_delta(t: Token) -> PolicyParams {
    let map = FeatureMap::new(sym::STANDARD_SIZE, 1, 0).unwrap();
    let v = sym::STANDARD_SIZE;
    let mut w = vec![0.0; map.feature_dim() * v];
    w[t.index()] = 60.0;
    PolicyParams::from_weights(map, w).unwrap()
}

#[test]
fn prefix_examples() {
    assert_eq!(extract_prefix(&rollout(100), 0.15).unwrap().len(), 15);
    assert_eq!(extract_prefix(&rollout(5), 0.15).unwrap().len(), 1);
    assert_eq!(extract_prefix(&rollout(7), 1.0).unwrap().len(), 7);
    assert!(extract_prefix(&rollout(7), 0.0).is_err());
    assert!(extract_prefix(&rollout(7), 1.5).is_err());
}

#[test]
fn reward_examples() {
    let vocab = Vocab::standard();
    let inst = instance();
    let right = vec![sym::ANSWER, sym::digit(3), sym::EOS];
    let wrong = vec![sym::ANSWER, sym::digit(4), sym::EOS];
    let src = |c: bool| Rollout {
        instance_id: 1,
        generated: if c { right.clone() } else { wrong.clone() },
        old_logprobs: vec![0.0; 3],
        terminated_by_eos: true,
    };
    let prefix = [sym::ANSWER];
    let conts = |k: usize| -> Vec<Vec<Token>> {
        (0..8).map(|j| if j < k { right[1..].to_vec() } else { wrong[1..].to_vec() }).collect()
    };
    assert_eq!(accumulated_reward(&vocab, &inst, &conts(3), &src(true), &prefix), 4);
    assert_eq!(accumulated_reward(&vocab, &inst, &conts(0), &src(false), &prefix), 0);
    assert_eq!(accumulated_reward(&vocab, &inst, &conts(8), &src(true), &prefix), 9);
}

#[test]
fn group_shapes_and_sequence_count() {
    let vocab = Vocab::standard();
    let p = PolicyParams::random(FeatureMap::new(vocab.size(), 3, 6).unwrap(), 0.3, &mut seeded(1));
    let plan = GroupPlan { n: 8, g: 8, eta: 0.15, max_len: 12 };
    let groups =
        build_prefix_groups(&p, &vocab, &instance(), plan, &RewardConfig::default(), SeedStream::new(4)).unwrap();
    assert_eq!(groups.len(), 8);
    let sequences: usize = groups.iter().map(|g| 1 + g.continuations.len()).sum();
    assert_eq!(sequences, 72);
    for g in &groups {
        assert_eq!(g.prefix, g.source.generated[..retained_len(0.15, g.source.generated.len())]);
        assert!(g.reward as usize <= plan.g + 1);
        assert!(g.continuations.iter().all(|c| c.len() + g.prefix.len() <= plan.max_len));
    }
    let again =
        build_prefix_groups(&p, &vocab, &instance(), plan, &RewardConfig::default(), SeedStream::new(4)).unwrap();
    assert_eq!(groups, again);
}

#[test]
fn collapsed_policy_gives_identical_groups() {
    let vocab = Vocab::standard();
    let p = near_delta(sym::EOS);
    let rolls = sample_group(&p, &vocab, &instance(), 2, 6, SeedStream::new(0)).unwrap();
    assert_eq!(rolls[0].generated, rolls[1].generated);
    let plan = GroupPlan { n: 2, g: 1, eta: 0.5, max_len: 6 };
    let groups =
        build_prefix_groups(&p, &vocab, &instance(), plan, &RewardConfig::default(), SeedStream::new(0)).unwrap();
    assert_eq!(groups[0].reward, groups[1].reward);
    assert!(sample_group(&p, &vocab, &instance(), 1, 6, SeedStream::new(0)).is_err());
}

#[test]
fn forced_eos_completes_a_correct_prefix() {
    let vocab = Vocab::standard();
    let p = near_delta(sym::EOS);
    let prefix = [sym::ANSWER, sym::digit(3)];
    let conts = sample_continuations(&p, &vocab, &instance(), &prefix, 8, 10, SeedStream::new(2)).unwrap();
    assert_eq!(conts.len(), 8);
    assert!(conts.iter().all(|c| c == &[sym::EOS]));
    let src = Rollout {
        instance_id: 1,
        generated: vec![sym::ANSWER, sym::digit(3), sym::EOS],
        old_logprobs: vec![0.0; 3],
        terminated_by_eos: true,
    };
    assert_eq!(accumulated_reward(&vocab, &instance(), &conts, &src, &prefix), 9);
}

#[test]
fn high_entropy_streams_rarely_collide() {
    let vocab = Vocab::standard();
    let p = PolicyParams::zeros(FeatureMap::new(vocab.size(), 2, 2).unwrap());
    let rolls = sample_group(&p, &vocab, &instance(), 8, 8, SeedStream::new(5)).unwrap();
    // Under the uniform policy two 8-token draws collide with probability
    // at most (1/22)^1 per pair for the first token alone; full collisions
    // are far rarer.
    for i in 0..rolls.len() {
        for j in i + 1..rolls.len() {
            assert_ne!(rolls[i].generated, rolls[j].generated);
        }
    }
}

proptest! {
    #[test]
    fn reward_is_the_indicator_count(
        verdicts in prop::collection::vec(any::<bool>(), 1..=16),
        original in any::<bool>(),
    ) {
        let vocab = Vocab::standard();
        let inst = instance();
        let answer = |c: bool| if c { sym::digit(3) } else { sym::digit(7) };
        let prefix = [sym::SEP];
        let conts: Vec<Vec<Token>> = verdicts.iter().map(|&c| vec![sym::ANSWER, answer(c), sym::EOS]).collect();
        let src = Rollout { instance_id: 1, generated: vec![sym::SEP, sym::ANSWER, answer(original), sym::EOS], old_logprobs: vec![0.0; 4], terminated_by_eos: true };
        let r = accumulated_reward(&vocab, &inst, &conts, &src, &prefix);
        let brute = verdicts.iter().filter(|&&c| c).count() as u32 + u32::from(original);
        prop_assert_eq!(r, brute);
        prop_assert!(r as usize <= verdicts.len() + 1);
    }

    #[test]
    fn retained_len_bounds(len in 1usize..500, eta in 0.001f64..=1.0) {
        let n = retained_len(eta, len);
        prop_assert!(n >= 1 && n <= len);
        prop_assert!(n as f64 <= (eta * len as f64 + 1e-9).max(1.0));
    }
}

#[test]
fn batch_groups_keep_instance_order() {
    let vocab = Vocab::standard();
    let p = PolicyParams::random(FeatureMap::new(vocab.size(), 3, 6).unwrap(), 0.3, &mut seeded(3));
    let mut rng = seeded(4);
    let insts: Vec<TaskInstance> = (0..6)
        .map(|id| TaskInstance {
            id,
            prompt: vec![sym::QUESTION, sym::digit(rng.gen_range(0..10))],
            answer: vec![sym::digit(1)],
            difficulty: 1,
        })
        .collect();
    let plan = GroupPlan { n: 3, g: 2, eta: 0.25, max_len: 8 };
    let all = build_batch_groups(&p, &vocab, &insts, plan, &RewardConfig::default(), SeedStream::new(8)).unwrap();
    for (k, groups) in all.iter().enumerate() {
        let solo = build_prefix_groups(
            &p,
            &vocab,
            &insts[k],
            plan,
            &RewardConfig::default(),
            SeedStream::new(8).child(k as u64),
        )
        .unwrap();
        assert_eq!(groups, &solo);
    }
}
