#![allow(dead_code)]

use pppo::objective::{BatchItem, StepBatch};
use pppo::policy::{sample_sequence, snapshot, FeatureMap, PolicyParams};
use pppo::rng::StreamRng;
use pppo::rollout::{retained_len, PrefixGroup, Rollout};
use pppo::tasks::{TaskInstance, Token, Vocab};
use pppo::SeedStream;
use rand::Rng;

/// `a b c d ANS EOS`.
pub fn small_vocab() -> Vocab {
    Vocab::new(["a", "b", "c", "d", "ANS", "EOS"].map(String::from).to_vec(), Token(4), Token(5)).unwrap()
}

pub fn small_map() -> FeatureMap {
    FeatureMap::new(6, 2, 4).unwrap().with_conjunctions(2).unwrap()
}

pub fn random_instance(id: u64, rng: &mut StreamRng) -> TaskInstance {
    let len = rng.gen_range(1..4);
    TaskInstance {
        id,
        prompt: (0..len).map(|_| Token(rng.gen_range(0..4))).collect(),
        answer: vec![Token(rng.gen_range(0..4))],
        difficulty: 1,
    }
}

/// A batch sampled from `old` with random rewards in `0..=g+1`.
pub fn random_batch(old: &PolicyParams, eta: f64, items: usize, n: usize, g: u32, rng: &mut StreamRng) -> StepBatch {
    let eos = small_vocab().eos();
    let items = (0..items as u64)
        .map(|id| {
            let instance = random_instance(id, rng);
            let groups = (0..n)
                .map(|_| {
                    let max_len = rng.gen_range(1..9);
                    let gen = sample_sequence(old, &instance.prompt, None, eos, max_len, rng).unwrap();
                    let source = Rollout {
                        instance_id: id,
                        generated: gen.tokens,
                        old_logprobs: gen.logprobs,
                        terminated_by_eos: gen.terminated_by_eos,
                    };
                    let prefix = source.generated[..retained_len(eta, source.generated.len())].to_vec();
                    PrefixGroup {
                        source,
                        prefix,
                        continuations: Vec::new(),
                        reward: rng.gen_range(0..=g + 1),
                        source_correct: rng.gen_bool(0.5),
                        format_bonus: 0.0,
                        eta_used: eta,
                    }
                })
                .collect();
            BatchItem { instance, groups }
        })
        .collect();
    StepBatch { items, eta, snapshot: snapshot(old) }
}

/// `base` plus Gaussian-ish noise of the given scale.
pub fn perturbed(base: &PolicyParams, scale: f64, rng: &mut StreamRng) -> PolicyParams {
    let mut p = base.clone();
    p.weights_mut().iter_mut().for_each(|w| *w += scale * (rng.gen::<f64>() - rng.gen::<f64>()) * 2.0);
    p
}

pub fn seeded(seed: u64) -> StreamRng {
    SeedStream::new(seed).rng()
}
