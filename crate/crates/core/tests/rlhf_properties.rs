#[allow(dead_code)]
#[path = "support/tiny.rs"]
mod tiny;

use proptest::prelude::*;
use pwff_core::fed::{Federation, Phase, StrategyName};
use pwff_core::model::{LanguageModel, ModelConfig, ParamGroup, ScoreConfig};
use pwff_core::optim::Adam;
use pwff_core::rlhf::{
    gae_advantages, ppo_update, rollout, sequence_logprobs, CriticPair, PersonalizedSignal, PpoConfig, RewardModelPair,
};
use pwff_core::rng;
use rand::Rng;

fn tuned_lm(seed: u64) -> LanguageModel {
    let cfg = ModelConfig::default();
    let mut m = LanguageModel::new(&cfg, seed).unwrap().insert_peft(&cfg.peft(), seed).unwrap();
    for id in m.params().ids_in(&[ParamGroup::Adapter, ParamGroup::Lora]) {
        let mut r = rng::stream(seed, "pert", id.index() as u64);
        for v in m.params_mut().data_mut(id) {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    m
}

fn scored_rms(seed: u64) -> RewardModelPair {
    let mut rms = RewardModelPair::new(&ScoreConfig::default().arch(20, 12), seed).unwrap();
    for (k, m) in [&mut rms.helpful, &mut rms.harmless].into_iter().enumerate() {
        let id = m.params().id("head.w").unwrap();
        let mut r = rng::stream(seed, "head", k as u64);
        for v in m.params_mut().data_mut(id) {
            *v = r.gen_range(-1.0..1.0);
        }
    }
    rms
}

fn prompts(seed: u64, n: usize) -> Vec<Vec<usize>> {
    let mut r = rng::stream(seed, "prompts", 0);
    (0..n).map(|_| vec![r.gen_range(2..5), r.gen_range(5..20), r.gen_range(5..20), 1]).collect()
}

#[test]
fn terminal_rewards_and_logprobs_rescore_independently() {
    let policy = tuned_lm(1);
    let rms = scored_rms(2);
    let trajs = rollout(&policy, &policy, &rms, &prompts(3, 12), &PpoConfig::default(), &mut rng::stream(4, "roll", 0))
        .unwrap();
    assert!(!trajs.is_empty());
    for t in &trajs {
        let h = rms.helpful.score(&t.prompt, t.response()).unwrap();
        let x = rms.harmless.score(&t.prompt, t.response()).unwrap();
        assert!((h - t.r_helpful).abs() <= 1e-5 * (1.0 + h.abs()), "{} vs {}", h, t.r_helpful);
        assert!((x - t.r_harmless).abs() <= 1e-5 * (1.0 + x.abs()));
        let alone = sequence_logprobs(&policy, &[(&t.prompt[..], &t.actions[..])]).unwrap();
        for (a, b) in alone[0].iter().zip(&t.logprobs) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn identical_reference_gives_zero_kl_and_zero_coeff_gives_zero_shaping() {
    let policy = tuned_lm(5);
    let reference = policy.clone();
    let trajs = rollout(
        &policy,
        &reference,
        &scored_rms(1),
        &prompts(6, 10),
        &PpoConfig::default(),
        &mut rng::stream(7, "roll", 0),
    )
    .unwrap();
    for t in &trajs {
        assert!(t.kl_rewards(0.02).iter().all(|&k| k == 0.0));
        let r = t.step_rewards(1.5, 0.0);
        assert!(r[..r.len() - 1].iter().all(|&v| v == 0.0));
        assert_eq!(*r.last().unwrap(), 1.5);
    }
}

#[test]
fn helpful_only_weights_ignore_the_harmless_side() {
    let rms = scored_rms(8);
    let policy0 = tuned_lm(9);
    let reference =
        LanguageModel::new(&ModelConfig::default(), 9).unwrap().insert_peft(&ModelConfig::default().peft(), 9).unwrap();
    let trajs =
        rollout(&policy0, &reference, &rms, &prompts(10, 16), &PpoConfig::default(), &mut rng::stream(11, "roll", 0))
            .unwrap();
    let run = |perturb: bool| {
        let mut critics = CriticPair::from_rewards(&rms);
        let mut trajs = trajs.clone();
        if perturb {
            let id = critics.harmless.params().id("head.w").unwrap();
            for v in critics.harmless.params_mut().data_mut(id) {
                *v += 3.0;
            }
            for t in &mut trajs {
                t.r_harmless = -7.0 * t.r_harmless + 2.0;
            }
        }
        let mut policy = policy0.clone();
        let mut opt = Adam::default();
        let mut copts: [Adam; 2] = Default::default();
        ppo_update(
            &mut policy,
            &mut opt,
            &mut critics,
            &mut copts,
            &trajs,
            PersonalizedSignal::new((1.0, 0.0)),
            &PpoConfig::default(),
        )
        .unwrap();
        (policy.params().hash(&ParamGroup::ALL), critics.helpful.params().hash(&ParamGroup::ALL))
    };
    let (p0, c0) = run(false);
    assert_ne!(p0, policy0.params().hash(&ParamGroup::ALL));
    assert_eq!(run(true), (p0, c0));
}

#[test]
fn critics_start_from_reward_weights() {
    let rms = scored_rms(12);
    let c = CriticPair::from_rewards(&rms);
    for (r, c) in [(&rms.helpful, &c.helpful), (&rms.harmless, &c.harmless)] {
        assert_eq!(c.group(), ParamGroup::CriticHead);
        for (a, b) in r.params().entries().iter().zip(c.params().entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data);
        }
    }
}

#[test]
fn reward_models_stay_frozen_through_alignment() {
    let mut fed = Federation::new(tiny::tiny_sim(3), StrategyName::Pwff, 6).unwrap();
    fed.run_phase(Phase::Instruct).unwrap();
    fed.run_phase(Phase::Reward).unwrap();
    let server = fed.server.reward.as_ref().unwrap().hash();
    let policies: Vec<u64> = fed.clients.iter().map(|c| c.model.params().hash(&ParamGroup::ALL)).collect();
    let reps = fed.run_phase(Phase::Align).unwrap();
    assert_eq!(reps.len(), 2);
    assert_eq!(fed.server.reward.as_ref().unwrap().hash(), server);
    for (c, before) in fed.clients.iter().zip(&policies) {
        assert_eq!(c.reward.as_ref().unwrap().hash(), server);
        assert_ne!(c.model.params().hash(&ParamGroup::ALL), *before);
        assert_eq!(
            c.model.params().hash(&[ParamGroup::Base]),
            c.reference.as_ref().unwrap().params().hash(&[ParamGroup::Base])
        );
    }
}

#[test]
fn single_helpful_strategy_uploads_one_reward_model() {
    let mut fed = Federation::new(tiny::tiny_sim(2), StrategyName::Sfl, 6).unwrap();
    fed.run_phase(Phase::Instruct).unwrap();
    let reps = fed.run_phase(Phase::Reward).unwrap();
    let rm_bits = 32 * fed.server.reward.as_ref().unwrap().helpful.params().total_count() as u64;
    assert_eq!(reps[0].bits(), 2 * rm_bits);
    let mut dual = Federation::new(tiny::tiny_sim(2), StrategyName::Pwff, 6).unwrap();
    dual.run_phase(Phase::Instruct).unwrap();
    assert_eq!(dual.run_phase(Phase::Reward).unwrap()[0].bits(), 4 * rm_bits);
}

fn gae_oracle(r: &[f64], v: &[f64], g: f64, l: f64) -> Vec<f64> {
    let mut adv = vec![0.0; r.len()];
    let mut next = 0.0;
    for t in (0..r.len()).rev() {
        next = r[t] + g * v[t + 1] - v[t] + g * l * next;
        adv[t] = next;
    }
    adv
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gae_matches_recursion(
        r in prop::collection::vec(-3.0f32..3.0, 1..=10),
        v_seed in any::<u64>(),
        g in 0.5f32..=1.0,
        l in 0.0f32..=1.0,
    ) {
        let mut rg = rng::stream(v_seed, "v", 0);
        let mut v: Vec<f32> = (0..r.len()).map(|_| rg.gen_range(-2.0..2.0)).collect();
        v.push(0.0);
        let (adv, ret) = gae_advantages(&r, &v, g, l).unwrap();
        let rf: Vec<f64> = r.iter().map(|&x| x as f64).collect();
        let vf: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let want = gae_oracle(&rf, &vf, g as f64, l as f64);
        for t in 0..r.len() {
            prop_assert!((adv[t] as f64 - want[t]).abs() <= 1e-6 * (1.0 + want[t].abs()));
            prop_assert!((ret[t] as f64 - (want[t] + vf[t])).abs() <= 1e-6 * (1.0 + want[t].abs() + vf[t].abs()));
        }
    }
}
