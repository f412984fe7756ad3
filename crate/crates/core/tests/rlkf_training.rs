use dreamcatcher_core::embedder::{Embedder, EmbedderConfig};
use dreamcatcher_core::rlkf::{
    ppo_update, rollout, train_rlkf, train_toy_reward, Adam, Baseline, Policy, PpoConfig, ToyEnv, ToyEnvConfig, ToyRmConfig,
};

fn smoothed(xs: &[f64], window: usize) -> Vec<f64> {
    xs.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

#[test]
fn mean_reward_rises_over_training() {
    let env = ToyEnv::synthetic(&ToyEnvConfig::default()).unwrap();
    let embedder = Embedder::new(EmbedderConfig::hashed(128)).unwrap();
    let (rm, _) = train_toy_reward(&env, &embedder, &ToyRmConfig::default()).unwrap();
    let run = train_rlkf(&env, &rm, &PpoConfig::toy()).unwrap();
    let rewards: Vec<f64> = run.curve.iter().map(|p| p.mean_reward).collect();
    let s = smoothed(&rewards, 10);
    let (first, last) = (s[0], *s.last().unwrap());
    assert!(last >= first + 0.1, "smoothed reward {first:.3} -> {last:.3}");
}

#[test]
fn policy_rows_stay_normalized_after_updates() {
    let env = ToyEnv::synthetic(&ToyEnvConfig::default()).unwrap();
    let embedder = Embedder::new(EmbedderConfig::hashed(64)).unwrap();
    let (rm, _) = train_toy_reward(&env, &embedder, &ToyRmConfig::default()).unwrap();
    let cfg = PpoConfig {
        lr: 0.5,
        ..PpoConfig::toy()
    };
    let reference = Policy::template_prior(&env, cfg.prior_strength, 0);
    let mut policy = reference.clone();
    let mut baseline = Baseline::new(env.questions.len(), cfg.baseline_decay);
    let mut adam = Adam::new(policy.logits.len());
    for step in 0..20 {
        let trajs = rollout(&policy, &env, &rm, cfg.batch_size, cfg.guided_per_batch(), cfg.guidance_len, 9, step)
            .unwrap();
        ppo_update(&mut policy, &reference, &trajs, &mut baseline, &mut adam, cfg.lr, &cfg);
    }
    assert!(policy.logits.iter().all(|x| x.is_finite()));
    for bucket in 0..policy.buckets {
        for pos in 0..policy.max_len {
            for prev in 0..=policy.vocab_size {
                let p = policy.probs(bucket, pos, prev);
                let sum: f64 = p.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row ({bucket},{pos},{prev}) sums to {sum}");
                assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }
}
