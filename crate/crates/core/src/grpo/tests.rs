use proptest::prelude::*;

use super::*;
use crate::denoiser::DenoiserConfig;
use crate::optim::AdamConfig;
use crate::policy::{ar_rollout, SequenceLogProb};
use crate::rng::RngStream;
use crate::tasks::TaskSpec;

const SP: Specials = Specials { mask_id: 0, eos_id: 1 };

fn cfg(v: usize) -> DenoiserConfig {
    DenoiserConfig {
        vocab_size: v,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 16,
        init_std: 0.3,
    }
}

fn params64(seed: u64) -> Params<f64> {
    Params::<f64>::init(cfg(8), &mut derive_stream(seed, StreamKey::new("init", 0, 0, 0))).unwrap()
}

fn rng(i: u64) -> RngStream {
    derive_stream(21, StreamKey::new("grpo-test", i, 0, 0))
}

/// A group of rollouts from `p` with the given rewards.
fn group(p: &Params<f64>, query_id: u64, prompt: &[TokenId], rewards: &[f64], gen: usize) -> RolloutGroup {
    let rollouts: Vec<Rollout> = (0..rewards.len())
        .map(|i| ar_rollout(p, prompt, gen, 1.0, SP, &mut rng(query_id * 100 + i as u64)).unwrap())
        .collect();
    RolloutGroup::new(query_id, prompt.to_vec(), rollouts, rewards.to_vec()).unwrap()
}

fn groups(p: &Params<f64>) -> Vec<RolloutGroup> {
    vec![
        group(p, 0, &[2, 3], &[1.0, 0.0, 0.5, 0.0], 5),
        group(p, 1, &[4, 5, 6], &[0.0, 2.0, 1.0], 4),
    ]
}

#[test]
fn advantage_examples() {
    let (m, s, a) = compute_advantages(&[1.0, 0.0, 0.0, 1.0]);
    assert_eq!((m, s), (0.5, 0.5));
    assert_eq!(a, vec![1.0, -1.0, -1.0, 1.0]);
    assert_eq!(compute_advantages(&[0.7, 0.7, 0.7]).2, vec![0.0; 3]);
    assert_eq!(compute_advantages(&[1.0, 0.0]).2, vec![1.0, -1.0]);
}

#[test]
fn clipped_term_examples() {
    assert_eq!(clipped_term(1.0, 1.0, 0.2), 1.0);
    assert!((clipped_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
    assert!((clipped_term(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
}

#[test]
fn kl_examples() {
    assert_eq!(kl_token(-1.3, -1.3), 0.0);
    assert!((kl_token(-1.0, -0.5) - (0.5f64.exp() - 1.5)).abs() < 1e-15);
    assert!((kl_token(-1.0, -0.5) - 0.1487).abs() < 1e-4);
}

#[test]
fn gradient_equals_reinforce_at_old_policy() {
    let p = params64(1);
    let gs = groups(&p);
    let c = GrpoConfig::default();
    let loss = grpo_loss(&p, &gs, &c, 0).unwrap();
    assert_eq!(loss.clip_frac, 0.0);

    // Direct estimator: sum over tokens of A_i / (Q G |o_i|) * grad l_k, one token at a time.
    let mut direct = vec![0.0f64; p.len()];
    let mut value = 0.0;
    for g in &gs {
        let n = g.completions.len() as f64;
        for (i, comp) in g.completions.iter().enumerate() {
            let len = comp.effective_len();
            let w = g.advantages[i] / (gs.len() as f64 * n * len as f64);
            for k in 0..len {
                let req = [ScoreRequest {
                    prompt: &g.prompt,
                    completion: comp.tokens(),
                    position: k,
                }];
                let s = score_tokens(&p, &req, 0).unwrap();
                let gk = backward(&p, &s.cache, &s.dlogits(&[w]));
                for (d, x) in direct.iter_mut().zip(gk.as_slice()) {
                    *d += x;
                }
                value += w;
            }
        }
    }
    assert!((loss.objective - value).abs() < 1e-12);
    let max_err = loss.grad.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(max_err < 1e-6, "{max_err}");
    assert!(direct.iter().any(|&x| x.abs() > 1e-6));
}

#[test]
fn constant_rewards_give_zero_gradient() {
    let p = params64(2);
    let gs = vec![group(&p, 0, &[2, 3], &[1.0; 4], 5), group(&p, 1, &[4], &[0.0; 3], 4)];
    let loss = grpo_loss(&p, &gs, &GrpoConfig::default(), 0).unwrap();
    assert!(loss.grad.iter().all(|&g| g == 0.0));
    assert_eq!(loss.objective, 0.0);
}

fn objective(p: &Params<f64>, gs: &[RolloutGroup], c: &GrpoConfig) -> f64 {
    grpo_loss(p, gs, c, 0).unwrap().objective
}

fn check_fd(p: &Params<f64>, gs: &[RolloutGroup], c: &GrpoConfig) {
    let loss = grpo_loss(p, gs, c, 0).unwrap();
    let h = 1e-5;
    for idx in (0..p.len()).step_by(23) {
        let mut a = p.clone();
        a.as_mut_slice()[idx] += h;
        let mut b = p.clone();
        b.as_mut_slice()[idx] -= h;
        let fd = (objective(&a, gs, c) - objective(&b, gs, c)) / (2.0 * h);
        let an = loss.grad[idx];
        assert!((fd - an).abs() <= 1e-7 + 1e-4 * fd.abs(), "{idx}: fd {fd} analytic {an}");
    }
}

#[test]
fn saturated_clip_tokens_have_zero_gradient() {
    let p = params64(3);
    let mut g = group(&p, 0, &[2, 3], &[1.0, 0.0], 4);
    // Pretend the old policy was far less likely to emit completion 0: rho > 1 + eps, A > 0.
    for l in &mut g.old_logprobs[0] {
        *l -= 1.0;
    }
    // And completion 1 (A < 0) far more likely: rho < 1 - eps.
    for l in &mut g.old_logprobs[1] {
        *l += 1.0;
    }
    let c = GrpoConfig::default();
    let gs = vec![g];
    let loss = grpo_loss(&p, &gs, &c, 0).unwrap();
    assert_eq!(loss.clip_frac, 1.0);
    assert!(loss.grad.iter().all(|&x| x == 0.0));
    check_fd(&p, &gs, &c);
}

#[test]
fn objective_gradient_matches_finite_differences_with_kl() {
    let p = params64(4);
    let mut gs = groups(&p);
    // Move the old policy slightly so ratios differ from one, some clipped.
    for (j, l) in gs[0].old_logprobs[1].iter_mut().enumerate() {
        *l += 0.1 * (j as f64 - 2.0);
    }
    let c = GrpoConfig {
        kl_beta: 0.3,
        ..GrpoConfig::default()
    };
    check_fd(&p, &gs, &c);
    let c = GrpoConfig {
        entropy_top_frac: 0.25,
        ..GrpoConfig::default()
    };
    check_fd(&p, &gs, &c);
}

#[test]
fn zero_beta_matches_kl_free_objective() {
    let p = params64(5);
    let gs = groups(&p);
    let c = GrpoConfig::default();
    let loss = grpo_loss(&p, &gs, &c, 0).unwrap();
    let mut manual = 0.0;
    for g in &gs {
        for (i, comp) in g.completions.iter().enumerate() {
            let lp = crate::policy::ar_sequence_logprob(&p, &g.prompt, comp.tokens(), 0).unwrap();
            let len = comp.effective_len();
            let s: f64 = (0..len)
                .map(|k| clipped_term((lp.per_token[k] - g.old_logprobs[i][k]).exp(), g.advantages[i], 0.2))
                .sum();
            manual += s / (len as f64 * g.completions.len() as f64 * gs.len() as f64);
        }
    }
    assert!((loss.objective - manual).abs() < 1e-12);
}

#[test]
fn padding_past_eos_does_not_matter() {
    let p = params64(6);
    let old = SequenceLogProb::from_tokens(vec![-0.5, -0.7, -0.2, -1.0, -1.5]);
    let mk = |tokens: Vec<TokenId>| Rollout {
        completion: Completion::new(tokens, 1, 0).unwrap(),
        logprob: old.clone(),
        entropies: vec![0.3; 5],
    };
    let a = RolloutGroup::new(0, vec![2, 3], vec![mk(vec![4, 1, 1, 1, 1]), mk(vec![5, 6, 1, 2, 2])], vec![1.0, 0.0]).unwrap();
    let b = RolloutGroup::new(0, vec![2, 3], vec![mk(vec![4, 1, 7, 3, 5]), mk(vec![5, 6, 1, 1, 1])], vec![1.0, 0.0]).unwrap();
    assert_eq!(a.completions[0].effective_len(), 2);
    let c = GrpoConfig::default();
    let la = grpo_loss(&p, &[a], &c, 0).unwrap();
    let lb = grpo_loss(&p, &[b], &c, 0).unwrap();
    assert_eq!(la.objective, lb.objective);
    assert_eq!(la.grad, lb.grad);
}

#[test]
fn top_entropy_selection() {
    let r = Rollout {
        completion: Completion::new(vec![2, 3, 4, 5, 6, 7, 1, 1], 1, 0).unwrap(),
        logprob: SequenceLogProb::from_tokens(vec![-1.0; 8]),
        entropies: vec![0.1, 0.9, 0.5, 0.9, 0.2, 0.0, 0.05, 3.0],
    };
    let g = RolloutGroup::new(0, vec![2], vec![r.clone(), r], vec![0.0, 1.0]).unwrap();
    assert_eq!(g.selected_positions(0, 1.0), (0..7).collect::<Vec<_>>());
    // ceil(0.25 * 7) = 2; position 7 is past EOS and never selected.
    assert_eq!(g.selected_positions(0, 0.25), vec![1, 3]);
    assert_eq!(g.selected_positions(0, 0.5), vec![1, 2, 3, 4]);
}

#[test]
fn config_validation() {
    assert!(GrpoConfig::default().validate().is_ok());
    let d = GrpoConfig::default();
    assert_eq!((d.group_size, d.lr, d.temperature, d.kl_beta, d.update_steps), (16, 5e-6, 1.0, 0.0, 1));
    assert!(GrpoConfig { group_size: 1, ..d }.validate().is_err());
    assert!(GrpoConfig { clip_eps: 1.0, ..d }.validate().is_err());
    assert!(GrpoConfig { kl_beta: -0.1, ..d }.validate().is_err());
    assert!(GrpoConfig { entropy_top_frac: 0.0, ..d }.validate().is_err());
}

fn dag_setup() -> (DenoiserParams, Vec<Instance>) {
    let spec = TaskSpec::dag_path(6, 0).unwrap();
    let (instances, _) = spec.generate(8).unwrap();
    let c = DenoiserConfig {
        vocab_size: spec.vocabulary().size(),
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 32,
        init_std: 0.3,
    };
    // A short pretraining run so rollouts earn varied rewards.
    let (_, corpus) = spec.generate_range(100, 200).unwrap();
    let pc = crate::diffusion::PretrainConfig {
        steps: 150,
        batch_size: 16,
        lr: 1e-2,
        gen_budget: 6,
    };
    let (p, _) = crate::diffusion::pretrain(c, &corpus, &pc, SP.mask_id, SP.eos_id, 0, |_| {}).unwrap();
    (p, instances)
}

#[test]
fn greedy_collapse_gives_zero_update() {
    let (mut p, instances) = dag_setup();
    let before = p.clone();
    let c = GrpoConfig {
        group_size: 2,
        temperature: 0.0,
        queries_per_update: 2,
        gen_budget: 6,
        lr: 1e-3,
        ..GrpoConfig::default()
    };
    let mut opt = AdamW::new(AdamConfig::with_lr(c.lr), p.len());
    let log = train_rl(&mut p, &mut opt, &instances, &c, SP, 1, 0..1, |_| Ok(())).unwrap();
    assert_eq!(p, before);
    assert_eq!(log[0].objective, 0.0);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (p0, instances) = dag_setup();
    let c = GrpoConfig {
        group_size: 4,
        queries_per_update: 2,
        gen_budget: 6,
        lr: 1e-2,
        ..GrpoConfig::default()
    };
    let mut a = p0.clone();
    let mut opt_a = AdamW::new(AdamConfig::with_lr(c.lr), a.len());
    let log_a = train_rl(&mut a, &mut opt_a, &instances, &c, SP, 9, 0..4, |_| Ok(())).unwrap();

    let mut b = p0.clone();
    let mut opt_b = AdamW::new(AdamConfig::with_lr(c.lr), b.len());
    let mut lines = 0;
    train_rl(&mut b, &mut opt_b, &instances, &c, SP, 9, 0..2, |pr| {
        lines += pr.groups.iter().map(|g| g.log_lines(pr.metrics.update).len()).sum::<usize>();
        Ok(())
    })
    .unwrap();
    assert_eq!(lines, 2 * 2 * 4);
    let json = serde_json::to_string(&opt_b).unwrap();
    let mut opt_b: AdamW = serde_json::from_str(&json).unwrap();
    let log_b = train_rl(&mut b, &mut opt_b, &instances, &c, SP, 9, 2..4, |_| Ok(())).unwrap();
    assert_eq!(a, b);
    for (x, y) in log_a[2..].iter().zip(&log_b) {
        assert_eq!((x.update, x.mean_reward, x.objective), (y.update, y.mean_reward, y.objective));
    }
    assert_ne!(a, p0);
}

proptest! {
    #[test]
    fn kl_is_nonnegative(a in -20.0f64..0.0, b in -20.0f64..0.0) {
        prop_assert!(kl_token(a, b) >= 0.0);
    }

    #[test]
    fn advantages_preserve_order_and_center(rewards in proptest::collection::vec(0.0f64..2.0, 2..20)) {
        let (_, std, adv) = compute_advantages(&rewards);
        if std >= STD_FLOOR {
            prop_assert!(adv.iter().sum::<f64>().abs() < 1e-9);
            for i in 0..rewards.len() {
                for j in 0..rewards.len() {
                    if rewards[i] > rewards[j] {
                        prop_assert!(adv[i] > adv[j]);
                    }
                }
            }
        } else {
            prop_assert!(adv.iter().all(|&a| a == 0.0));
        }
    }
}
