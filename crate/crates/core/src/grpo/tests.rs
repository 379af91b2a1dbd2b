use super::*;
use crate::autograd::{finite_difference, max_relative_error};
use crate::error::Error;
use crate::params::ParamStore;
use proptest::prelude::*;
use rand::Rng;

fn rollout(group: u32, reward: f64, actor: Vec<Vec<f64>>, old: Vec<Vec<f64>>) -> Rollout {
    let t = actor.len();
    let l = actor.first().map_or(0, |a| a.len());
    Rollout {
        group,
        reward,
        actions: vec![vec![0; l]; t],
        actor_prob: actor.iter().map(|a| math::exp(a[0])).collect(),
        sampler_prob: old.iter().map(|a| math::exp(a[0])).collect(),
        actor_logp: actor,
        old_logp: old,
        entropy: 1.0,
    }
}

fn with_entropy(entropy: f64, sampler: Vec<f64>, actor: Vec<f64>) -> Rollout {
    let n = sampler.len();
    Rollout {
        group: 0,
        reward: 0.0,
        actions: vec![vec![0]; n],
        actor_logp: actor.iter().map(|p| vec![math::ln(*p)]).collect(),
        old_logp: sampler.iter().map(|p| vec![math::ln(*p)]).collect(),
        sampler_prob: sampler,
        actor_prob: actor,
        entropy,
    }
}

fn random_rollouts(seed: u64, n: usize, t: usize, levels: usize, spread: f64) -> Vec<Rollout> {
    let mut rng = math::rng(seed);
    (0..n)
        .map(|i| {
            let actor: Vec<Vec<f64>> = (0..t).map(|_| (0..levels).map(|_| -rng.gen_range(0.1..3.0)).collect()).collect();
            let old = actor.iter().map(|a| a.iter().map(|x| x + rng.gen_range(-spread..spread)).collect()).collect();
            rollout((i / 2) as u32, rng.gen_range(0.0..1.0), actor, old)
        })
        .collect()
}

// straightforward single-level objective written out independently
fn single_level_oracle(rollouts: &[Rollout], adv: &[f64], level: usize, eps: f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (r, a) in rollouts.iter().zip(adv) {
        for t in 0..r.len() {
            let ratio = (r.actor_logp[t][level] - r.old_logp[t][level]).exp();
            let clipped = ratio.max(1.0 - eps).min(1.0 + eps);
            total += (ratio * a).min(clipped * a);
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn constant_rewards_give_zero_advantage() {
    let a = group_advantages(&[vec![1.0; 4]]).unwrap();
    assert_eq!(a, vec![vec![0.0; 4]]);
}

#[test]
fn two_point_group_normalizes_to_unit() {
    let a = group_advantages(&[vec![0.0, 2.0]]).unwrap();
    assert!((a[0][0] + 1.0).abs() < 1e-7 && (a[0][1] - 1.0).abs() < 1e-7);
}

#[test]
fn singleton_group_is_rejected() {
    assert!(matches!(group_advantages(&[vec![1.0, 2.0], vec![3.0]]), Err(Error::Config(_))));
    let mut rs = random_rollouts(1, 3, 2, 1, 0.1);
    rs[2].group = 9;
    assert!(matches!(rollout_advantages(&rs), Err(Error::Config(m)) if m.contains('9')));
}

#[test]
fn unit_ratio_objective_is_advantage_times_weight_sum() {
    let lp = vec![vec![-0.5, -1.0, -2.0, -0.1]; 3];
    let rs = vec![rollout(0, 0.0, lp.clone(), lp.clone()), rollout(0, 1.0, lp.clone(), lp)];
    let cfg = GrpoConfig { level_weights: Some(vec![0.1, 0.2, 0.3, 0.4]), ..Default::default() };
    let adv = [0.7, -0.7];
    // every token has ratio 1; mean over tokens of Â·Σw
    let v = grpo_gen_loss(&rs, &adv, &cfg, None).unwrap();
    assert!((v - 0.0).abs() < 1e-12);
    let v = grpo_gen_loss(&rs[..1], &adv[..1], &cfg, None).unwrap();
    assert!((v - 0.7).abs() < 1e-12);
}

#[test]
fn large_ratio_is_clipped() {
    let r = rollout(0, 0.0, vec![vec![10f64.ln() - 3.0]], vec![vec![-3.0]]);
    let cfg = GrpoConfig { level_weights: Some(vec![0.5]), ..Default::default() };
    let v = grpo_gen_loss(&[r], &[2.0], &cfg, None).unwrap();
    assert!((v - 1.2 * 2.0 * 0.5).abs() < 1e-12, "{v}");
}

#[test]
fn one_hot_weights_reduce_to_single_level() {
    let rs = random_rollouts(3, 6, 5, 4, 0.6);
    let adv = rollout_advantages(&rs).unwrap();
    let cfg = GrpoConfig { level_weights: Some(vec![0.0, 0.0, 0.0, 1.0]), ..Default::default() };
    let v = grpo_gen_loss(&rs, &adv, &cfg, None).unwrap();
    let o = single_level_oracle(&rs, &adv, 3, 0.2);
    assert!((v - o).abs() < 1e-12, "{v} vs {o}");
}

#[test]
fn default_weights_are_uniform() {
    let rs = random_rollouts(4, 4, 3, 4, 0.6);
    let adv = rollout_advantages(&rs).unwrap();
    let v = grpo_gen_loss(&rs, &adv, &GrpoConfig::default(), None).unwrap();
    let o: f64 = (0..4).map(|l| single_level_oracle(&rs, &adv, l, 0.2)).sum::<f64>() / 4.0;
    assert!((v - o).abs() < 1e-12);
}

#[test]
fn zero_old_probability_names_the_rollout() {
    let mut rs = random_rollouts(5, 4, 2, 2, 0.1);
    rs[2].old_logp[1][1] = f64::NEG_INFINITY;
    let err = grpo_gen_loss(&rs, &[0.0; 4], &GrpoConfig::default(), None).unwrap_err();
    assert!(matches!(&err, Error::Input(m) if m.contains("rollout 2")), "{err}");
}

#[test]
fn entropy_outlier_is_dropped() {
    let rs: Vec<Rollout> = [1.0, 1.1, 0.9, 5.0].iter().map(|&h| with_entropy(h, vec![0.5], vec![0.5])).collect();
    let cfg = GrpoConfig { entropy_n: 1.0, ..Default::default() };
    let f = filter_sequences(&rs, &cfg).unwrap();
    assert_eq!(f.keep, vec![true, true, true, false]);
    assert!((f.entropy_mean - 2.0).abs() < 1e-12);
    // population std: sqrt((1 + 0.81 + 1.21 + 9) / 4)
    assert!((f.entropy_std - (12.02f64 / 4.0).sqrt()).abs() < 1e-12);
    assert!(matches!(f.reasons[3][..], [DropReason::Entropy { .. }]));
}

#[test]
fn mismatch_token_drops_its_sequence() {
    let rs = vec![
        with_entropy(1.0, vec![0.3, 0.45, 0.2], vec![0.31, 0.01, 0.2]),
        with_entropy(1.0, vec![0.3, 0.5], vec![0.3, 0.5]),
    ];
    let f = filter_sequences(&rs, &GrpoConfig { delta: 0.4, ..Default::default() }).unwrap();
    assert_eq!(f.keep, vec![false, true]);
    match f.reasons[0][..] {
        [DropReason::Divergence { token, diff }] => {
            assert_eq!(token, 1);
            assert!((diff - 0.44).abs() < 1e-12);
        }
        ref other => panic!("{other:?}"),
    }
}

#[test]
fn homogeneous_batch_keeps_everything() {
    let rs = vec![with_entropy(2.0, vec![0.4, 0.4], vec![0.4, 0.4]); 5];
    let f = filter_sequences(&rs, &GrpoConfig::default()).unwrap();
    assert_eq!(f.kept(), 5);
    assert_eq!(f.entropy_std, 0.0);
}

#[test]
fn filter_needs_two_sequences() {
    let rs = vec![with_entropy(2.0, vec![0.4], vec![0.4])];
    assert!(filter_sequences(&rs, &GrpoConfig::default()).is_err());
}

#[test]
fn und_loss_without_drops_matches_unfiltered() {
    let mut rs = random_rollouts(6, 4, 3, 1, 0.5);
    for r in &mut rs {
        r.sampler_prob = r.actor_prob.clone();
    }
    let adv = rollout_advantages(&rs).unwrap();
    let cfg = GrpoConfig { entropy_n: 1.0, ..Default::default() };
    let und = grpo_und_loss(&rs, &adv, &cfg).unwrap();
    let gen = grpo_gen_loss(&rs, &adv, &GrpoConfig { level_weights: Some(vec![1.0]), ..cfg }, None).unwrap();
    assert!(!und.skipped);
    assert_eq!(und.value.to_bits(), gen.to_bits());
}

#[test]
fn und_loss_all_dropped_is_skipped() {
    let rs = vec![with_entropy(1.0, vec![0.9], vec![0.1]); 3];
    let und = grpo_und_loss(&rs, &[1.0, -1.0, 0.0], &GrpoConfig::default()).unwrap();
    assert!(und.skipped);
    assert_eq!(und.value, 0.0);
}

#[test]
fn und_loss_mixed_batch_matches_partition_oracle() {
    let mut rs = random_rollouts(7, 6, 4, 3, 0.5);
    for r in &mut rs {
        r.sampler_prob = r.actor_prob.clone();
    }
    rs[1].sampler_prob[2] = rs[1].actor_prob[2] + 0.5;
    rs[4].entropy = 9.0;
    let adv = rollout_advantages(&rs).unwrap();
    let und = grpo_und_loss(&rs, &adv, &GrpoConfig::default()).unwrap();
    assert_eq!(und.filter.keep, vec![true, false, true, true, false, true]);
    let kept: Vec<usize> = vec![0, 2, 3, 5];
    let sub: Vec<Rollout> = kept.iter().map(|&i| rs[i].clone()).collect();
    let sub_adv: Vec<f64> = kept.iter().map(|&i| adv[i]).collect();
    let o = single_level_oracle(&sub, &sub_adv, 0, 0.2);
    assert!((und.value - o).abs() < 1e-12);
}

#[test]
fn reward_stub_counts_matches() {
    assert_eq!(synthetic_reward(&[1, 2, 3], &[1, 2, 3]), 1.0);
    assert_eq!(synthetic_reward(&[], &[1, 2]), 0.0);
    assert_eq!(synthetic_reward(&[1, 9, 3, 9], &[1, 2, 3, 4]), 0.5);
    assert_eq!(synthetic_reward(&[1, 2], &[1, 2, 3, 4]), 0.5);
    assert_eq!(synthetic_rewards(&[vec![5], vec![]], &[5]), vec![1.0, 0.0]);
}

#[test]
fn log_prob_table_reads_actions() {
    let lg = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
    let t = log_prob_table(&[lg.clone(), lg], &[vec![0, 1], vec![0, 0]]);
    assert!((t[0][0] - 0.5f64.ln()).abs() < 1e-12);
    assert!((t[1][0] - (1.0 - (1f64.exp() + 1.0).ln())).abs() < 1e-12);
}

/// Three sequences of logits per level, the middle one failing the divergence filter.
struct GradCase {
    store: ParamStore,
    rollouts: Vec<Rollout>,
    adv: Vec<f64>,
    keep: Vec<bool>,
}

fn grad_case(seed: u64) -> GradCase {
    let mut rng = math::rng(seed);
    let levels = [5usize, 4, 3];
    let len = 4;
    let mut store = ParamStore::new();
    let mut rollouts = Vec::new();
    for i in 0..3 {
        let mut actor = Vec::new();
        let mut old = Vec::new();
        for (l, &k) in levels.iter().enumerate() {
            let lg = Tensor::randn(len, k, 1.0, &mut rng);
            // some tokens far outside the clip window, some inside
            let shift = Tensor::randn(len, k, if l == 1 { 1.5 } else { 0.05 }, &mut rng);
            let mut o = lg.clone();
            o.add_assign(&shift);
            store.add(&format!("logits.{i}.{l}"), lg.clone());
            actor.push(lg);
            old.push(o);
        }
        let actions: Vec<Vec<u32>> = (0..len).map(|_| levels.iter().map(|&k| rng.gen_range(0..k as u32)).collect()).collect();
        let actor_logp = log_prob_table(&actor, &actions);
        let old_logp = log_prob_table(&old, &actions);
        let actor_prob: Vec<f64> = actor_logp.iter().map(|t| t[0].exp()).collect();
        let mut sampler_prob = actor_prob.clone();
        if i == 1 {
            sampler_prob[2] = (actor_prob[2] + 0.5).min(1.0);
            if sampler_prob[2] - actor_prob[2] <= 0.4 {
                sampler_prob[2] = actor_prob[2] - 0.5;
            }
        }
        rollouts.push(Rollout {
            group: 0,
            reward: i as f64,
            actions,
            actor_logp,
            old_logp,
            sampler_prob,
            actor_prob,
            entropy: 1.0,
        });
    }
    let adv = rollout_advantages(&rollouts).unwrap();
    let keep = filter_sequences(&rollouts, &GrpoConfig::default()).unwrap().keep;
    GradCase { store, rollouts, adv, keep }
}

fn objective(c: &GradCase, s: &ParamStore, keep: Option<&[bool]>) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let logits: Vec<Vec<Var>> =
        (0..3).map(|i| (0..3).map(|l| g.param(s, s.id(&format!("logits.{i}.{l}")).unwrap())).collect()).collect();
    let cfg = GrpoConfig { level_weights: Some(vec![0.5, 0.3, 0.2]), ..Default::default() };
    let out = gen_objective_graph(&mut g, &logits, &c.rollouts, &c.adv, &cfg, keep).unwrap().unwrap();
    let v = g.value(out).item();
    (v, g.backward(out).for_params(s))
}

#[test]
fn graph_objective_matches_scalar() {
    let c = grad_case(21);
    let cfg = GrpoConfig { level_weights: Some(vec![0.5, 0.3, 0.2]), ..Default::default() };
    let (v, _) = objective(&c, &c.store, None);
    let s = grpo_gen_loss(&c.rollouts, &c.adv, &cfg, None).unwrap();
    assert!((v - s).abs() < 1e-12);
    let (v, _) = objective(&c, &c.store, Some(&c.keep));
    let s = grpo_gen_loss(&c.rollouts, &c.adv, &cfg, Some(&c.keep)).unwrap();
    assert!((v - s).abs() < 1e-12);
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let c = grad_case(22);
    assert_eq!(c.keep, vec![true, false, true]);
    for keep in [None, Some(c.keep.as_slice())] {
        let (_, analytic) = objective(&c, &c.store, keep);
        let numeric = finite_difference(&c.store, |s| objective(&c, s, keep).0, 1e-5);
        let err = max_relative_error(&analytic, &numeric, 1e-9);
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn dropped_sequences_get_exactly_zero_gradient() {
    let c = grad_case(23);
    assert_eq!(c.keep, vec![true, false, true]);
    let (_, grads) = objective(&c, &c.store, Some(&c.keep));
    for (id, name, _) in c.store.iter() {
        let g = &grads[id.0];
        if name.starts_with("logits.1.") {
            assert!(g.data.iter().all(|&x| x == 0.0), "{name}");
        } else {
            assert!(g.data.iter().any(|&x| x != 0.0), "{name}");
        }
    }
}

#[test]
fn mean_entropy_of_uniform_rows() {
    let t = Tensor::zeros(3, 8);
    assert!((mean_entropy(&t) - 8f64.ln()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn clip_inactive_equals_unclipped(seed in 0u64..1000, levels in 1usize..4) {
        let eps = 0.2;
        // |log ratio| < ln(1.18) keeps every ratio inside the window
        let rs = random_rollouts(seed, 4, 3, levels, 0.16);
        let adv = rollout_advantages(&rs).unwrap();
        let cfg = GrpoConfig { clip_eps: eps, ..Default::default() };
        let v = grpo_gen_loss(&rs, &adv, &cfg, None).unwrap();
        let w = 1.0 / levels as f64;
        let mut total = 0.0;
        for (r, a) in rs.iter().zip(&adv) {
            for t in 0..r.len() {
                for l in 0..levels {
                    total += w * (r.actor_logp[t][l] - r.old_logp[t][l]).exp() * a;
                }
            }
        }
        prop_assert!((v - total / 12.0).abs() < 1e-12);
    }

    #[test]
    fn advantages_are_centered(rewards in prop::collection::vec(-5.0f64..5.0, 2..10)) {
        let a = group_advantages(&[rewards]).unwrap();
        prop_assert!(a[0].iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn shifting_and_scaling_rewards_keeps_advantages(
        rewards in prop::collection::vec(-5.0f64..5.0, 2..10),
        shift in -10.0f64..10.0,
        scale in 0.1f64..10.0,
    ) {
        let a = group_advantages(&[rewards.clone()]).unwrap();
        let moved: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
        let b = group_advantages(&[moved]).unwrap();
        let c = group_advantages(&[scaled]).unwrap();
        let spread = {
            let m = rewards.iter().sum::<f64>() / rewards.len() as f64;
            (rewards.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / rewards.len() as f64).sqrt()
        };
        prop_assume!(spread > 1e-3);
        for i in 0..rewards.len() {
            prop_assert!((a[0][i] - b[0][i]).abs() < 1e-6);
            prop_assert!((a[0][i] - c[0][i]).abs() < 1e-6);
        }
    }

    #[test]
    fn objective_ignores_reward_offsets(seed in 0u64..500, shift in -3.0f64..3.0) {
        let rs = random_rollouts(seed, 6, 3, 2, 0.5);
        let moved: Vec<Rollout> = rs.iter().map(|r| Rollout { reward: r.reward + shift, ..r.clone() }).collect();
        let spread_ok = rs.chunks(2).all(|g| (g[0].reward - g[1].reward).abs() > 1e-3);
        prop_assume!(spread_ok);
        let cfg = GrpoConfig::default();
        let a = grpo_gen_loss(&rs, &rollout_advantages(&rs).unwrap(), &cfg, None).unwrap();
        let b = grpo_gen_loss(&moved, &rollout_advantages(&moved).unwrap(), &cfg, None).unwrap();
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn tighter_thresholds_never_grow_the_kept_set(
        ent in prop::collection::vec(0.0f64..5.0, 2..8),
        gaps in prop::collection::vec(0.0f64..0.9, 2..8),
        n_hi in 0.0f64..3.0, n_cut in 0.0f64..1.0,
        d_hi in 0.05f64..0.95, d_cut in 0.0f64..1.0,
    ) {
        let m = ent.len().min(gaps.len());
        let rs: Vec<Rollout> = (0..m).map(|i| with_entropy(ent[i], vec![0.05 + gaps[i]], vec![0.05])).collect();
        let loose = GrpoConfig { entropy_n: n_hi, delta: d_hi, ..Default::default() };
        let tight = GrpoConfig { entropy_n: n_hi * n_cut, delta: (d_hi * d_cut).max(1e-3), ..Default::default() };
        let a = filter_sequences(&rs, &loose).unwrap().keep;
        let b = filter_sequences(&rs, &tight).unwrap().keep;
        for i in 0..m {
            prop_assert!(!b[i] || a[i]);
        }
    }

    #[test]
    fn rewards_are_bounded(out in prop::collection::vec(0u32..4, 0..12), pat in prop::collection::vec(0u32..4, 0..12)) {
        let r = synthetic_reward(&out, &pat);
        prop_assert!((0.0..=1.0).contains(&r));
    }
}
