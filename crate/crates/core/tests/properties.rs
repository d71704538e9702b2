use goats::goaldist::*;
use goats::replay::{HerBuffer, HerConfig, Transition};
use goats::scoopenv::*;
use goats::trainer::{temporal_factor, CurriculumSchedule};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn boxes(dim: usize) -> impl Strategy<Value = (BoxDistribution, BoxDistribution)> {
    let b = prop::collection::vec((-5.0f64..5.0, 0.0f64..3.0), dim)
        .prop_map(|v| BoxDistribution::new(v.iter().map(|p| p.0).collect(), v.iter().map(|p| p.0 + p.1).collect()).unwrap());
    (b.clone(), b)
}

fn discrete() -> impl Strategy<Value = DiscreteDistribution> {
    prop::collection::btree_map(0u32..100, 0.01f64..1.0, 1..6).prop_map(|m| {
        let total: f64 = m.values().sum();
        let support = m.keys().map(|k| *k as f64 / 100.0).collect();
        let mut weights: Vec<f64> = m.values().map(|w| w / total).collect();
        let s: f64 = weights[..weights.len() - 1].iter().sum();
        *weights.last_mut().unwrap() = 1.0 - s;
        DiscreteDistribution::new(support, weights).unwrap()
    })
}

fn k_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn box_endpoints_and_containment((a, b) in (1usize..4).prop_flat_map(boxes), k in k_strategy()) {
        let tk = TemporalFactor::new(k).unwrap();
        let r = interpolate_box(&a, &b, tk).unwrap();
        for i in 0..a.dim() {
            prop_assert!(r.lower()[i] <= r.upper()[i]);
            let lo = a.lower()[i].min(b.lower()[i]) - 1e-12;
            let hi = a.upper()[i].max(b.upper()[i]) + 1e-12;
            prop_assert!(r.lower()[i] >= lo && r.upper()[i] <= hi);
        }
        prop_assert_eq!(interpolate_box(&a, &b, TemporalFactor::ZERO).unwrap(), a.clone());
        prop_assert_eq!(interpolate_box(&a, &b, TemporalFactor::ONE).unwrap(), b);
    }

    #[test]
    fn box_geodesic((a, b) in (1usize..4).prop_flat_map(boxes), k in prop_oneof![Just(0.25), Just(0.5), Just(0.75)]) {
        let r = interpolate_box(&a, &b, TemporalFactor::new(k).unwrap()).unwrap();
        let full = wasserstein2_box(&a, &b, 10_000).unwrap();
        let part = wasserstein2_box(&a, &r, 10_000).unwrap();
        prop_assert!((part - k * full).abs() <= 1e-3 * full + 1e-12, "{part} vs {}", k * full);
    }

    #[test]
    fn discrete_mixture_law(a in discrete(), b in discrete(), k in k_strategy()) {
        let r = interpolate_discrete(&a, &b, TemporalFactor::new(k).unwrap(), InterpolationMode::Mixture).unwrap();
        let sum: f64 = r.weights().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(r.weights().iter().all(|w| *w >= 0.0));
        prop_assert!(r.support().windows(2).all(|w| w[0] < w[1]));
        if k > 0.0 && k < 1.0 {
            for &x in r.support() {
                let expect = (1.0 - k) * a.mass_at(x) + k * b.mass_at(x);
                prop_assert!((r.mass_at(x) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn discrete_endpoints(a in discrete(), b in discrete()) {
        for mode in [InterpolationMode::Mixture, InterpolationMode::Displacement] {
            prop_assert_eq!(interpolate_discrete(&a, &b, TemporalFactor::ZERO, mode).unwrap(), a.clone());
            prop_assert_eq!(interpolate_discrete(&a, &b, TemporalFactor::ONE, mode).unwrap(), b.clone());
        }
    }

    #[test]
    fn displacement_is_geodesic(a in discrete(), b in discrete(), k in prop_oneof![Just(0.25), Just(0.5), Just(0.75)]) {
        let r = interpolate_discrete(&a, &b, TemporalFactor::new(k).unwrap(), InterpolationMode::Displacement).unwrap();
        let full = wasserstein2_1d(Dist1d::Discrete(&a), Dist1d::Discrete(&b), 0);
        let part = wasserstein2_1d(Dist1d::Discrete(&a), Dist1d::Discrete(&r), 0);
        prop_assert!((part - k * full).abs() <= 1e-6, "{part} vs {}", k * full);
        prop_assert!((r.mean() - ((1.0 - k) * a.mean() + k * b.mean())).abs() < 1e-9);
    }

    #[test]
    fn rewards_bounded(
        ax in 0.0f64..0.5, ay in 0.0f64..0.5, aa in 0.0f64..=1.0,
        dx in 0.0f64..0.5, dy in 0.0f64..0.5, da in 0.0f64..=1.0,
        eps in 0.001f64..0.2,
    ) {
        let a = GoalState::new(vec![ax, ay], aa).unwrap();
        let d = GoalState::new(vec![dx, dy], da).unwrap();
        let r = reward_factorized(&a, &d, eps);
        prop_assert!((-1.0..=0.0).contains(&r));
        let s = reward_sparse(&a, &d, eps, eps);
        prop_assert!(s == 0.0 || s == -1.0);
        if a.position_distance(&d) > eps {
            prop_assert_eq!(r, -1.0);
            prop_assert_eq!(s, -1.0);
        } else {
            prop_assert!((r + (aa - da).abs()).abs() < 1e-12);
        }
        prop_assert_eq!(reward_factorized(&a, &a, eps), 0.0);
    }

    #[test]
    fn environment_conserves_water(seed in any::<u64>(), actions in prop::collection::vec(prop::array::uniform3(-1.5f64..1.5), 75)) {
        let cfg = EnvConfig::preset(ContainerPreset::Bowl);
        let mut env = ScoopEnv::new(cfg.clone(), seed).unwrap();
        env.reset();
        let total = env.state().total_volume();
        for a in actions {
            let out = env.step(&EnvAction(a)).unwrap();
            let s = env.state();
            prop_assert!((s.total_volume() - total).abs() <= 1e-9 * total);
            prop_assert!(s.fill_volume >= 0.0 && s.fill_volume <= cfg.container_capacity);
            prop_assert!(cfg.workspace.contains(&[s.x, s.y]));
            prop_assert!(s.theta.abs() <= cfg.theta_limit);
            if out.done { break; }
        }
    }

    #[test]
    fn linear_schedule_is_monotone(total in 1usize..500, frac in 0.01f64..=1.0) {
        let s = CurriculumSchedule::Linear { ramp_fraction: frac };
        let ks: Vec<f64> = (0..total).map(|e| temporal_factor(&s, e, total, 0.0, 0.0)).collect();
        prop_assert_eq!(ks[0], 0.0);
        prop_assert!(ks.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(ks.iter().all(|k| (0.0..=1.0).contains(k)));
    }

    #[test]
    fn hindsight_goals_and_rewards(seed in any::<u64>(), k_her in 0.0f64..8.0) {
        let len = 6;
        let mut buf = HerBuffer::new(&HerConfig { capacity: 60, k_her }, len, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EnvConfig::preset(ContainerPreset::Bowl);
        let mut env = ScoopEnv::new(EnvConfig { episode_len: len, ..cfg }, seed).unwrap();
        let desired = GoalState::new(vec![0.25, 0.3], 0.7).unwrap();
        for _ in 0..12 {
            let mut obs = env.reset();
            let mut ep = Vec::new();
            for _ in 0..len {
                let a = EnvAction([rand::Rng::random_range(&mut rng, -1.0..1.0), -1.0, 0.0]);
                let out = env.step(&a).unwrap();
                ep.push(Transition { obs, action: a, next_obs: out.observation, achieved_next: out.achieved.clone(), desired: desired.clone(), done: out.done });
                obs = out.observation;
            }
            buf.store_episode(ep).unwrap();
        }
        prop_assert_eq!(buf.len(), 60);
        let rf = RewardFn::default();
        let b = buf.sample_batch(256, &mut rng, &rf).unwrap();
        for r in 0..b.len() {
            let o = b.origins[r];
            let ep = buf.episode(o.episode_id).unwrap();
            prop_assert_eq!(&b.achieved_next[r], &ep[o.index].achieved_next);
            match o.goal_index {
                Some(g) => {
                    prop_assert!(g >= o.index);
                    prop_assert_eq!(&b.desired[r], &ep[g].achieved_next);
                }
                None => prop_assert_eq!(&b.desired[r], &desired),
            }
            prop_assert_eq!(b.rewards[r].to_bits(), rf.eval(&b.achieved_next[r], &b.desired[r]).to_bits());
            prop_assert_eq!(b.goals.row(r).to_vec(), b.desired[r].to_vec());
        }
    }
}
