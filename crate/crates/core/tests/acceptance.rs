//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::fs;
use std::time::{Duration, Instant};

use goats::cli::{self, Checkpoint};
use goats::goaldist::*;
use goats::replay::{HerBuffer, HerConfig, Transition};
use goats::scoopenv::*;
use goats::trainer::{RunConfig, Variant, MULTI_AMOUNTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_box(rng: &mut ChaCha8Rng, dim: usize) -> BoxDistribution {
    let lo: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
    let hi = lo.iter().map(|l| l + rng.random_range(0.01..3.0)).collect();
    BoxDistribution::new(lo, hi).unwrap()
}

fn random_discrete(rng: &mut ChaCha8Rng) -> DiscreteDistribution {
    let n = rng.random_range(1..6);
    let mut support: Vec<f64> = (0..n).map(|_| rng.random_range(0..100) as f64 / 100.0).collect();
    support.sort_by(f64::total_cmp);
    support.dedup();
    let raw: Vec<f64> = support.iter().map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let head: f64 = w[..w.len() - 1].iter().sum();
    *w.last_mut().unwrap() = 1.0 - head;
    DiscreteDistribution::new(support, w).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let dim = rng.random_range(1..4);
        let (a, b) = (random_box(&mut rng, dim), random_box(&mut rng, dim));
        for (k, end) in [(TemporalFactor::ZERO, &a), (TemporalFactor::ONE, &b)] {
            let r = interpolate_box(&a, &b, k).unwrap();
            worst = worst.max(max_abs_diff(r.lower(), end.lower())).max(max_abs_diff(r.upper(), end.upper()));
        }
        let (p, q) = (random_discrete(&mut rng), random_discrete(&mut rng));
        for mode in [InterpolationMode::Mixture, InterpolationMode::Displacement] {
            for (k, end) in [(TemporalFactor::ZERO, &p), (TemporalFactor::ONE, &q)] {
                let r = interpolate_discrete(&p, &q, k, mode).unwrap();
                if r.support().len() != end.support().len() {
                    return outcome(false, "endpoint support size differs");
                }
                worst = worst.max(max_abs_diff(r.support(), end.support())).max(max_abs_diff(r.weights(), end.weights()));
            }
        }
    }
    outcome(worst <= 1e-12, format!("max endpoint deviation {worst:.1e} (tol 1e-12)"))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_box = 0.0f64;
    for _ in 0..120 {
        let dim = rng.random_range(1..4);
        let (a, b) = (random_box(&mut rng, dim), random_box(&mut rng, dim));
        let full = wasserstein2_box(&a, &b, 10_000).unwrap();
        for k in [0.25, 0.5, 0.75] {
            let r = interpolate_box(&a, &b, TemporalFactor::new(k).unwrap()).unwrap();
            let part = wasserstein2_box(&a, &r, 10_000).unwrap();
            worst_box = worst_box.max((part - k * full).abs() / (k * full));
        }
    }
    let mut worst_disc = 0.0f64;
    for _ in 0..120 {
        let (a, b) = (random_discrete(&mut rng), random_discrete(&mut rng));
        let full = wasserstein2_1d(Dist1d::Discrete(&a), Dist1d::Discrete(&b), 0);
        for k in [0.25, 0.5, 0.75] {
            let r = interpolate_discrete(&a, &b, TemporalFactor::new(k).unwrap(), InterpolationMode::Displacement).unwrap();
            let part = wasserstein2_1d(Dist1d::Discrete(&a), Dist1d::Discrete(&r), 0);
            worst_disc = worst_disc.max((part - k * full).abs());
        }
    }
    let t = start.elapsed();
    outcome(
        worst_box <= 1e-3 && worst_disc <= 1e-6 && t < Duration::from_secs(10),
        format!("box rel err {worst_box:.1e} (tol 1e-3), displacement abs err {worst_disc:.1e} (tol 1e-6), {:.2}s", t.as_secs_f64()),
    )
}

fn criterion_3() -> Outcome {
    let goals = RunConfig::default().goals;
    let (a0, ag) = (&goals.initial_amounts, &goals.desired_amounts);
    if a0.mass_at(0.0) != 0.5 || ag.mass_at(0.0) != 0.0 {
        return outcome(false, "endpoint amount distributions are not the expected ones");
    }
    let mut worst = 0.0f64;
    for i in 0..=100 {
        let k = i as f64 / 100.0;
        let r = interpolate_discrete(a0, ag, TemporalFactor::new(k).unwrap(), InterpolationMode::Mixture).unwrap();
        worst = worst.max((r.mass_at(0.0) - (1.0 - k) * 0.5).abs());
    }
    outcome(worst == 0.0, format!("max |P_k(0) - (1-k)/2| = {worst:.1e} over 101 values of k (exact)"))
}

fn criterion_4() -> Outcome {
    let eps = 0.03;
    let desired_pos = vec![0.25, 0.3];
    let mut cases = 0;
    let mut mismatches = 0;
    let mut out_of_range = 0;
    for (inside, offset) in [(true, 0.0), (true, 0.5 * eps), (true, 0.99 * eps), (false, 1.01 * eps), (false, 2.0 * eps), (false, 0.2)] {
        for i in 0..=10 {
            for da in [0.0, 0.7, 1.0] {
                let err = i as f64 / 10.0;
                let aa = if da + err <= 1.0 { da + err } else { da - err };
                if !(0.0..=1.0).contains(&aa) {
                    continue;
                }
                let a = GoalState::new(vec![desired_pos[0] + offset, desired_pos[1]], aa).unwrap();
                let d = GoalState::new(desired_pos.clone(), da).unwrap();
                let ind = if inside { 1.0 } else { 0.0 };
                let direct = ind * (1.0 - (aa - da).abs()) - 1.0;
                let got = reward_factorized(&a, &d, eps);
                let sparse_direct = if inside && (aa - da).abs() <= 0.05 { 0.0 } else { -1.0 };
                if got.to_bits() != direct.to_bits() || reward_sparse(&a, &d, eps, 0.05) != sparse_direct {
                    mismatches += 1;
                }
                if !(-1.0..=0.0).contains(&got) {
                    out_of_range += 1;
                }
                cases += 1;
            }
        }
    }
    outcome(mismatches == 0 && out_of_range == 0, format!("{cases} cases, {mismatches} mismatches, {out_of_range} outside [-1, 0]"))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::gradcheck_command(0, 10, &mut |_, _| {}, &mut out, &mut err);
    let t = start.elapsed();
    let out = String::from_utf8(out).unwrap();
    let overall = out.lines().find_map(|l| l.strip_prefix("overall max_rel_error ")).unwrap_or("nan");
    let max: f64 = overall.split_whitespace().next().and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
    let blocks = out.lines().filter(|l| l.contains("max_rel_error") && !l.starts_with("overall")).count();
    outcome(
        code == cli::EXIT_OK && max <= 1e-4 && blocks == 19 && t < Duration::from_secs(60),
        format!("exit {code}, max rel error {max:.2e} over {blocks} blocks (tol 1e-4), {:.1}s", t.as_secs_f64()),
    )
}

fn criterion_6() -> Outcome {
    let len = 75;
    let cfg = EnvConfig::preset(ContainerPreset::Bowl);
    let her = HerConfig { capacity: 200 * len, k_her: 4.0 };
    let mut buf = HerBuffer::new(&her, len, true).unwrap();
    let mut env = ScoopEnv::new(cfg.clone(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let desired = GoalState::new(vec![0.25, 0.33], 0.7).unwrap();
    for _ in 0..200 {
        let mut obs = env.reset();
        let mut ep = Vec::with_capacity(len);
        for _ in 0..len {
            let a = EnvAction([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let out = env.step(&a).unwrap();
            ep.push(Transition {
                obs,
                action: a,
                next_obs: out.observation,
                achieved_next: out.achieved.clone(),
                desired: desired.clone(),
                done: out.done,
            });
            obs = out.observation;
        }
        buf.store_episode(ep).unwrap();
    }
    let rf = RewardFn::default();
    let (mut relabeled, mut total, mut bad_reward, mut bad_goal) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..100 {
        let b = buf.sample_batch(1000, &mut rng, &rf).unwrap();
        relabeled += b.relabeled_count();
        total += b.len();
        for r in 0..b.len() {
            let o = b.origins[r];
            let ep = buf.episode(o.episode_id).unwrap();
            let expect = match o.goal_index {
                Some(g) => {
                    if g < o.index || b.desired[r] != ep[g].achieved_next {
                        bad_goal += 1;
                    }
                    reward_factorized(&ep[o.index].achieved_next, &ep[g].achieved_next, 0.03)
                }
                None => reward_factorized(&ep[o.index].achieved_next, &desired, 0.03),
            };
            if b.rewards[r].to_bits() != expect.to_bits() {
                bad_reward += 1;
            }
        }
    }
    let frac = relabeled as f64 / total as f64;
    outcome(
        (frac - 0.8).abs() <= 0.02 && bad_reward == 0 && bad_goal == 0,
        format!("relabeled {frac:.4} of {total} (target 0.8 +/- 0.02), {bad_reward} reward mismatches, {bad_goal} bad hindsight goals"),
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let cfg = EnvConfig::preset(ContainerPreset::Bowl);
    let mut env = ScoopEnv::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst, mut fill_violations, mut steps) = (0.0f64, 0usize, 0usize);
    for _ in 0..10_000 {
        env.reset();
        let total = env.state().total_volume();
        loop {
            let a = EnvAction([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let out = env.step(&a).unwrap();
            let s = env.state();
            worst = worst.max((s.total_volume() - total).abs() / total);
            if !(0.0..=cfg.container_capacity).contains(&s.fill_volume) {
                fill_violations += 1;
            }
            steps += 1;
            if out.done {
                break;
            }
        }
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-9 && fill_violations == 0 && t < Duration::from_secs(60),
        format!("{steps} steps, max relative drift {worst:.1e} (tol 1e-9), {fill_violations} fill violations, {:.1}s", t.as_secs_f64()),
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    assert_eq!(cfg.env.episode_len, 75);
    assert_eq!(cfg.total_episodes, 2000);
    assert_eq!(cfg.goals.desired_amounts.support(), &MULTI_AMOUNTS);
    let variants = [Variant::Goats, Variant::SacHerUgs, Variant::SacHer, Variant::Sac, Variant::SacHerPags];
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let dir = tempfile::tempdir().unwrap();
    let rows = match cli::ablate(&cfg, &variants, &[0, 1, 2], dir.path(), jobs) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("ablation failed: {e}")),
    };
    let row = |v: Variant| rows.iter().find(|r| r.variant == v).unwrap();
    let (g, ugs, her, sac, pags) =
        (row(Variant::Goats), row(Variant::SacHerUgs), row(Variant::SacHer), row(Variant::Sac), row(Variant::SacHerPags));
    // "Approximately equal": within two combined standard errors or 5% of
    // the larger magnitude.
    let close = {
        let diff = (her.best_eval_reward_mean - sac.best_eval_reward_mean).abs();
        let se = (her.best_eval_reward_se.powi(2) + sac.best_eval_reward_se.powi(2)).sqrt();
        let scale = her.best_eval_reward_mean.abs().max(sac.best_eval_reward_mean.abs());
        diff <= 2.0 * se || diff <= 0.05 * scale
    };
    let checks = [
        ("goats > sac_her_ugs", g.best_eval_reward_mean > ugs.best_eval_reward_mean),
        ("sac_her_ugs > sac_her", ugs.best_eval_reward_mean > her.best_eval_reward_mean),
        ("sac_her_ugs > sac", ugs.best_eval_reward_mean > sac.best_eval_reward_mean),
        ("sac_her ~ sac", close),
        ("goats amount error < 0.15", g.amount_error_mean < 0.15),
        ("sac amount error > 0.5", sac.amount_error_mean > 0.5),
        ("sac_her amount error > 0.5", her.amount_error_mean > 0.5),
        ("pags error <= ugs error", pags.amount_error_mean <= ugs.amount_error_mean),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let table: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{} reward {:.2}+/-{:.2} amt_err {:.3}+/-{:.3}",
                r.variant, r.best_eval_reward_mean, r.best_eval_reward_se, r.amount_error_mean, r.amount_error_se
            )
        })
        .collect();
    let mut detail = format!("{}; {:.0}s on {jobs} thread(s)", table.join("; "), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        detail.push_str(&format!("; failed: {}", failed.join(", ")));
    }
    outcome(failed.is_empty(), detail)
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.toml");
    fs::write(&cfg_path, "total_episodes = 30\neval_every = 10\neval_episodes = 10\n[sac]\nwarmup_steps = 500\n").unwrap();
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = tmp.path().join(name);
        let args = ["goats", "train", "--config", cfg_path.to_str().unwrap(), "--seed", "3", "--out", out_dir.to_str().unwrap()];
        let code = cli::run(args, &mut Vec::new(), &mut Vec::new());
        if code != cli::EXIT_OK {
            return outcome(false, format!("train exited {code}"));
        }
        csvs.push(fs::read(out_dir.join("goats/seed3/metrics.csv")).unwrap());
    }
    let identical = csvs[0] == csvs[1];
    let final_path = tmp.path().join("a/goats/seed3/final.json");
    let ck = Checkpoint::load(&final_path).unwrap();
    let again = tmp.path().join("again.json");
    ck.save(&again).unwrap();
    let back = Checkpoint::load(&again).unwrap();
    let (a1, a2) = (ck.agent().unwrap(), back.agent().unwrap());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let exact = ck == back
        && a1 == a2
        && bits(a1.actor.net.params()) == bits(a2.actor.net.params())
        && bits(&a1.q1_opt.m) == bits(&a2.q1_opt.m)
        && bits(&a1.q1_opt.v) == bits(&a2.q1_opt.v)
        && a1.log_alpha.to_bits() == a2.log_alpha.to_bits()
        && fs::read(&final_path).unwrap() == fs::read(&again).unwrap();
    outcome(
        identical && exact,
        format!("metrics CSVs identical: {identical} ({} bytes); checkpoint round trip bit-exact: {exact}", csvs[0].len()),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 9] = [
        ("interpolation endpoints", criterion_1),
        ("geodesic linearity", criterion_2),
        ("mixture law", criterion_3),
        ("reward table", criterion_4),
        ("gradient suite", criterion_5),
        ("hindsight statistics", criterion_6),
        ("conservation", criterion_7),
        ("ablation ordering", criterion_8),
        ("determinism", criterion_9),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("criterion_{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| id.contains(p.as_str()) || name.contains(p.as_str())) {
            continue;
        }
        let o = f();
        println!("{} {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
