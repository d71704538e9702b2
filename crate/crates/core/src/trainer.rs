//! Curriculum training loop, goal-distribution variants and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goaldist::{
    interpolate_box, interpolate_discrete, sample_goal, BoxDistribution, DiscreteDistribution, GoalState,
    InterpolationMode, RewardFn, TemporalFactor,
};
use crate::replay::{HerBuffer, HerConfig, Transition};
use crate::sac::{InputNormalizer, SacAgent, SacConfig, UpdateStats};
use crate::scoopenv::{ContainerPreset, EnvAction, EnvConfig, ScoopEnv, TraceRecord, ACTION_DIM};

/// How the temporal factor advances over training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurriculumSchedule {
    /// `k = min(1, episode / (ramp_fraction · total))`.
    Linear { ramp_fraction: f64 },
    /// `k += delta_k` whenever the rolling training success rate over the
    /// last `window` episodes reaches `success_threshold`.
    Gated { delta_k: f64, success_threshold: f64, window: usize },
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule::Linear { ramp_fraction: 0.5 }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CurriculumSchedule::Linear { ramp_fraction } if ramp_fraction > 0.0 && ramp_fraction <= 1.0 => Ok(()),
            CurriculumSchedule::Gated { delta_k, success_threshold, window }
                if delta_k > 0.0 && delta_k <= 1.0 && (0.0..=1.0).contains(&success_threshold) && window > 0 =>
            {
                Ok(())
            }
            _ => Err(Error::InvalidConfig(format!("invalid curriculum schedule {self:?}"))),
        }
    }
}

/// Next temporal factor. `previous_k` is the factor used for the previous
/// episode (ignored by the linear schedule).
pub fn temporal_factor(
    schedule: &CurriculumSchedule,
    episode_index: usize,
    total_episodes: usize,
    rolling_success: f64,
    previous_k: f64,
) -> f64 {
    match *schedule {
        CurriculumSchedule::Linear { ramp_fraction } => {
            let ramp = ramp_fraction * total_episodes as f64;
            if ramp <= 0.0 {
                1.0
            } else {
                (episode_index as f64 / ramp).min(1.0)
            }
        }
        CurriculumSchedule::Gated { delta_k, success_threshold, .. } => {
            if rolling_success >= success_threshold {
                (previous_k + delta_k).min(1.0)
            } else {
                previous_k
            }
        }
    }
}

/// Stateful wrapper tracking `k` and the rolling success window.
#[derive(Clone, Debug)]
pub struct Curriculum {
    schedule: CurriculumSchedule,
    k: f64,
    recent: std::collections::VecDeque<bool>,
}

impl Curriculum {
    pub fn new(schedule: CurriculumSchedule) -> Self {
        Self { schedule, k: 0.0, recent: Default::default() }
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// Factor for episode `episode_index`.
    pub fn advance(&mut self, episode_index: usize, total_episodes: usize) -> TemporalFactor {
        let window = match self.schedule {
            CurriculumSchedule::Gated { window, .. } => window,
            CurriculumSchedule::Linear { .. } => 0,
        };
        let rolling = if window > 0 && self.recent.len() >= window {
            self.recent.iter().filter(|s| **s).count() as f64 / self.recent.len() as f64
        } else {
            0.0
        };
        let next = temporal_factor(&self.schedule, episode_index, total_episodes, rolling, self.k);
        if next > self.k {
            // A gate opening starts a fresh window at the new difficulty.
            if matches!(self.schedule, CurriculumSchedule::Gated { .. }) {
                self.recent.clear();
            }
        }
        self.k = next.max(self.k).clamp(0.0, 1.0);
        TemporalFactor::new(self.k).expect("clamped")
    }

    pub fn record(&mut self, success: bool) {
        if let CurriculumSchedule::Gated { window, .. } = self.schedule {
            self.recent.push_back(success);
            while self.recent.len() > window {
                self.recent.pop_front();
            }
        }
    }
}

/// The six baselines plus the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sac,
    SacHer,
    SacUgs,
    SacPags,
    SacHerUgs,
    SacHerPags,
    Goats,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Sac,
        Variant::SacHer,
        Variant::SacUgs,
        Variant::SacPags,
        Variant::SacHerUgs,
        Variant::SacHerPags,
        Variant::Goats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sac => "sac",
            Variant::SacHer => "sac_her",
            Variant::SacUgs => "sac_ugs",
            Variant::SacPags => "sac_pags",
            Variant::SacHerUgs => "sac_her_ugs",
            Variant::SacHerPags => "sac_her_pags",
            Variant::Goats => "goats",
        }
    }

    pub fn uses_her(self) -> bool {
        matches!(self, Variant::SacHer | Variant::SacHerUgs | Variant::SacHerPags | Variant::Goats)
    }

    pub fn valid_names() -> String {
        Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`; valid variants: {}", Variant::valid_names())))
    }
}

/// Endpoint distributions shared by every variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSetup {
    /// Easy position goals near the tank bottom.
    pub initial_positions: BoxDistribution,
    /// Target region above the tank.
    pub desired_positions: BoxDistribution,
    /// Zero amount plus the desired amounts.
    pub initial_amounts: DiscreteDistribution,
    pub desired_amounts: DiscreteDistribution,
    /// Fixed box covering both position regions, used by the universal baselines.
    pub universal_positions: BoxDistribution,
    pub interpolation: InterpolationMode,
}

pub const MULTI_AMOUNTS: [f64; 5] = [0.60, 0.65, 0.70, 0.75, 0.80];
pub const SINGLE_AMOUNT: [f64; 1] = [0.70];

impl GoalSetup {
    pub fn for_preset(preset: ContainerPreset, amounts: &[f64], zero_weight: f64) -> Result<Self> {
        let (lo_y, hi_y) = match preset {
            ContainerPreset::Bowl => (0.27, 0.40),
            ContainerPreset::Bucket => (0.37, 0.50),
        };
        let desired_positions = BoxDistribution::new(vec![0.15, lo_y], vec![0.35, hi_y])?;
        let initial_positions = BoxDistribution::new(vec![0.15, 0.0], vec![0.35, 0.05])?;
        let universal_positions = initial_positions.union_cover(&desired_positions)?;
        Ok(Self {
            initial_positions,
            desired_positions,
            initial_amounts: DiscreteDistribution::with_zero_mass(amounts, zero_weight)?,
            desired_amounts: DiscreteDistribution::uniform(amounts)?,
            universal_positions,
            interpolation: InterpolationMode::Mixture,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.desired_positions.dim();
        for b in [&self.initial_positions, &self.universal_positions] {
            if b.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: b.dim() });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantConfig {
    pub variant: Variant,
    pub goals: GoalSetup,
}

impl VariantConfig {
    pub fn her_enabled(&self) -> bool {
        self.variant.uses_her()
    }
}

/// Training-time goal distributions of a variant at curriculum factor `k`.
pub fn make_goal_distributions(cfg: &VariantConfig, k: TemporalFactor) -> Result<(BoxDistribution, DiscreteDistribution)> {
    let g = &cfg.goals;
    Ok(match cfg.variant {
        Variant::Goats => (
            interpolate_box(&g.initial_positions, &g.desired_positions, k)?,
            interpolate_discrete(&g.initial_amounts, &g.desired_amounts, k, g.interpolation)?,
        ),
        Variant::SacPags | Variant::SacHerPags => (
            interpolate_box(&g.initial_positions, &g.desired_positions, k)?,
            g.initial_amounts.clone(),
        ),
        Variant::SacUgs | Variant::SacHerUgs => (g.universal_positions.clone(), g.initial_amounts.clone()),
        Variant::Sac | Variant::SacHer => (g.desired_positions.clone(), g.desired_amounts.clone()),
    })
}

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub total_episodes: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Also write a checkpoint every this many episodes (0 disables).
    pub checkpoint_every: usize,
    pub out_dir: String,
    /// Fill the `wall_time_s` metrics column; off keeps metrics byte-reproducible.
    pub record_wall_time: bool,
    pub env: EnvConfig,
    pub goals: GoalSetup,
    pub reward: RewardFn,
    pub curriculum: CurriculumSchedule,
    pub sac: SacConfig,
    pub her: HerConfig,
}

impl RunConfig {
    pub fn preset(preset: ContainerPreset, amounts: &[f64]) -> Self {
        Self {
            variant: Variant::Goats,
            seeds: vec![0, 1, 2],
            total_episodes: 2000,
            eval_every: 50,
            eval_episodes: 100,
            checkpoint_every: 0,
            out_dir: "runs".into(),
            record_wall_time: false,
            env: EnvConfig::preset(preset),
            goals: GoalSetup::for_preset(preset, amounts, 0.5).expect("static preset"),
            reward: RewardFn::default(),
            curriculum: CurriculumSchedule::default(),
            sac: SacConfig::default(),
            her: HerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.goals.validate()?;
        self.reward.validate()?;
        self.curriculum.validate()?;
        self.sac.validate()?;
        if self.goals.desired_positions.dim() != self.env.workspace.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.env.workspace.dim(),
                got: self.goals.desired_positions.dim(),
            });
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(Error::InvalidConfig("eval_every and eval_episodes must be positive".into()));
        }
        if self.her.capacity < self.env.episode_len {
            return Err(Error::InvalidConfig("replay capacity smaller than one episode".into()));
        }
        Ok(())
    }

    pub fn variant_config(&self) -> VariantConfig {
        VariantConfig { variant: self.variant, goals: self.goals.clone() }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(ContainerPreset::Bowl, &MULTI_AMOUNTS)
    }
}

/// One evaluated episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub desired: GoalState,
    pub reward_sum: f64,
    pub final_amount: f64,
    pub amount_error: f64,
    pub position_success: bool,
    /// Amount error at the first step the position goal was within tolerance.
    pub amount_error_at_first_reach: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_reward: f64,
    pub reward_se: f64,
    pub amount_error_mean: f64,
    pub amount_error_se: f64,
    pub position_success_rate: f64,
    pub first_reach_amount_error_mean: Option<f64>,
    pub episodes: Vec<EpisodeRecord>,
}

/// Mean and standard error of the mean (zero for a single value).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

const EVAL_STREAM: u64 = 0xE7A1;

/// Rolls out one deterministic-policy episode towards `desired`.
pub fn rollout_episode(
    agent: &SacAgent,
    env_cfg: &EnvConfig,
    desired: &GoalState,
    reward_fn: &RewardFn,
    env_seed: u64,
    trace: Option<&mut Vec<TraceRecord>>,
) -> Result<EpisodeRecord> {
    let mut env = ScoopEnv::new(env_cfg.clone(), env_seed)?;
    let mut obs = env.reset();
    let mut reward_sum = 0.0;
    let mut first_reach = None;
    let tol = reward_fn.position_tolerance();
    let mut last = obs.achieved_goal();
    let mut records = trace;
    for _ in 0..env_cfg.episode_len {
        let input = agent.input_for(&obs, desired);
        let action = agent.act_deterministic(&input)?;
        let out = env.step(&action)?;
        let r = reward_fn.eval(&out.achieved, desired);
        reward_sum += r;
        if first_reach.is_none() && out.achieved.position_distance(desired) <= tol {
            first_reach = Some((out.achieved.amount - desired.amount).abs());
        }
        if let Some(rec) = records.as_deref_mut() {
            let s = env.state();
            rec.push(TraceRecord {
                step: s.step_count,
                x: s.x,
                y: s.y,
                theta: s.theta,
                fill_fraction: s.fill_fraction(),
                waterline: env.waterline(),
                reward: r,
            });
        }
        obs = out.observation;
        last = out.achieved;
        if out.done {
            break;
        }
    }
    Ok(EpisodeRecord {
        desired: desired.clone(),
        reward_sum,
        final_amount: last.amount,
        amount_error: (last.amount - desired.amount).abs(),
        position_success: last.position_distance(desired) <= tol,
        amount_error_at_first_reach: first_reach,
    })
}

/// Goal and environment seed of evaluation episode `i`.
pub fn eval_episode_setup(goals: &GoalSetup, seed: u64, i: usize) -> (GoalState, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, EVAL_STREAM + i as u64));
    let desired = sample_goal(&goals.desired_positions, &goals.desired_amounts, &mut rng);
    (desired, rng.random())
}

/// Deterministic-policy evaluation against the desired goal distributions.
pub fn evaluate(
    agent: &SacAgent,
    env_cfg: &EnvConfig,
    goals: &GoalSetup,
    reward_fn: &RewardFn,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one episode".into()));
    }
    let episodes = (0..n_episodes)
        .map(|i| {
            let (desired, env_seed) = eval_episode_setup(goals, seed, i);
            rollout_episode(agent, env_cfg, &desired, reward_fn, env_seed, None)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(episodes))
}

pub fn summarize(episodes: Vec<EpisodeRecord>) -> EvalReport {
    let rewards: Vec<f64> = episodes.iter().map(|e| e.reward_sum).collect();
    let errors: Vec<f64> = episodes.iter().map(|e| e.amount_error).collect();
    let (mean_reward, reward_se) = mean_se(&rewards);
    let (amount_error_mean, amount_error_se) = mean_se(&errors);
    let position_success_rate =
        episodes.iter().filter(|e| e.position_success).count() as f64 / episodes.len().max(1) as f64;
    let reach: Vec<f64> = episodes.iter().filter_map(|e| e.amount_error_at_first_reach).collect();
    let first_reach_amount_error_mean = (!reach.is_empty()).then(|| mean_se(&reach).0);
    EvalReport {
        mean_reward,
        reward_se,
        amount_error_mean,
        amount_error_se,
        position_success_rate,
        first_reach_amount_error_mean,
        episodes,
    }
}

/// One row of the learning-curve metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub episode: usize,
    pub env_steps: usize,
    pub k: f64,
    pub variant: Variant,
    pub seed: u64,
    pub train_reward: f64,
    pub eval_reward_mean: f64,
    pub eval_reward_se: f64,
    pub amount_error_mean: f64,
    pub pos_success_rate: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub alpha: f64,
    pub wall_time_s: f64,
}

/// A finished training episode as handed to observers.
pub struct EpisodeSummary<'a> {
    pub index: usize,
    pub k: f64,
    pub desired: &'a GoalState,
    pub reward_sum: f64,
    pub transitions: &'a [Transition],
}

/// Hooks for persistence; the loop itself performs no I/O.
pub trait TrainingObserver {
    fn on_episode(&mut self, _summary: &EpisodeSummary<'_>) {}
    /// Called after every evaluation with the row and whether it is the best so far.
    fn on_eval(&mut self, _row: &MetricsRow, _report: &EvalReport, _agent: &SacAgent, _is_best: bool) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _episode: usize, _agent: &SacAgent) -> Result<()> {
        Ok(())
    }
    fn on_abort(&mut self, _episode: usize, _agent: &SacAgent, _what: &str) {}
}

pub struct NoopObserver;
impl TrainingObserver for NoopObserver {}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub metrics: Vec<MetricsRow>,
    pub agent: SacAgent,
    pub best_agent: SacAgent,
    /// Best evaluation row (highest mean reward), if any evaluation ran.
    pub best: Option<MetricsRow>,
    pub env_steps: usize,
}

/// Fresh agent for a run: deterministic in `(config, seed)`.
pub fn initial_agent(config: &RunConfig, seed: u64) -> Result<SacAgent> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 1));
    let normalizer = InputNormalizer::for_env(&config.env, config.sac.include_achieved);
    SacAgent::new(config.sac.clone(), normalizer, &mut rng)
}

/// Goal-sampling-adaptation training loop.
pub fn run_training(config: &RunConfig, seed: u64, observer: &mut dyn TrainingObserver) -> Result<TrainingOutcome> {
    config.validate()?;
    let started = std::time::Instant::now();
    let variant_cfg = config.variant_config();
    let mut agent = initial_agent(config, seed)?;
    let mut env = ScoopEnv::new(config.env.clone(), stream_seed(seed, 2))?;
    let mut goal_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 3));
    let mut act_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 4));
    let mut replay_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 5));
    let mut update_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 6));
    let eval_seed = stream_seed(seed, 7);
    let mut buffer = HerBuffer::new(&config.her, config.env.episode_len, variant_cfg.her_enabled())?;
    let mut curriculum = Curriculum::new(config.curriculum.clone());

    let mut metrics = Vec::new();
    let mut best: Option<MetricsRow> = None;
    let mut best_agent = agent.clone();
    let mut env_steps = 0usize;
    let mut last_stats = UpdateStats { alpha: agent.alpha(), ..Default::default() };
    let tol = config.reward.position_tolerance();

    for episode in 0..config.total_episodes {
        let k = curriculum.advance(episode, config.total_episodes);
        let (positions, amounts) = make_goal_distributions(&variant_cfg, k)?;
        let desired = sample_goal(&positions, &amounts, &mut goal_rng);
        let mut obs = env.reset();
        let mut transitions = Vec::with_capacity(config.env.episode_len);
        let mut reward_sum = 0.0;

        for _ in 0..config.env.episode_len {
            let action = if env_steps < config.sac.warmup_steps {
                let mut a = [0.0; ACTION_DIM];
                a.iter_mut().for_each(|v| *v = act_rng.random_range(-1.0..1.0));
                EnvAction(a)
            } else {
                agent.act(&agent.input_for(&obs, &desired), &mut act_rng, false)?
            };
            let out = env.step(&action)?;
            reward_sum += config.reward.eval(&out.achieved, &desired);
            transitions.push(Transition {
                obs,
                action,
                next_obs: out.observation,
                achieved_next: out.achieved.clone(),
                desired: desired.clone(),
                done: out.done,
            });
            obs = out.observation;
            env_steps += 1;

            if env_steps >= config.sac.warmup_steps && buffer.len() >= config.sac.batch_size {
                for _ in 0..config.sac.updates_per_step {
                    let batch = buffer.sample_batch(config.sac.batch_size, &mut replay_rng, &config.reward)?;
                    let stats = agent.update(&batch, &mut update_rng)?;
                    if !(stats.critic_loss.is_finite() && stats.actor_loss.is_finite() && stats.alpha.is_finite()) {
                        let what = format!(
                            "non-finite loss (critic {}, actor {}, alpha {})",
                            stats.critic_loss, stats.actor_loss, stats.alpha
                        );
                        observer.on_abort(episode, &agent, &what);
                        return Err(Error::NumericalAbort { episode, what });
                    }
                    last_stats = stats;
                }
            }
            if out.done {
                break;
            }
        }

        let last = &transitions[transitions.len() - 1].achieved_next;
        let success = last.position_distance(&desired) <= tol;
        curriculum.record(success);
        observer.on_episode(&EpisodeSummary {
            index: episode,
            k: k.value(),
            desired: &desired,
            reward_sum,
            transitions: &transitions,
        });
        buffer.store_episode(transitions)?;

        let completed = episode + 1;
        if completed % config.eval_every == 0 || completed == config.total_episodes {
            let report = evaluate(&agent, &config.env, &config.goals, &config.reward, config.eval_episodes, eval_seed)?;
            let row = MetricsRow {
                episode: completed,
                env_steps,
                k: k.value(),
                variant: config.variant,
                seed,
                train_reward: reward_sum,
                eval_reward_mean: report.mean_reward,
                eval_reward_se: report.reward_se,
                amount_error_mean: report.amount_error_mean,
                pos_success_rate: report.position_success_rate,
                actor_loss: last_stats.actor_loss,
                critic_loss: last_stats.critic_loss,
                alpha: last_stats.alpha,
                wall_time_s: if config.record_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
            };
            let is_best = best.as_ref().is_none_or(|b| row.eval_reward_mean > b.eval_reward_mean);
            if is_best {
                best = Some(row.clone());
                best_agent = agent.clone();
            }
            observer.on_eval(&row, &report, &agent, is_best)?;
            metrics.push(row);
        }
        if config.checkpoint_every > 0 && completed % config.checkpoint_every == 0 {
            observer.on_checkpoint(completed, &agent)?;
        }
    }

    Ok(TrainingOutcome { metrics, agent, best_agent, best, env_steps })
}
